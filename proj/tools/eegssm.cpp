#include "eegssm/cli.hpp"

int main(int argc, char** argv) { return eegssm::cli::main(argc, argv); }
