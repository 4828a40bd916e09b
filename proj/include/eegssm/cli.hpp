#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace eegssm::cli {

inline const std::vector<std::string> commands{"synth",    "prep",      "train",     "segcurve",
                                               "loso",     "crossfreq", "crosstask", "report"};

// Every key with its default value; `--print-config` prints this merged with
// the user's file.
nlohmann::json default_config();

// Merges `user` onto the defaults, rejecting unknown keys at every level, and
// validates the nested sections.
nlohmann::json resolve_config(const nlohmann::json& user);

// Runs one subcommand and writes its artifacts under `out`. Returns the
// results document (also written to out/results.json for experiment commands).
nlohmann::json run_command(const std::string& command, const nlohmann::json& config, const std::filesystem::path& out,
                           const std::vector<std::filesystem::path>& report_inputs = {});

// Table files (relative path -> CSV text) recomputed from stored predictions.
std::map<std::string, std::string> derive_tables(const nlohmann::json& results);

// Hex SHA-1 of a git blob object holding `content`.
std::string git_blob_hash(const std::string& content);

// Parses argv and dispatches. Exit codes: 0 success, 2 configuration error,
// 3 data error, 4 numeric failure.
int main(int argc, char** argv);

}  // namespace eegssm::cli
