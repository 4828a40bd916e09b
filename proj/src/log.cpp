#include "eegssm/log.hpp"

#include <iostream>
#include <mutex>

namespace eegssm {

namespace {
std::mutex mutex;
WarningHandler handler = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
}  // namespace

void set_warning_handler(WarningHandler h) {
  std::lock_guard lock(mutex);
  handler = h ? std::move(h) : [](const std::string&) {};
}

void warn(const std::string& message) {
  std::lock_guard lock(mutex);
  handler(message);
}

}  // namespace eegssm
