#pragma once

#include <functional>
#include <string>

namespace eegssm {

// Process-wide warning sink. The default handler writes to stderr; tests and
// the CLI may install their own to capture warning records.
using WarningHandler = std::function<void(const std::string&)>;

void set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

}  // namespace eegssm
