#pragma once

#include <string>

#include <json.hpp>

#include "eegssm/errors.hpp"

namespace eegssm {

// Rejects keys of `given` that are absent from `defaults`, listing the valid ones.
inline void check_keys(const nlohmann::json& given, const nlohmann::json& defaults, const std::string& what) {
  if (!given.is_object()) throw ConfigError(what + " must be a JSON object");
  for (auto& [key, value] : given.items()) {
    if (defaults.contains(key)) continue;
    std::string valid;
    for (auto& [k, v] : defaults.items()) valid += (valid.empty() ? "" : ", ") + k;
    throw ConfigError("unknown key '" + key + "' in " + what + " (valid keys: " + valid + ")");
  }
}

// Defaults overlaid with the keys present in `given`, after check_keys.
inline nlohmann::json merge_checked(const nlohmann::json& given, const nlohmann::json& defaults, const std::string& what) {
  check_keys(given, defaults, what);
  nlohmann::json out = defaults;
  for (auto& [key, value] : given.items()) out[key] = value;
  return out;
}

template <class T>
T get_field(const nlohmann::json& j, const char* key, const std::string& what) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + "." + key + ": " + e.what());
  }
}

}  // namespace eegssm
