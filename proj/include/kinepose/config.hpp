#pragma once

// Run configuration as plain `key = value` text: one setting per line, blank
// lines and #-comments skipped, each key at most once. Consumers declare the
// full set of keys they accept so a misspelled key fails loudly instead of
// silently falling back to a default.

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace kinepose {

using ConfigValues = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

// `origin` labels error messages (usually the file path).
inline ConfigValues parse_config(const std::string& text, const std::string& origin = "config") {
  ConfigValues out;
  std::size_t pos = 0, lineno = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    ++lineno;
    const std::string line = detail::trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected `key = value`, got \"" + line + "\"");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    if (!out.emplace(key, val).second) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": duplicate key \"" +
                               key + "\"");
    }
  }
  return out;
}

inline ConfigValues load_config_file(const std::filesystem::path& path) {
  return parse_config(detail::read_file_bytes(path), path.string());
}

// Typo protection: every present key must be in the accepted list.
inline void reject_unknown_keys(const ConfigValues& cfg, const std::vector<std::string>& accepted,
                                const std::string& origin = "config") {
  for (const auto& [key, value] : cfg) {
    bool known = false;
    for (const std::string& a : accepted) known = known || a == key;
    if (!known) {
      std::string msg = origin + ": unknown key \"" + key + "\" (accepted:";
      for (const std::string& a : accepted) msg += " " + a;
      throw std::runtime_error(msg + ")");
    }
  }
}

// Typed lookups. A missing key keeps the caller's fallback; a present key
// that fails to parse is an error.

inline std::string config_string(const ConfigValues& cfg, const std::string& key,
                                 const std::string& fallback) {
  auto it = cfg.find(key);
  return it == cfg.end() ? fallback : it->second;
}

inline double config_double(const ConfigValues& cfg, const std::string& key, double fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  const char* s = it->second.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0') {
    throw std::runtime_error("config key \"" + key + "\": not a number: \"" + it->second + "\"");
  }
  return v;
}

inline std::uint64_t config_u64(const ConfigValues& cfg, const std::string& key,
                                std::uint64_t fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  const std::string& v = it->second;
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw std::runtime_error("config key \"" + key + "\": expected a nonnegative integer, got \"" +
                             v + "\"");
  }
  return std::strtoull(v.c_str(), nullptr, 10);
}

inline std::size_t config_size(const ConfigValues& cfg, const std::string& key,
                               std::size_t fallback) {
  return static_cast<std::size_t>(config_u64(cfg, key, fallback));
}

inline bool config_bool(const ConfigValues& cfg, const std::string& key, bool fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw std::runtime_error("config key \"" + key + "\": expected true/false/1/0, got \"" +
                           it->second + "\"");
}

}  // namespace kinepose
