#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <string_view>

#include "medrag/codec.hpp"
#include "medrag/error.hpp"

namespace medrag::harness {

/// Flat `key = value` settings. '#' starts a comment line; blank lines are skipped.
class ConfigMap {
 public:
  static ConfigMap parse(std::istream& in, std::string_view origin = "config") {
    ConfigMap cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string_view s = trim(line);
      if (s.empty() || s.front() == '#') continue;
      const auto eq = s.find('=');
      const std::string where = std::string(origin) + ":" + std::to_string(lineno);
      if (eq == std::string_view::npos) throw FormatError(where + ": expected 'key = value'");
      const auto key = trim(s.substr(0, eq));
      const auto value = trim(s.substr(eq + 1));
      if (key.empty()) throw FormatError(where + ": empty key");
      if (!cfg.values_.emplace(std::string(key), std::string(value)).second) {
        throw FormatError(where + ": duplicate key '" + std::string(key) + "'");
      }
    }
    return cfg;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config '" + path + "'");
    return parse(in, path);
  }

  void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }
  bool has(std::string_view key) const { return values_.find(std::string(key)) != values_.end(); }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Throws on any key outside `known`; catches typos that would silently fall back to defaults.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) throw FormatError("unknown config key '" + k + "'");
    }
  }

  double get(std::string_view key, double fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    double out;
    if (!codec::parse_double(*v, out)) bad(key, *v, "a number");
    return out;
  }

  std::size_t get(std::string_view key, std::size_t fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    std::size_t out;
    if (!codec::parse_int(*v, out)) bad(key, *v, "a non-negative integer");
    return out;
  }

  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    std::uint64_t out;
    if (!codec::parse_int(*v, out)) bad(key, *v, "an unsigned integer");
    return out;
  }

  std::string get(std::string_view key, const std::string& fallback) const {
    const auto* v = find(key);
    return v ? *v : fallback;
  }

  void write(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

 private:
  static std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  const std::string* find(std::string_view key) const {
    auto it = values_.find(std::string(key));
    return it == values_.end() ? nullptr : &it->second;
  }

  [[noreturn]] static void bad(std::string_view key, const std::string& v, const char* want) {
    throw FormatError("config key '" + std::string(key) + "': '" + v + "' is not " + want);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace medrag::harness
