#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "defdet/tensor.hpp"

namespace defdet {

/// Flat `key = value` config file; '#' starts a comment, blank lines are
/// skipped. Unknown keys are reported once parsing is done so typos fail
/// loudly.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_string(buf.str(), path);
  }

  static KvConfig from_string(const std::string& text, const std::string& origin = "<string>") {
    KvConfig kv;
    kv.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + line + "'");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      }
      kv.values_[key] = value;
    }
    return kv;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& def) {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  std::string require_string(const std::string& key) {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) {
      throw ConfigError(origin_ + ": missing required key '" + key + "'");
    }
    return it->second;
  }

  double get_double(const std::string& key, double def) {
    return has(key) ? parse_double(key, require_string(key)) : (consumed_.insert(key), def);
  }

  int get_int(const std::string& key, int def) {
    return has(key) ? parse_int(key, require_string(key)) : (consumed_.insert(key), def);
  }

  bool get_bool(const std::string& key, bool def) {
    if (!has(key)) {
      consumed_.insert(key);
      return def;
    }
    const std::string v = require_string(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(origin_ + ": key '" + key + "': expected boolean, got '" + v + "'");
  }

  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& def) {
    if (!has(key)) {
      consumed_.insert(key);
      return def;
    }
    std::vector<int> out;
    for (const std::string& tok : split_commas(require_string(key))) {
      out.push_back(parse_int(key, tok));
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& def) {
    if (!has(key)) {
      consumed_.insert(key);
      return def;
    }
    std::vector<double> out;
    for (const std::string& tok : split_commas(require_string(key))) {
      out.push_back(parse_double(key, tok));
    }
    return out;
  }

  /// Call after reading every expected key.
  void reject_unknown_keys() const {
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) {
        throw ConfigError(origin_ + ": unknown key '" + k + "'");
      }
    }
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
  }

  static std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (!tok.empty()) out.push_back(tok);
    }
    return out;
  }

  double parse_double(const std::string& key, const std::string& v) const {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': expected number, got '" + v + "'");
    }
  }

  int parse_int(const std::string& key, const std::string& v) const {
    try {
      std::size_t pos = 0;
      const int i = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return i;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': expected integer, got '" + v + "'");
    }
  }

  std::string origin_;
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

}  // namespace defdet
