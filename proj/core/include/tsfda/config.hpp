#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tsfda {

/// Flat key=value run configuration. Lines are `key = value`, `#` starts a
/// comment, keys are dotted lowercase. Later assignments win, so flag
/// overrides are just merges on top of a file.
class Config {
 public:
  static Config load_file(const std::string& path);
  static Config parse(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void merge(const Config& overrides);

  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::string require_str(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key) const;  // comma separated

  /// Canonical text form (sorted keys); written as the resolved-config
  /// snapshot so every run can be replayed exactly.
  std::string dump() const;
  void save_file(const std::string& path) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace tsfda
