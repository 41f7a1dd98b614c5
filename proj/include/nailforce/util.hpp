#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace nailforce {

using Rng = std::mt19937_64;

// Independent stream for (seed, index); splitmix64 mixing.
Rng derive_rng(std::uint64_t seed, std::uint64_t index);

// Runs body(i) for i in [0,n) on up to `jobs` threads. Work is handed out in
// index order; exceptions from workers are rethrown on the caller (first by
// index).
void parallel_for(std::size_t n, int jobs,
                  const std::function<void(std::size_t)>& body);

// key = value text config; '#' starts a comment.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  int get(const std::string& key, int fallback) const;
  std::vector<int> get_ints(const std::string& key,
                            const std::vector<int>& fallback) const;
  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }
  const std::map<std::string, std::string>& values() const { return values_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace nailforce
