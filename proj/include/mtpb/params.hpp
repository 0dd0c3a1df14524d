#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mtpb/tape.hpp"

namespace mtpb {

struct Parameter {
  Mat value;
  Mat grad;
  Mat m;  // Adam first moment
  Mat v;  // Adam second moment
};

/// Values of a set of parameters keyed by path.
using Snapshot = std::map<std::string, Mat>;

/// Named, hierarchically addressed learnable parameters ("a/b/c" paths) with
/// paired gradient and Adam moment buffers. Iteration order is the
/// lexicographic path order, which makes every traversal deterministic.
class ParameterStore {
 public:
  Parameter& add(const std::string& path, Mat init);
  bool contains(const std::string& path) const;
  Parameter& at(const std::string& path);
  const Parameter& at(const std::string& path) const;
  Mat& value(const std::string& path) { return at(path).value; }
  const Mat& value(const std::string& path) const { return at(path).value; }

  /// Paths under `prefix` (every path when empty).
  std::vector<std::string> paths(std::string_view prefix = {}) const;
  std::size_t scalar_count(std::string_view prefix = {}) const;

  void zero_grad();
  Snapshot snapshot(std::string_view prefix = {}) const;
  /// Restores every path present in `snap`; unknown paths throw.
  void restore(const Snapshot& snap);
  /// Removes every parameter under `prefix`.
  void erase(std::string_view prefix);
  /// Copies every parameter under `prefix` from `other` (values only).
  void merge_from(const ParameterStore& other, std::string_view prefix = {});

  /// FNV-1a over paths, shapes, and raw value bytes under `prefix`.
  std::uint64_t hash(std::string_view prefix = {}) const;

  long step() const { return step_; }
  void set_step(long s) { step_ = s; }

  /// Binary checkpoint; see README for the layout.
  void save(const std::filesystem::path& file, std::string_view prefix = {}) const;
  /// Loads every entry of a checkpoint, replacing existing values of the
  /// same path and adding missing ones.
  void load(const std::filesystem::path& file);

  const std::map<std::string, Parameter>& entries() const { return params_; }

 private:
  std::map<std::string, Parameter> params_;
  long step_ = 0;
};

/// Glorot-uniform initialised matrix.
Mat glorot(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);
Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

/// FNV-1a 64-bit over a byte range, chained through `seed`.
std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace mtpb
