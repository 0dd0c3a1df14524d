#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mtpb/tape.hpp"

namespace mtpb {

/// Speed plus time-of-day fraction.
inline constexpr int kChannels = 2;
inline constexpr int kHoursPerWeek = 168;

/// One city's sensor graph and speed series.
///
/// Channel 0 (speed) is stored explicitly as a T_total x N matrix; channel 1
/// (time-of-day fraction in [0,1)) is a pure function of the step index and
/// is derived on demand.
struct CityDataset {
  std::string name;
  Mat adjacency;            // N x N, nonnegative, zero diagonal
  Mat speed;                // T_total x N
  int interval_minutes = 5;
  long start_offset = 0;    // step index of the first sample within the week

  int num_nodes() const { return static_cast<int>(adjacency.rows()); }
  long num_steps() const { return static_cast<long>(speed.rows()); }
  int steps_per_day() const { return 1440 / interval_minutes; }
  int steps_per_hour() const { return 60 / interval_minutes; }
  double time_of_day(long step) const;
  /// Time-of-week slot of a step at step resolution.
  long week_step(long step) const;
  /// Channel value at (step, node, channel).
  double at(long step, int node, int channel) const;

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
};

/// Reads meta.json, adjacency.csv and speed.csv from a city directory.
/// Gaps of up to three consecutive blank cells are linearly interpolated
/// (edge gaps take the nearest observed value); longer gaps are an error.
CityDataset load_city(const std::filesystem::path& dir);
void save_city(const CityDataset& city, const std::filesystem::path& dir);

/// Bridges gaps of NaN cells per column. Throws on gaps longer than
/// `max_gap` or on an all-missing column.
void interpolate_gaps(Mat& speed, int max_gap = 3);

enum class DownsampleMode {
  BlockMean,  // mean of each block of k fine steps
  Decimate,   // keep every k-th fine step
};

/// Resamples to `base_minutes`: linear interpolation when upsampling (the
/// tail past the last sample holds the last value), strided reduction when
/// downsampling. Throws on non-commensurate intervals.
CityDataset resample_to_base_interval(const CityDataset& city, int base_minutes,
                                      DownsampleMode mode = DownsampleMode::BlockMean);

/// Raw patches of one window. Row i*n_patches + j of `patches` is the
/// flattened P x C patch S_ij, column p*C + c.
struct PatchSet {
  Mat patches;
  int num_nodes = 0;
  int patch_len = 0;
  int window_len = 0;
  std::vector<int> week_slot;

  int num_patches() const { return window_len / patch_len; }
  int width() const { return patch_len * kChannels; }
};

PatchSet make_patches(const CityDataset& city, long window_start, int window_len, int patch_len);

/// Patches built from an explicit node-major channel tensor; used by toys
/// and by the forecasting path where the history is already extracted.
/// `series` is (N*window_len) x C with row i*window_len + t.
PatchSet patches_from_series(const Mat& series, int num_nodes, int window_len, int patch_len,
                             std::vector<int> week_slot);

/// Inverse of the patch layout: (N*window_len) x C node-major series.
Mat flatten_patches(const PatchSet& set);

struct MaskPlan {
  /// N x n_patches; true = masked.
  std::vector<std::vector<bool>> mask;
  double ratio = 0.0;

  int num_nodes() const { return static_cast<int>(mask.size()); }
  int num_patches() const { return mask.empty() ? 0 : static_cast<int>(mask.front().size()); }
  int masked_per_node() const;
  bool masked(int node, int patch) const { return mask[node][patch]; }
};

/// Independent uniform subset per node of size round(ratio * n_patches).
MaskPlan sample_mask(int num_nodes, int n_patches, double ratio, std::mt19937_64& rng);
MaskPlan sample_mask(int num_nodes, int n_patches, double ratio, std::uint64_t seed);

/// Half-open step interval.
struct StepRange {
  long begin = 0;
  long end = 0;
  long size() const { return end - begin; }
  bool contains(long s) const { return s >= begin && s < end; }
};

/// Target-city partition: [0, warmup) is history only, the few-shot window
/// follows, the test window is the remainder.
struct FewShotSplit {
  StepRange warmup;
  StepRange few_shot;
  StepRange test;
};

FewShotSplit split_few_shot(const CityDataset& target, int few_shot_days, int window_len);

struct SplitSpec {
  std::vector<CityDataset> source_cities;
  CityDataset target_city;
  int few_shot_days = 3;
  FewShotSplit split;
};

/// Per-city affine normalisation of the speed channel.
struct Scaler {
  double mean = 0.0;
  double stddev = 1.0;
  double forward(double x) const { return (x - mean) / stddev; }
  double inverse(double z) const { return z * stddev + mean; }
};

/// Mean/std of speed over the steps in `range` (all steps when empty).
Scaler fit_scaler(const CityDataset& city, StepRange range = {});
CityDataset apply_scaler(const CityDataset& city, const Scaler& s);

struct SyntheticSpec {
  int num_cities = 4;
  int nodes_per_city = 20;
  int days = 14;
  int num_profiles = 3;
  /// Scale of the stochastic component. A temporally correlated part of this
  /// size is injected before spatial smoothing, so neighbouring sensors share
  /// it; a smaller white part is added afterwards.
  double noise_std = 2.0;
  /// Neighbour-averaging weight applied over kSmoothingRounds rounds.
  double spatial_mix = 0.6;
  std::uint64_t seed = 7;
  int interval_minutes = 5;

  static constexpr int kSmoothingRounds = 1;
  void validate() const;
};

/// Cities whose sensors follow a mixture of shared daily profiles. The
/// planted profile label of each node (its dominant mixture component) is
/// returned through `labels` when given.
std::vector<CityDataset> generate_synthetic_corpus(
    const SyntheticSpec& spec, std::vector<std::vector<int>>* labels = nullptr);

/// Shape of profile `p` in [0,1] (1 = free flow) at an hour of the week.
double profile_shape(int profile, double hour_of_week, std::uint64_t seed);

}  // namespace mtpb
