#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mtpb/city.hpp"
#include "mtpb/forecast.hpp"

namespace mtpb {

/// 1-based output step of a horizon given in minutes. Throws
/// std::invalid_argument unless the horizon is a positive multiple of the
/// interval.
int horizon_step(int minutes, int interval_minutes);

struct HorizonMetrics {
  int minutes = 0;
  int step = 0;
  double rmse = 0.0;
  double mae = 0.0;
  /// Percent over samples with nonzero truth; absent when there are none.
  std::optional<double> mape;
  std::size_t count = 0;
  std::size_t mape_count = 0;
};

struct MetricsReport {
  std::string model;
  std::uint64_t seed = 0;
  std::vector<HorizonMetrics> horizons;

  const HorizonMetrics& at_minutes(int minutes) const;
};

/// Errors of every node and origin at the output step of each horizon.
/// Throws std::invalid_argument on mismatched shapes or a horizon past the
/// forecast length.
MetricsReport compute_metrics(const std::vector<ForecastRecord>& records, const std::vector<int>& horizons_minutes,
                              int interval_minutes);

/// One model,seed,horizon_min,step,rmse,mae,mape,count,mape_count row per
/// report and horizon; an absent MAPE is written empty.
void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::filesystem::path& file);

/// Per-node mean over the training steps sharing each time-of-week step
/// slot. Slots with no training observation fall back to the node's overall
/// training mean.
class HistoricalAverage {
 public:
  HistoricalAverage(const CityDataset& city, StepRange train);

  double predict(long step, int node) const;
  /// N x horizon predictions for the steps [origin, origin + horizon).
  Mat forecast(long origin, int horizon) const;

 private:
  const CityDataset* city_;
  Mat slot_mean_;   // slots x N, NaN where empty
  Vec global_mean_;
};

/// HA forecasts with the city's truth (original units) for each origin.
std::vector<ForecastRecord> ha_baseline(const CityDataset& city, StepRange train, const std::vector<long>& origins,
                                        int horizon);

}  // namespace mtpb
