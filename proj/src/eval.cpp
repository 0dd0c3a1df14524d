#include "mtpb/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <stdexcept>

namespace mtpb {

int horizon_step(int minutes, int interval_minutes) {
  if (interval_minutes <= 0 || minutes <= 0 || minutes % interval_minutes != 0)
    throw std::invalid_argument("horizon of " + std::to_string(minutes) + " min is not a positive multiple of " +
                                std::to_string(interval_minutes) + " min");
  return minutes / interval_minutes;
}

const HorizonMetrics& MetricsReport::at_minutes(int minutes) const {
  for (const auto& h : horizons)
    if (h.minutes == minutes) return h;
  throw std::out_of_range("no metrics for a " + std::to_string(minutes) + " min horizon");
}

MetricsReport compute_metrics(const std::vector<ForecastRecord>& records, const std::vector<int>& horizons_minutes,
                              int interval_minutes) {
  MetricsReport report;
  for (int minutes : horizons_minutes) {
    HorizonMetrics m;
    m.minutes = minutes;
    m.step = horizon_step(minutes, interval_minutes);
    double sq = 0.0, ab = 0.0, pct = 0.0;
    for (const auto& r : records) {
      if (r.prediction.rows() != r.truth.rows() || r.prediction.cols() != r.truth.cols())
        throw std::invalid_argument("compute_metrics: prediction and truth shapes differ");
      if (m.step > r.prediction.cols())
        throw std::invalid_argument("compute_metrics: horizon step " + std::to_string(m.step) +
                                    " exceeds the forecast length");
      const Eigen::Index h = m.step - 1;
      for (Eigen::Index i = 0; i < r.truth.rows(); ++i) {
        const double y = r.truth(i, h), e = r.prediction(i, h) - y;
        sq += e * e;
        ab += std::abs(e);
        ++m.count;
        if (y != 0.0) {
          pct += std::abs(e / y);
          ++m.mape_count;
        }
      }
    }
    if (m.count > 0) {
      m.rmse = std::sqrt(sq / m.count);
      m.mae = ab / m.count;
    }
    if (m.mape_count > 0) m.mape = 100.0 * pct / m.mape_count;
    report.horizons.push_back(m);
  }
  return report;
}

void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << std::setprecision(17) << "model,seed,horizon_min,step,rmse,mae,mape,count,mape_count\n";
  for (const auto& r : reports)
    for (const auto& h : r.horizons) {
      out << r.model << ',' << r.seed << ',' << h.minutes << ',' << h.step << ',' << h.rmse << ',' << h.mae << ',';
      if (h.mape) out << *h.mape;
      out << ',' << h.count << ',' << h.mape_count << '\n';
    }
}

HistoricalAverage::HistoricalAverage(const CityDataset& city, StepRange train) : city_(&city) {
  if (train.begin < 0 || train.end > city.num_steps() || train.size() <= 0)
    throw std::invalid_argument("historical average: empty or out-of-range training period");
  const long slots = 7L * city.steps_per_day();
  const int n = city.num_nodes();
  Mat sum = Mat::Zero(slots, n);
  std::vector<long> count(slots, 0);
  for (long s = train.begin; s < train.end; ++s) {
    const long w = city.week_step(s);
    sum.row(w) += city.speed.row(s);
    ++count[w];
  }
  slot_mean_ = Mat::Constant(slots, n, std::numeric_limits<double>::quiet_NaN());
  for (long w = 0; w < slots; ++w)
    if (count[w] > 0) slot_mean_.row(w) = sum.row(w) / static_cast<double>(count[w]);
  global_mean_ = city.speed.middleRows(train.begin, train.size()).colwise().mean().transpose();
}

double HistoricalAverage::predict(long step, int node) const {
  const double v = slot_mean_(city_->week_step(step), node);
  return std::isnan(v) ? global_mean_(node) : v;
}

Mat HistoricalAverage::forecast(long origin, int horizon) const {
  Mat out(city_->num_nodes(), horizon);
  for (int h = 0; h < horizon; ++h)
    for (int i = 0; i < city_->num_nodes(); ++i) out(i, h) = predict(origin + h, i);
  return out;
}

std::vector<ForecastRecord> ha_baseline(const CityDataset& city, StepRange train, const std::vector<long>& origins,
                                        int horizon) {
  const HistoricalAverage ha(city, train);
  std::vector<ForecastRecord> out;
  for (long t : origins) {
    if (t < 0 || t + horizon > city.num_steps())
      throw std::invalid_argument("ha_baseline: origin " + std::to_string(t) + " leaves the series");
    ForecastRecord r;
    r.origin = t;
    r.prediction = ha.forecast(t, horizon);
    r.truth = city.speed.middleRows(t, horizon).transpose();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mtpb
