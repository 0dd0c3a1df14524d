#include "mtpb/city.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mtpb {

namespace fs = std::filesystem;
using json = nlohmann::json;

double CityDataset::time_of_day(long step) const {
  const long spd = steps_per_day();
  const long s = ((start_offset + step) % spd + spd) % spd;
  return static_cast<double>(s) / static_cast<double>(spd);
}

long CityDataset::week_step(long step) const {
  const long spw = 7L * steps_per_day();
  return ((start_offset + step) % spw + spw) % spw;
}

double CityDataset::at(long step, int node, int channel) const {
  return channel == 0 ? speed(step, node) : time_of_day(step);
}

void CityDataset::validate() const {
  if (interval_minutes <= 0 || 1440 % interval_minutes != 0)
    throw std::invalid_argument(name + ": interval must divide a day");
  if (adjacency.rows() != adjacency.cols())
    throw std::invalid_argument(name + ": adjacency must be square");
  if (speed.cols() != adjacency.rows())
    throw std::invalid_argument(name + ": dimension mismatch between adjacency (" +
                                std::to_string(adjacency.rows()) + ") and speed columns (" +
                                std::to_string(speed.cols()) + ")");
  if ((adjacency.array() < 0.0).any()) throw std::invalid_argument(name + ": negative adjacency");
  for (Eigen::Index i = 0; i < adjacency.rows(); ++i)
    if (adjacency(i, i) != 0.0) throw std::invalid_argument(name + ": nonzero adjacency diagonal");
  if (!speed.allFinite()) throw std::invalid_argument(name + ": non-finite speed");
  if ((speed.array() < 0.0).any()) throw std::invalid_argument(name + ": negative speeds");
}

namespace {

std::vector<std::vector<double>> read_csv(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      const std::size_t end = comma == std::string::npos ? line.size() : comma;
      std::string_view cell(line.data() + pos, end - pos);
      while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
      while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
      if (cell.empty()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
      } else {
        double v = 0.0;
        auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc() || p != cell.data() + cell.size())
          throw std::runtime_error(file.string() + ":" + std::to_string(lineno) +
                                   ": unparseable cell '" + std::string(cell) + "'");
        row.push_back(v);
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Mat to_matrix(const std::vector<std::vector<double>>& rows, const fs::path& file) {
  if (rows.empty()) return Mat(0, 0);
  const std::size_t cols = rows.front().size();
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols)
      throw std::runtime_error(file.string() + ": ragged row " + std::to_string(r + 1));
    for (std::size_t c = 0; c < cols; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

void write_csv(const Mat& m, const fs::path& file) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  char buf[64];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) os << ',';
      const double v = m(r, c);
      if (std::isnan(v)) continue;
      auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      os.write(buf, p - buf);
    }
    os << '\n';
  }
}

}  // namespace

void interpolate_gaps(Mat& speed, int max_gap) {
  for (Eigen::Index c = 0; c < speed.cols(); ++c) {
    Eigen::Index r = 0;
    const Eigen::Index n = speed.rows();
    while (r < n) {
      if (!std::isnan(speed(r, c))) {
        ++r;
        continue;
      }
      Eigen::Index end = r;
      while (end < n && std::isnan(speed(end, c))) ++end;
      const Eigen::Index len = end - r;
      if (len == n) throw std::runtime_error("column " + std::to_string(c) + " has no observations");
      if (len > max_gap)
        throw std::runtime_error("gap of " + std::to_string(len) + " steps at row " +
                                 std::to_string(r + 1) + ", column " + std::to_string(c) +
                                 " exceeds " + std::to_string(max_gap));
      if (r == 0) {
        for (Eigen::Index k = r; k < end; ++k) speed(k, c) = speed(end, c);
      } else if (end == n) {
        for (Eigen::Index k = r; k < end; ++k) speed(k, c) = speed(r - 1, c);
      } else {
        const double a = speed(r - 1, c), b = speed(end, c);
        for (Eigen::Index k = r; k < end; ++k) {
          const double w = static_cast<double>(k - r + 1) / static_cast<double>(len + 1);
          speed(k, c) = a + w * (b - a);
        }
      }
      r = end;
    }
  }
}

CityDataset load_city(const fs::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw std::runtime_error("missing meta.json in " + dir.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    throw std::runtime_error("meta.json: " + std::string(e.what()));
  }
  CityDataset city;
  city.name = meta.value("name", dir.filename().string());
  const auto& iv = meta.at("interval_minutes");
  if (!iv.is_number_integer() || iv.get<long>() <= 0)
    throw std::runtime_error("meta.json: unparseable interval_minutes");
  city.interval_minutes = iv.get<int>();
  city.start_offset = meta.value("start_offset", 0L);
  const int declared = meta.at("num_nodes").get<int>();

  city.adjacency = to_matrix(read_csv(dir / "adjacency.csv"), dir / "adjacency.csv");
  city.speed = to_matrix(read_csv(dir / "speed.csv"), dir / "speed.csv");
  if (city.adjacency.rows() != declared || city.adjacency.cols() != declared ||
      city.speed.cols() != declared)
    throw std::invalid_argument(city.name + ": dimension mismatch (num_nodes " +
                                std::to_string(declared) + ", adjacency " +
                                std::to_string(city.adjacency.rows()) + "x" +
                                std::to_string(city.adjacency.cols()) + ", speed columns " +
                                std::to_string(city.speed.cols()) + ")");
  if (!city.adjacency.allFinite()) throw std::invalid_argument(city.name + ": missing adjacency cells");
  city.adjacency.diagonal().setZero();
  for (Eigen::Index i = 0; i < city.speed.size(); ++i) {
    const double v = city.speed.data()[i];
    if (!std::isnan(v) && v < 0.0) throw std::invalid_argument(city.name + ": negative speeds");
  }
  interpolate_gaps(city.speed);
  city.validate();
  return city;
}

void save_city(const CityDataset& city, const fs::path& dir) {
  fs::create_directories(dir);
  json meta = {{"name", city.name},
               {"interval_minutes", city.interval_minutes},
               {"start_offset", city.start_offset},
               {"num_nodes", city.num_nodes()}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  write_csv(city.adjacency, dir / "adjacency.csv");
  write_csv(city.speed, dir / "speed.csv");
}

CityDataset resample_to_base_interval(const CityDataset& city, int base_minutes,
                                      DownsampleMode mode) {
  if (base_minutes <= 0) throw std::invalid_argument("base interval must be positive");
  const int iv = city.interval_minutes;
  if (iv == base_minutes) return city;
  CityDataset out = city;
  out.interval_minutes = base_minutes;
  const Eigen::Index t = city.speed.rows();
  if (iv % base_minutes == 0) {
    const int k = iv / base_minutes;
    out.speed.resize(t * k, city.speed.cols());
    for (Eigen::Index m = 0; m < t * k; ++m) {
      const Eigen::Index lo = m / k;
      const double frac = static_cast<double>(m % k) / k;
      if (lo + 1 < t)
        out.speed.row(m) = (1.0 - frac) * city.speed.row(lo) + frac * city.speed.row(lo + 1);
      else
        out.speed.row(m) = city.speed.row(t - 1);
    }
    out.start_offset = city.start_offset * k;
  } else if (base_minutes % iv == 0) {
    const int k = base_minutes / iv;
    const Eigen::Index n = t / k;
    out.speed.resize(n, city.speed.cols());
    for (Eigen::Index m = 0; m < n; ++m) {
      if (mode == DownsampleMode::Decimate)
        out.speed.row(m) = city.speed.row(m * k);
      else
        out.speed.row(m) = city.speed.middleRows(m * k, k).colwise().mean();
    }
    out.start_offset = city.start_offset / k;
  } else {
    throw std::invalid_argument("non-commensurate intervals: " + std::to_string(iv) + " and " +
                                std::to_string(base_minutes) + " minutes");
  }
  return out;
}

PatchSet make_patches(const CityDataset& city, long window_start, int window_len, int patch_len) {
  if (patch_len <= 0 || window_len <= 0 || window_len % patch_len != 0)
    throw std::invalid_argument("window length must be a positive multiple of the patch length");
  if (window_start < 0 || window_start + window_len > city.num_steps())
    throw std::out_of_range("window [" + std::to_string(window_start) + ", " +
                            std::to_string(window_start + window_len) + ") out of range for " +
                            std::to_string(city.num_steps()) + " steps");
  const int n = city.num_nodes();
  const int np = window_len / patch_len;
  PatchSet set;
  set.num_nodes = n;
  set.patch_len = patch_len;
  set.window_len = window_len;
  set.patches.resize(static_cast<Eigen::Index>(n) * np, patch_len * kChannels);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < np; ++j)
      for (int p = 0; p < patch_len; ++p) {
        const long step = window_start + static_cast<long>(j) * patch_len + p;
        set.patches(static_cast<Eigen::Index>(i) * np + j, p * kChannels) = city.speed(step, i);
        set.patches(static_cast<Eigen::Index>(i) * np + j, p * kChannels + 1) = city.time_of_day(step);
      }
  const long sph = city.steps_per_hour();
  set.week_slot.resize(np);
  for (int j = 0; j < np; ++j) {
    const long abs = city.start_offset + window_start + static_cast<long>(j) * patch_len;
    set.week_slot[j] = static_cast<int>(((abs / sph) % kHoursPerWeek + kHoursPerWeek) % kHoursPerWeek);
  }
  return set;
}

PatchSet patches_from_series(const Mat& series, int num_nodes, int window_len, int patch_len,
                             std::vector<int> week_slot) {
  if (patch_len <= 0 || window_len % patch_len != 0)
    throw std::invalid_argument("window length must be a positive multiple of the patch length");
  if (series.rows() != static_cast<Eigen::Index>(num_nodes) * window_len || series.cols() != kChannels)
    throw std::invalid_argument("series must be (N*window_len) x C");
  const int np = window_len / patch_len;
  if (static_cast<int>(week_slot.size()) != np)
    throw std::invalid_argument("week_slot length must equal the patch count");
  PatchSet set;
  set.num_nodes = num_nodes;
  set.patch_len = patch_len;
  set.window_len = window_len;
  set.week_slot = std::move(week_slot);
  // Row-major (N*T0) x C has the same layout as (N*np) x (P*C).
  set.patches = Eigen::Map<const Mat>(series.data(), static_cast<Eigen::Index>(num_nodes) * np,
                                      static_cast<Eigen::Index>(patch_len) * kChannels);
  return set;
}

Mat flatten_patches(const PatchSet& set) {
  return Eigen::Map<const Mat>(set.patches.data(),
                               static_cast<Eigen::Index>(set.num_nodes) * set.window_len, kChannels);
}

int MaskPlan::masked_per_node() const {
  if (mask.empty()) return 0;
  return static_cast<int>(std::count(mask.front().begin(), mask.front().end(), true));
}

MaskPlan sample_mask(int num_nodes, int n_patches, double ratio, std::mt19937_64& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("mask ratio must lie in [0,1]");
  MaskPlan plan;
  plan.ratio = ratio;
  const int k = static_cast<int>(std::lround(ratio * n_patches));
  std::vector<int> order(n_patches);
  plan.mask.assign(num_nodes, std::vector<bool>(n_patches, false));
  for (int i = 0; i < num_nodes; ++i) {
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first k entries form a uniform subset.
    for (int a = 0; a < k; ++a) {
      std::uniform_int_distribution<int> pick(a, n_patches - 1);
      std::swap(order[a], order[pick(rng)]);
      plan.mask[i][order[a]] = true;
    }
  }
  return plan;
}

MaskPlan sample_mask(int num_nodes, int n_patches, double ratio, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_mask(num_nodes, n_patches, ratio, rng);
}

FewShotSplit split_few_shot(const CityDataset& target, int few_shot_days, int window_len) {
  if (few_shot_days < 0) throw std::invalid_argument("few_shot_days must be nonnegative");
  const long spd = target.steps_per_day();
  const long need = static_cast<long>(few_shot_days + 1) * spd + window_len;
  if (target.num_steps() < need)
    throw std::invalid_argument("insufficient data: " + std::to_string(target.num_steps()) +
                                " steps, need " + std::to_string(need));
  FewShotSplit s;
  s.warmup = {0, window_len};
  s.few_shot = {window_len, window_len + static_cast<long>(few_shot_days) * spd};
  s.test = {s.few_shot.end, target.num_steps()};
  return s;
}

Scaler fit_scaler(const CityDataset& city, StepRange range) {
  if (range.size() <= 0) range = {0, city.num_steps()};
  const auto block = city.speed.middleRows(range.begin, range.size());
  Scaler s;
  s.mean = block.mean();
  const double var = (block.array() - s.mean).square().mean();
  s.stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
  return s;
}

CityDataset apply_scaler(const CityDataset& city, const Scaler& s) {
  CityDataset out = city;
  out.speed = (city.speed.array() - s.mean) / s.stddev;
  return out;
}

}  // namespace mtpb
