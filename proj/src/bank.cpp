#include "mtpb/bank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mtpb {

namespace fs = std::filesystem;

Mat segment(const Mat& day, int c) {
  const Eigen::Index n = day.rows(), d = day.cols();
  if (c <= 0 || c > n)
    throw std::invalid_argument("segment: scale " + std::to_string(c) + " outside [1, " +
                                std::to_string(n) + "]");
  Mat out(n - c + 1, c * d);
  for (Eigen::Index t = 0; t + c <= n; ++t)
    out.row(t) = Eigen::Map<const Eigen::RowVectorXd>(day.data() + t * d, c * d);
  return out;
}

namespace {

Mat normalized_rows(const Mat& m) {
  Mat out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

KMeansResult kmeans_once(const Mat& points, int k, std::uint64_t seed, const KMeansOptions& opts) {
  if (k <= 0) throw std::invalid_argument("kmeans_cosine: k must be positive");
  KMeansResult res;
  res.assignments.assign(static_cast<std::size_t>(points.rows()), -1);

  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < points.rows(); ++r)
    if (points.row(r).squaredNorm() > 0.0) keep.push_back(r);
  res.dropped = static_cast<int>(points.rows() - static_cast<Eigen::Index>(keep.size()));
  if (res.dropped > 0)
    std::cerr << "kmeans_cosine: dropped " << res.dropped << " zero vector(s)\n";
  const Eigen::Index m = static_cast<Eigen::Index>(keep.size());
  if (m < k)
    throw std::invalid_argument("kmeans_cosine: " + std::to_string(m) + " points for k = " +
                                std::to_string(k));

  Mat x(m, points.cols());
  for (Eigen::Index i = 0; i < m; ++i) x.row(i) = points.row(keep[i]) / points.row(keep[i]).norm();

  // k-means++ seeding with squared cosine distance.
  std::mt19937_64 rng(seed);
  Mat centroids(k, x.cols());
  std::vector<char> chosen(static_cast<std::size_t>(m), 0);
  Eigen::VectorXd dist = Eigen::VectorXd::Constant(m, std::numeric_limits<double>::infinity());
  Eigen::Index first = std::uniform_int_distribution<Eigen::Index>(0, m - 1)(rng);
  for (int c = 0; c < k; ++c) {
    Eigen::Index pick = first;
    if (c > 0) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < m; ++i)
        if (!chosen[i]) total += dist(i) * dist(i);
      if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        pick = -1;
        for (Eigen::Index i = 0; i < m; ++i) {
          if (chosen[i]) continue;
          pick = i;
          u -= dist(i) * dist(i);
          if (u < 0.0) break;
        }
      } else {
        std::vector<Eigen::Index> rest;
        for (Eigen::Index i = 0; i < m; ++i)
          if (!chosen[i]) rest.push_back(i);
        pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
      }
    }
    chosen[pick] = 1;
    centroids.row(c) = x.row(pick);
    const Eigen::VectorXd d = (1.0 - (x * x.row(pick).transpose()).array()).cwiseMax(0.0);
    dist = dist.cwiseMin(d);
  }

  std::vector<int> assign(static_cast<std::size_t>(m), -1);
  Eigen::VectorXd best(m);
  std::vector<int> sizes(k, 0);
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    const Mat sims = x * normalized_rows(centroids).transpose();
    bool changed = false;
    double inertia = 0.0;
    std::fill(sizes.begin(), sizes.end(), 0);
    for (Eigen::Index i = 0; i < m; ++i) {
      Eigen::Index arg;
      best(i) = sims.row(i).maxCoeff(&arg);
      if (assign[i] != static_cast<int>(arg)) changed = true;
      assign[i] = static_cast<int>(arg);
      ++sizes[arg];
      inertia += 1.0 - best(i);
    }
    res.inertia.push_back(inertia);
    res.iterations = iter + 1;
    const bool any_empty = std::find(sizes.begin(), sizes.end(), 0) != sizes.end();
    if (!any_empty && iter > 0) {
      const double prev = res.inertia[res.inertia.size() - 2];
      if (!changed || prev - inertia <= opts.tol * std::max(prev, std::numeric_limits<double>::min()))
        break;
    }
    if (iter + 1 == opts.max_iter) break;

    // Reseed empty clusters with the worst-served points of clusters that
    // can spare one.
    for (int c = 0; c < k; ++c) {
      if (sizes[c] > 0) continue;
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < m; ++i)
        if (sizes[assign[i]] > 1 && (far < 0 || best(i) < best(far))) far = i;
      --sizes[assign[far]];
      assign[far] = c;
      sizes[c] = 1;
      best(far) = 1.0;
    }
    centroids.setZero();
    for (Eigen::Index i = 0; i < m; ++i) centroids.row(assign[i]) += x.row(i);
    for (int c = 0; c < k; ++c) centroids.row(c) /= sizes[c];
  }

  res.centroids = centroids;
  res.sizes = sizes;
  for (Eigen::Index i = 0; i < m; ++i) res.assignments[keep[i]] = assign[i];
  return res;
}

}  // namespace

KMeansResult kmeans_cosine(const Mat& points, int k, std::uint64_t seed, const KMeansOptions& opts) {
  KMeansResult best = kmeans_once(points, k, seed, opts);
  for (int r = 1; r < opts.restarts; ++r) {
    KMeansResult run = kmeans_once(points, k, seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(r), opts);
    if (run.inertia.back() < best.inertia.back()) best = std::move(run);
  }
  return best;
}

double silhouette(const Mat& points, const std::vector<int>& labels, std::uint64_t seed,
                  std::size_t max_points) {
  if (labels.size() != static_cast<std::size_t>(points.rows()))
    throw std::invalid_argument("silhouette: one label per point is required");
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) idx.push_back(static_cast<Eigen::Index>(i));
  if (idx.size() > max_points) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_points);
    std::sort(idx.begin(), idx.end());
  }
  std::map<int, int> remap;
  for (auto i : idx) remap.emplace(labels[i], 0);
  if (remap.size() < 2) throw std::invalid_argument("silhouette: needs at least two clusters");
  int next = 0;
  for (auto& [label, slot] : remap) slot = next++;

  const Eigen::Index m = static_cast<Eigen::Index>(idx.size());
  const int kc = next;
  Mat x(m, points.cols());
  std::vector<int> lab(static_cast<std::size_t>(m));
  Mat onehot = Mat::Zero(m, kc);
  std::vector<double> count(kc, 0.0);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double n = points.row(idx[i]).norm();
    x.row(i) = n > 0.0 ? Eigen::RowVectorXd(points.row(idx[i]) / n) : Eigen::RowVectorXd(points.row(idx[i]));
    lab[i] = remap[labels[idx[i]]];
    onehot(i, lab[i]) = 1.0;
    count[lab[i]] += 1.0;
  }

  double total = 0.0;
  constexpr Eigen::Index kBlock = 512;
  for (Eigen::Index b = 0; b < m; b += kBlock) {
    const Eigen::Index len = std::min(kBlock, m - b);
    // Per-cluster sums of cosine distance = member count - sum of similarities.
    const Mat simsum = (x.middleRows(b, len) * x.transpose()) * onehot;
    for (Eigen::Index r = 0; r < len; ++r) {
      const int own = lab[b + r];
      if (count[own] <= 1.0) continue;
      // The point's own similarity (1) is excluded from its cluster's sum.
      const double a = (count[own] - 1.0 - (simsum(r, own) - x.row(b + r).squaredNorm())) / (count[own] - 1.0);
      double bmin = std::numeric_limits<double>::infinity();
      for (int c = 0; c < kc; ++c)
        if (c != own) bmin = std::min(bmin, (count[c] - simsum(r, c)) / count[c]);
      const double denom = std::max(a, bmin);
      if (denom > 0.0) total += (bmin - a) / denom;
    }
  }
  return total / static_cast<double>(m);
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("adjusted_rand_index: length mismatch");
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cells[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  auto pairs = [](double n) { return n * (n - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [key, n] : cells) index += pairs(n);
  for (const auto& [key, n] : ra) sa += pairs(n);
  for (const auto& [key, n] : rb) sb += pairs(n);
  const double expected = sa * sb / pairs(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

CorpusEmbedding embed_corpus(const std::vector<CityDataset>& cities, const PatchAutoencoder& model,
                             ParameterStore& store) {
  const auto& cfg = model.config();
  const std::string w_enc = std::string(PatchAutoencoder::kEncoder) + "/w_enc";
  if (!store.contains(w_enc) || store.value(w_enc).cols() != cfg.patch_width() ||
      store.value(w_enc).rows() != cfg.layers.d)
    throw std::invalid_argument("embed_corpus: checkpoint does not match the model dimensions");
  CorpusEmbedding out;
  out.n_patches = cfg.num_patches();
  out.d = cfg.layers.d;
  std::vector<Mat> blocks;
  Eigen::Index total = 0;
  for (std::size_t c = 0; c < cities.size(); ++c) {
    const CityDataset& city = cities[c];
    const CityDataset norm = apply_scaler(city, source_scaler(city));
    for (long start : day_windows(city, 0, city.num_steps(), cfg.window_len)) {
      PatchSet ps = make_patches(norm, start, cfg.window_len, cfg.patch_len);
      Mat e;
      try {
        e = model.embed(store, ps, city.adjacency);
      } catch (const std::out_of_range& err) {
        throw std::invalid_argument(std::string("embed_corpus: incomplete checkpoint: ") + err.what());
      }
      for (int i = 0; i < city.num_nodes(); ++i) out.index.push_back({static_cast<int>(c), i, start});
      total += e.rows();
      blocks.push_back(std::move(e));
    }
  }
  out.rows.resize(total, out.d);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.rows.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

Mat corpus_segments(const CorpusEmbedding& emb, int c) {
  if (c <= 0 || c > emb.n_patches)
    throw std::invalid_argument("segment: scale " + std::to_string(c) + " outside [1, " +
                                std::to_string(emb.n_patches) + "]");
  const Eigen::Index per_day = emb.n_patches - c + 1;
  const Eigen::Index days = static_cast<Eigen::Index>(emb.num_node_days());
  Mat out(days * per_day, static_cast<Eigen::Index>(c) * emb.d);
  for (Eigen::Index b = 0; b < days; ++b)
    out.middleRows(b * per_day, per_day) = segment(emb.rows.middleRows(b * emb.n_patches, emb.n_patches), c);
  return out;
}

std::pair<PatternBank, ClusterReport> build_bank(const CorpusEmbedding& emb, const BankConfig& cfg,
                                                 std::uint64_t checkpoint_id) {
  if (cfg.scales.empty()) throw std::invalid_argument("build_bank: no scales");
  PatternBank bank;
  bank.scales = cfg.scales;
  bank.k = cfg.k;
  bank.d = emb.d;
  bank.checkpoint_id = checkpoint_id;
  bank.seed = cfg.seed;
  ClusterReport report;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    const int c = cfg.scales[s];
    const Mat pts = corpus_segments(emb, c);
    KMeansResult km = kmeans_cosine(pts, cfg.k, cfg.seed + s, cfg.kmeans);
    ScaleReport sr;
    sr.scale = c;
    sr.num_points = static_cast<std::size_t>(pts.rows());
    sr.iterations = km.iterations;
    sr.inertia = km.inertia;
    sr.sizes = km.sizes;
    const int nonempty = static_cast<int>(std::count_if(km.sizes.begin(), km.sizes.end(), [](int n) { return n > 0; }));
    sr.silhouette = nonempty >= 2 ? silhouette(pts, km.assignments, cfg.seed + s, cfg.silhouette_max_points)
                                  : std::numeric_limits<double>::quiet_NaN();
    bank.centroids.push_back(std::move(km.centroids));
    report.scales.push_back(std::move(sr));
  }
  return {std::move(bank), std::move(report)};
}

namespace {

constexpr char kBankMagic[8] = {'M', 'T', 'P', 'B', 'B', 'A', 'N', 'K'};
constexpr std::uint32_t kBankVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("bank file truncated");
  return v;
}

}  // namespace

void PatternBank::save(const fs::path& file) const {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os.write(kBankMagic, sizeof(kBankMagic));
  put<std::uint32_t>(os, kBankVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(scales.size()));
  for (int c : scales) put<std::uint32_t>(os, static_cast<std::uint32_t>(c));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(k));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put<std::uint64_t>(os, checkpoint_id);
  put<std::uint64_t>(os, seed);
  for (const auto& m : centroids)
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

PatternBank PatternBank::load(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kBankMagic, sizeof(magic)) != 0)
    throw std::runtime_error(file.string() + ": not a pattern bank file");
  if (get<std::uint32_t>(is) != kBankVersion) throw std::runtime_error(file.string() + ": unsupported version");
  PatternBank bank;
  const auto s = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < s; ++i) bank.scales.push_back(static_cast<int>(get<std::uint32_t>(is)));
  bank.k = static_cast<int>(get<std::uint32_t>(is));
  bank.d = static_cast<int>(get<std::uint32_t>(is));
  bank.checkpoint_id = get<std::uint64_t>(is);
  bank.seed = get<std::uint64_t>(is);
  for (int c : bank.scales) {
    Mat m(bank.k, static_cast<Eigen::Index>(c) * bank.d);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!is) throw std::runtime_error(file.string() + ": truncated centroid payload");
    bank.centroids.push_back(std::move(m));
  }
  return bank;
}

void write_cluster_report(const ClusterReport& report, const fs::path& summary, const fs::path& trace) {
  std::ofstream s(summary), t(trace);
  if (!s || !t) throw std::runtime_error("cannot write cluster report");
  s.precision(17);
  t.precision(17);
  s << "scale,num_points,iterations,final_inertia,silhouette,sizes\n";
  t << "scale,iteration,inertia\n";
  for (const auto& r : report.scales) {
    s << r.scale << ',' << r.num_points << ',' << r.iterations << ','
      << (r.inertia.empty() ? 0.0 : r.inertia.back()) << ',' << r.silhouette << ',';
    for (std::size_t i = 0; i < r.sizes.size(); ++i) s << (i ? ";" : "") << r.sizes[i];
    s << '\n';
    for (std::size_t i = 0; i < r.inertia.size(); ++i) t << r.scale << ',' << i << ',' << r.inertia[i] << '\n';
  }
}

}  // namespace mtpb
