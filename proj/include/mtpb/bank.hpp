#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mtpb/city.hpp"
#include "mtpb/params.hpp"
#include "mtpb/pretrain.hpp"

namespace mtpb {

/// Sliding stride-1 segments of one node-day: row t is the concatenation of
/// embedding rows t..t+c-1, so the result is (n - c + 1) x (c * d).
Mat segment(const Mat& day, int c);

struct KMeansOptions {
  int max_iter = 100;
  double tol = 1e-6;  // relative inertia change
  /// Independent seedings; the run with the lowest final inertia is kept.
  int restarts = 1;
};

struct KMeansResult {
  /// K x D, mean of the unit-normalised members (norm <= 1).
  Mat centroids;
  /// Cluster of each input row; -1 for dropped zero rows.
  std::vector<int> assignments;
  /// Sum over points of (1 - cos) after every assignment step.
  std::vector<double> inertia;
  int iterations = 0;
  std::vector<int> sizes;
  int dropped = 0;
};

/// Spherical k-means with k-means++ seeding under cosine distance. Empty
/// clusters are reseeded with the point farthest from its centroid. Zero rows
/// are dropped with a warning on stderr. Throws std::invalid_argument when
/// fewer than k usable points remain.
KMeansResult kmeans_cosine(const Mat& points, int k, std::uint64_t seed,
                           const KMeansOptions& opts = {});

/// Mean silhouette under cosine distance; points in singleton clusters
/// score 0. Larger inputs are subsampled (seeded) to `max_points`. Labels
/// < 0 are ignored. Throws std::invalid_argument with fewer than two
/// non-empty clusters.
double silhouette(const Mat& points, const std::vector<int>& labels, std::uint64_t seed = 0,
                  std::size_t max_points = 5000);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Zero-mask embeddings of every day window of every city, stacked
/// node-day-major: block b holds n_patches rows for (city, node, day) b.
struct CorpusEmbedding {
  struct NodeDay {
    int city;
    int node;
    long window_start;
  };
  Mat rows;
  int n_patches = 0;
  int d = 0;
  std::vector<NodeDay> index;

  std::size_t num_node_days() const { return index.size(); }
  Mat day(std::size_t b) const { return rows.middleRows(static_cast<Eigen::Index>(b) * n_patches, n_patches); }
};

/// Throws std::invalid_argument when the checkpoint does not match the
/// model configuration.
CorpusEmbedding embed_corpus(const std::vector<CityDataset>& cities, const PatchAutoencoder& model,
                             ParameterStore& store);

struct BankConfig {
  std::vector<int> scales{1, 3, 6, 12, 24};
  int k = 10;
  std::uint64_t seed = 0;
  KMeansOptions kmeans;
  std::size_t silhouette_max_points = 5000;
};

/// Frozen multi-scale centroids; scale s has K x (scales[s] * d) rows.
struct PatternBank {
  std::vector<int> scales;
  int k = 0;
  int d = 0;
  std::vector<Mat> centroids;
  std::uint64_t checkpoint_id = 0;
  std::uint64_t seed = 0;

  int num_scales() const { return static_cast<int>(scales.size()); }
  void save(const std::filesystem::path& file) const;
  static PatternBank load(const std::filesystem::path& file);
};

struct ScaleReport {
  int scale = 0;
  std::size_t num_points = 0;
  int iterations = 0;
  std::vector<double> inertia;
  std::vector<int> sizes;
  double silhouette = 0.0;
};

struct ClusterReport {
  std::vector<ScaleReport> scales;
};

/// All scale-c segments of the corpus, one row each.
Mat corpus_segments(const CorpusEmbedding& emb, int c);

std::pair<PatternBank, ClusterReport> build_bank(const CorpusEmbedding& emb, const BankConfig& cfg,
                                                 std::uint64_t checkpoint_id = 0);

/// Writes scale,num_points,iterations,final_inertia,silhouette,sizes and a
/// long-form scale,iteration,inertia trace.
void write_cluster_report(const ClusterReport& report, const std::filesystem::path& summary,
                          const std::filesystem::path& trace);

}  // namespace mtpb
