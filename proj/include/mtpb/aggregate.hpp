#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mtpb/bank.hpp"
#include "mtpb/layers.hpp"
#include "mtpb/params.hpp"
#include "mtpb/tape.hpp"

namespace mtpb {

struct QueryConfig {
  nn::LayerSpec layers;
  /// Width of one query row: P*C for raw patches, d for embeddings.
  int input_width = 24;
  std::vector<int> scales{1, 3, 6, 12, 24};
  int k = 10;
  /// Literal dot-product weights instead of softmax over the K patterns.
  bool raw_scores = false;
  /// Query with pretrained patch embeddings rather than raw patches.
  bool query_with_embeddings = false;

  int num_scales() const { return static_cast<int>(scales.size()); }
  void validate() const;
};

/// Meta-knowledge of one window: Z plus the per-scale intermediates.
struct MetaKnowledge {
  Var z;                               // N x d
  std::vector<Var> retrievals;         // per scale, (N*n) x d
  std::vector<Var> scale_vectors;      // per scale, N x d
};

/// Multi-scale pattern query over a frozen bank.
///
/// Parameters under "transfer/query/<s>/...": key (K x d_q), wq (d_q x in),
/// bq, proj (d x c*d, no bias), ts/... (aggregator block); plus fuse/w, fuse/b
/// mapping the concatenated scale vectors to d.
class PatternQuery {
 public:
  static constexpr const char* kPrefix = "transfer/query";

  explicit PatternQuery(QueryConfig cfg);
  const QueryConfig& config() const { return cfg_; }
  void init(ParameterStore& store, std::mt19937_64& rng) const;

  /// Throws std::invalid_argument when the bank's scales, K or d disagree
  /// with the configuration.
  void check_bank(const PatternBank& bank) const;

  /// Pattern weights of every query row at scale index `s`, rows x K.
  Var scores(nn::Tape& tape, ParameterStore& store, int s, Var queries) const;
  /// Bank centroids of scale index `s` projected to the model width, K x d.
  Var projected_centroids(nn::Tape& tape, ParameterStore& store, int s, const PatternBank& bank) const;
  /// Aggregator over one scale: transformer across each node's retrieval
  /// sequence, then the mean over the sequence. Returns N x d.
  Var aggregate_scale(nn::Tape& tape, ParameterStore& store, int s, Var retrievals, int nodes) const;

  /// Full query for N nodes whose (N*n) query rows are node-major.
  MetaKnowledge meta_knowledge(nn::Tape& tape, ParameterStore& store, const PatternBank& bank,
                               Var queries, int nodes) const;

  std::string scale_prefix(int s) const;

 private:
  QueryConfig cfg_;
};

/// Weighted sum of pattern rows: omega (rows x K) times patterns (K x d).
Var retrieve_pattern(Var omega, Var patterns);

/// Adjacency scaled to rows summing to one; empty rows stay zero.
Mat row_stochastic(const Mat& a);

/// A' = rowsoftmax(Q(Z) K(Z)^T / sqrt(d)) with projections under
/// "transfer/graph/q" and "transfer/graph/k" (no key bias).
class AttentionAdjacency {
 public:
  static constexpr const char* kPrefix = "transfer/graph";

  explicit AttentionAdjacency(int d) : d_(d) {}
  void init(ParameterStore& store, std::mt19937_64& rng) const;
  Var operator()(nn::Tape& tape, ParameterStore& store, Var z) const;

 private:
  int d_;
};

struct Reconstruction {
  Var c;       // coefficient matrix
  Var a_hat;   // (C + C^T) / 2, exactly symmetric
  Var a_used;  // negatives clamped, rows renormalised
};

/// Closed-form self-expressive graph:
/// C = (ZZ^T + 2 gamma I)^{-1} (ZZ^T + gamma (A + A')), solved by Cholesky in
/// the equivalent form C = S/2 + M^{-1} ZZ^T (I - S/2) with S = A + A', so
/// Z = 0 gives S/2 exactly. Throws std::invalid_argument for gamma <= 0 and
/// std::runtime_error for non-finite input.
Reconstruction reconstruct_graph(Var z, Var a, Var a_prime, double gamma);

/// ||(ZZ^T + 2 gamma I) C - (ZZ^T + gamma (A + A'))||_F relative to the
/// right-hand side norm.
double reconstruction_residual(const Mat& z, const Mat& a, const Mat& a_prime, double gamma,
                               const Mat& c);

void write_matrix_csv(const Mat& m, const std::filesystem::path& file);

}  // namespace mtpb
