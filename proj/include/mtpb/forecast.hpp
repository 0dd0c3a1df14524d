#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mtpb/aggregate.hpp"
#include "mtpb/bank.hpp"
#include "mtpb/city.hpp"
#include "mtpb/layers.hpp"
#include "mtpb/params.hpp"

namespace mtpb {

struct TransferConfig {
  nn::LayerSpec layers;
  int patch_len = 12;
  int window_len = 288;
  int horizon = 36;
  std::vector<int> scales{1, 3, 6, 12, 24};
  int k = 10;
  double gamma = 10.0;
  /// Gated temporal-convolution blocks; block b has dilation 2^b.
  int tcn_blocks = 4;
  bool raw_scores = false;
  bool query_with_embeddings = false;
  /// Replace the queried meta-knowledge Z by zeros wherever it is consumed.
  bool no_meta = false;
  /// Use the row-normalised predefined adjacency instead of the
  /// reconstructed one.
  bool no_reconstruction = false;

  int num_patches() const { return window_len / patch_len; }
  int patch_width() const { return patch_len * kChannels; }
  QueryConfig query_config() const;
  void validate() const;
};

/// One forecasting window of a scaled city.
struct ForecastSample {
  PatchSet history;  // [origin - window_len, origin)
  Mat queries;       // pattern-query rows, (N*n) x input width
  Mat truth;         // N x horizon scaled speed from step `origin` on
  long origin = 0;
};

/// Optional embedding provider for embedding-based queries:
/// (patches, adjacency) -> (N*n) x d.
using QueryEmbedder = std::function<Mat(const PatchSet&, const Mat&)>;

/// Forecast origins t in [begin, end) stepping by `stride` from `begin`, with
/// a full history (t >= window_len) and a full horizon (t + horizon <= end).
std::vector<long> forecast_origins(long begin, long end, int window_len, int horizon, int stride = 1);

ForecastSample make_sample(const CityDataset& city, long origin, const TransferConfig& cfg,
                           const QueryEmbedder& embedder = {});

/// Pattern aggregation, graph reconstruction, short- and long-term modules
/// and the fusion head. Every parameter lives under "transfer/".
class TransferModel {
 public:
  static constexpr const char* kPrefix = "transfer";
  static constexpr const char* kShort = "transfer/short";
  static constexpr const char* kLong = "transfer/long";
  static constexpr const char* kHead = "transfer/head";

  explicit TransferModel(TransferConfig cfg);
  const TransferConfig& config() const { return cfg_; }
  const PatternQuery& query() const { return query_; }
  void init(ParameterStore& store, std::mt19937_64& rng) const;

  struct Forward {
    Var prediction;  // N x horizon
    Var z;
    Var a_prime;     // invalid when reconstruction is disabled
    Reconstruction graph;
    Var a_used;
    Var r_short;
    Var r_long;
  };

  Forward forward(nn::Tape& tape, ParameterStore& store, const PatternBank& bank,
                  const ForecastSample& sample, const Mat& adjacency) const;

  /// Gated dilated temporal convolutions with graph convolution over the
  /// (N*P) x C last patch; returns N x d.
  Var short_term(nn::Tape& tape, ParameterStore& store, Var last_patch, Var a_used, int nodes) const;
  /// Affine map of each node's flattened history, N x (window_len*C) -> N x d.
  Var long_term(nn::Tape& tape, ParameterStore& store, Var history) const;
  /// MLP over [Z | R_s | R_l] with two ReLU hidden layers; N x horizon.
  Var fuse(nn::Tape& tape, ParameterStore& store, Var z, Var r_short, Var r_long) const;

 private:
  TransferConfig cfg_;
  PatternQuery query_;
  AttentionAdjacency attention_;
};

/// Mean squared error over all N x horizon entries.
Var forecast_loss(Var prediction, const Mat& truth);

/// Predictions and truth of one origin in original units, N x horizon.
struct ForecastRecord {
  long origin = 0;
  Mat prediction;
  Mat truth;
};

/// node,origin_step,horizon_step,prediction,truth with horizon_step from 1.
void write_forecast_dump(const std::vector<ForecastRecord>& records, const std::filesystem::path& file);

}  // namespace mtpb
