#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mtpb/city.hpp"
#include "mtpb/layers.hpp"
#include "mtpb/params.hpp"
#include "mtpb/tape.hpp"

namespace mtpb {

using nn::Var;

/// Stages of the spatial-temporal decoder: T = temporal transformer only,
/// TS = transformer then graph convolution, TST = transformer, graph
/// convolution, transformer.
enum class DecoderVariant { T, TS, TST };

std::string to_string(DecoderVariant v);
DecoderVariant decoder_variant_from_string(const std::string& s);

struct PatchModelConfig {
  nn::LayerSpec layers;
  int patch_len = 12;
  int window_len = 288;
  DecoderVariant variant = DecoderVariant::TST;

  int num_patches() const { return window_len / patch_len; }
  int patch_width() const { return patch_len * kChannels; }
  void validate() const;
};

/// Masked patch autoencoder: transformer encoder over unmasked patches and a
/// spatial-temporal decoder that rebuilds every patch.
///
/// Parameters live under "pretrain/encoder/..." and "pretrain/decoder/...":
///   encoder: w_enc (d x PC), b_enc, pe (168 x d), block<k>/...
///   decoder: mask_token (1 x d), pe (168 x d), t1/<k>/..., gc/w, t2/<k>/...,
///            out/w (PC x d), out/b
class PatchAutoencoder {
 public:
  static constexpr const char* kEncoder = "pretrain/encoder";
  static constexpr const char* kDecoder = "pretrain/decoder";

  explicit PatchAutoencoder(PatchModelConfig cfg);

  const PatchModelConfig& config() const { return cfg_; }
  void init(ParameterStore& store, std::mt19937_64& rng) const;

  struct Encoded {
    Var hidden;                            // (N*U) x d, node-major
    std::vector<std::vector<int>> slots;   // unmasked slot indices per node
  };

  /// Embeds each node's unmasked patches, adds the week-slot positional
  /// embedding, and runs the encoder transformer. Masked patches are never
  /// read. Throws if a node has no unmasked patch or if nodes differ in
  /// their unmasked count.
  Encoded encode_unmasked(nn::Tape& tape, ParameterStore& store, const PatchSet& patches,
                          const MaskPlan& mask) const;

  /// Fills masked slots with the mask token and runs the decoder stack;
  /// returns the (N*n) x d hidden states before the output projection.
  Var decode_hidden(nn::Tape& tape, ParameterStore& store, const Encoded& enc,
                    const PatchSet& patches, const MaskPlan& mask, const Mat& adjacency) const;

  /// Reconstructed patches, (N*n) x (P*C).
  Var decode_and_reconstruct(nn::Tape& tape, ParameterStore& store, const Encoded& enc,
                             const PatchSet& patches, const MaskPlan& mask,
                             const Mat& adjacency) const;

  /// Full stack with nothing masked; (N*n) x d patch embeddings.
  Mat embed(ParameterStore& store, const PatchSet& patches, const Mat& adjacency) const;

 private:
  PatchModelConfig cfg_;
};

/// MSE over masked patches, speed channel only; 0 when nothing is masked.
Var pretrain_loss(const PatchSet& patches, Var reconstructed, const MaskPlan& mask);

/// Inclusion mask selecting the speed entries of masked patches.
Mat masked_speed_selector(const PatchSet& patches, const MaskPlan& mask);

struct PretrainConfig {
  PatchModelConfig model;
  double mask_ratio = 0.75;
  double lr = 1e-4;
  double weight_decay = 0.0;
  int epochs = 50;
  int patience = 10;
  std::uint64_t seed = 0;
};

struct PretrainEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double heldout_rmse = 0.0;
  double heldout_mae = 0.0;
  double heldout_mape = 0.0;
};

struct PretrainResult {
  ParameterStore store;   // "pretrain/..." subtree, best held-out epoch
  std::vector<PretrainEpoch> trace;
  double initial_heldout_rmse = 0.0;
  int best_epoch = -1;
};

/// Day-aligned, non-overlapping window starts of length `window_len` in
/// [begin, end).
std::vector<long> day_windows(const CityDataset& city, long begin, long end, int window_len);

/// Scaler used for a source city throughout the pipeline.
Scaler source_scaler(const CityDataset& city);

/// Masked-reconstruction error in original speed units over the last day of
/// every city, with masks fixed by `seed`. Returns {rmse, mae, mape}.
std::vector<double> heldout_reconstruction_error(const PatchAutoencoder& model,
                                                 ParameterStore& store,
                                                 const std::vector<CityDataset>& cities,
                                                 double mask_ratio, std::uint64_t seed);

/// Trains the autoencoder on every source city except its last day. Each
/// optimisation step uses one window of one city. Early-stops on held-out
/// RMSE and returns the best parameters. Throws std::runtime_error naming
/// the step on a non-finite loss.
PretrainResult pretrain(const std::vector<CityDataset>& sources, const PretrainConfig& cfg);

void write_pretrain_trace(const std::vector<PretrainEpoch>& trace, const std::filesystem::path& file);

}  // namespace mtpb
