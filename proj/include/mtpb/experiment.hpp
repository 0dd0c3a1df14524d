#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpb/bank.hpp"
#include "mtpb/eval.hpp"
#include "mtpb/forecast.hpp"
#include "mtpb/meta.hpp"
#include "mtpb/pretrain.hpp"

namespace mtpb {

struct AblationFlags {
  bool no_meta = false;
  bool no_st_decoder = false;
  bool short_only_patterns = false;
  bool no_reconstruction = false;
};

/// Every setting of one experiment. Defaults are the full-size settings;
/// `desk()` shrinks widths and budgets for a single CPU core.
struct ExperimentConfig {
  std::uint64_t seed = 0;

  // data
  std::string corpus_dir;  // empty: synthetic corpus
  SyntheticSpec synthetic;
  std::string target_city;  // empty: the last city
  int base_interval = 5;
  int few_shot_days = 3;

  // model
  nn::LayerSpec layers;
  int window_len = 288;
  int patch_len = 12;

  // pretrain
  DecoderVariant decoder = DecoderVariant::TST;
  double mask_ratio = 0.75;
  double pretrain_lr = 1e-4;
  double pretrain_weight_decay = 0.0;
  int pretrain_epochs = 50;
  int pretrain_patience = 10;

  // patterns
  std::vector<int> scales{1, 3, 6, 12, 24};
  int k = 10;
  KMeansOptions kmeans;
  std::size_t silhouette_max_points = 5000;

  // transfer
  int horizon = 36;
  double gamma = 10.0;
  int tcn_blocks = 4;
  bool raw_scores = false;
  bool query_with_embeddings = false;

  MetaConfig meta;
  int train_stride = 1;

  // evaluate
  std::vector<int> horizons{10, 60, 120, 180};
  int eval_stride = 1;

  AblationFlags ablation;

  static ExperimentConfig desk();

  /// Effective stage configurations with the ablation flags applied.
  PretrainConfig pretrain_config() const;
  BankConfig bank_config() const;
  TransferConfig transfer_config() const;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw
/// std::invalid_argument.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& file);

/// FNV-1a of the canonical JSON form; every field contributes.
std::uint64_t config_hash(const ExperimentConfig& cfg);

enum class Stage { Data, Pretrain, Bank, Meta, Finetune, Evaluate };
std::string to_string(Stage s);

/// Hash of the settings each stage owns, independent of upstream stages.
std::vector<std::pair<Stage, std::uint64_t>> stage_config_hashes(const ExperimentConfig& cfg);

class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what)
      : std::runtime_error(to_string(stage) + ": " + what), stage_(stage) {}
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

struct StageRecord {
  Stage stage = Stage::Data;
  std::uint64_t config_hash = 0;
  std::uint64_t chain_hash = 0;
  bool cached = false;
  double seconds = 0.0;
  std::string status;
};

struct RunOptions {
  /// Last stage to execute.
  Stage until = Stage::Evaluate;
  /// Checkpoint cache shared between runs; defaults to <run>/checkpoints.
  std::filesystem::path cache_dir;
  bool verbose = false;
};

struct RunResult {
  std::filesystem::path dir;
  std::vector<StageRecord> stages;
  std::optional<MetricsReport> model;
  std::optional<MetricsReport> ha;
};

/// Executes data -> pretrain -> bank -> meta -> finetune -> evaluate into
/// `dir`:
///   config.json, manifest.json, metrics.csv, forecasts.csv,
///   checkpoints/, traces/, matrices/
/// A stage whose chain hash matches a cached checkpoint is loaded instead of
/// recomputed. A failing stage is recorded in the manifest and rethrown as
/// StageError.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                         const RunOptions& opts = {});

/// HA metrics only; writes metrics.csv into `dir`.
MetricsReport run_ha_baseline(const ExperimentConfig& cfg, const std::filesystem::path& dir);

/// "full" followed by the four single-flag variants.
std::vector<std::pair<std::string, ExperimentConfig>> ablation_variants(const ExperimentConfig& base);

struct AblationReport {
  std::vector<std::string> variants;
  std::vector<std::optional<MetricsReport>> metrics;
  std::vector<std::string> errors;  // empty when the variant succeeded
};

/// Runs every variant under dir/<variant> with a shared checkpoint cache
/// and writes dir/ablation.csv with per-horizon metrics and RMSE deltas
/// against the full model. A failing variant does not stop the others.
AblationReport run_ablations(const ExperimentConfig& base, const std::filesystem::path& dir,
                             const RunOptions& opts = {});

}  // namespace mtpb
