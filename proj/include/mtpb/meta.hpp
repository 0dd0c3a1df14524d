#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string_view>
#include <vector>

#include "mtpb/forecast.hpp"
#include "mtpb/optim.hpp"

namespace mtpb {

struct MetaConfig {
  double alpha = 5e-4;  // inner step
  double beta = 5e-4;   // outer step
  int update_step = 3;
  int meta_epochs = 20;
  int tasks_per_epoch = 2;
  int finetune_epochs = 200;
  double finetune_lr = 1e-3;
  double finetune_weight_decay = 1e-2;
  /// Windows per support set, query set and fine-tuning batch.
  int batch_size = 4;

  void validate() const;
};

/// Support and query forecast origins of one source city; their
/// [origin - window_len, origin + horizon) spans never overlap.
struct TaskBatch {
  int city = 0;
  std::vector<long> support;
  std::vector<long> query;
};

/// Picks a city uniformly among those long enough for two disjoint spans,
/// cuts its timeline at a random point and draws support origins on one side
/// and query origins on the other. Throws std::invalid_argument when no
/// city qualifies.
TaskBatch sample_task(const std::vector<CityDataset>& sources, int window_len, int horizon,
                      int batch_size, std::mt19937_64& rng);

struct ReptileStats {
  std::vector<double> support_loss;  // per inner step, before the step
  std::vector<double> query_loss;    // per inner step, after the step
  double gradient_norm_sum = 0.0;    // sum of the stored query-gradient norms
};

/// One outer update over the parameters under `prefix`: a clone descends the
/// support loss with step alpha `update_step` times, storing the query-loss
/// gradient after each step; the original parameters then move by
/// -(beta / update_step) times the sum of stored gradients. Throws
/// std::runtime_error naming the inner step on a non-finite loss, with the
/// parameters restored.
ReptileStats reptile_epoch(ParameterStore& store, std::string_view prefix, const nn::LossFn& support,
                           const nn::LossFn& query, const MetaConfig& cfg);

/// Mean forecast loss of a batch of windows of one city.
Var batch_loss(nn::Tape& tape, ParameterStore& store, const TransferModel& model, const PatternBank& bank,
               const std::vector<ForecastSample>& samples, const Mat& adjacency);

std::vector<ForecastSample> make_samples(const CityDataset& city, const std::vector<long>& origins,
                                         const TransferConfig& cfg, const QueryEmbedder& embedder = {});

/// Loss of a sample set without recording gradients.
double evaluate_loss(ParameterStore& store, const TransferModel& model, const PatternBank& bank,
                     const std::vector<ForecastSample>& samples, const Mat& adjacency);

struct MetaEpoch {
  int epoch = 0;
  double support_loss = 0.0;
  double query_loss = 0.0;
};

/// Reptile meta-training of the "transfer/" subtree on scaled source cities.
std::vector<MetaEpoch> meta_train(ParameterStore& store, const TransferModel& model, const PatternBank& bank,
                                  const std::vector<CityDataset>& sources, const MetaConfig& cfg,
                                  std::uint64_t seed, const QueryEmbedder& embedder = {});

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN without validation windows
};

/// Adam over every few-shot batch of the scaled target city for
/// finetune_epochs epochs. Moments and the step counter of the transfer
/// subtree restart at zero. Throws std::invalid_argument on empty training
/// data.
std::vector<FinetuneEpoch> finetune(ParameterStore& store, const TransferModel& model, const PatternBank& bank,
                                    const CityDataset& target, const std::vector<long>& train_origins,
                                    const std::vector<long>& val_origins, const MetaConfig& cfg,
                                    std::uint64_t seed, const QueryEmbedder& embedder = {});

void write_meta_trace(const std::vector<MetaEpoch>& trace, const std::filesystem::path& file);
void write_finetune_trace(const std::vector<FinetuneEpoch>& trace, const std::filesystem::path& file);

}  // namespace mtpb
