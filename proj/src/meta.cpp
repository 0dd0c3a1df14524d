#include "mtpb/meta.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mtpb {

using nn::Tape;

void MetaConfig::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0)) throw std::invalid_argument("meta step sizes must be positive");
  if (update_step < 1) throw std::invalid_argument("update_step must be at least 1");
  if (meta_epochs < 0 || tasks_per_epoch < 1 || finetune_epochs < 0)
    throw std::invalid_argument("epoch and task counts must be nonnegative");
  if (!(finetune_lr > 0.0) || finetune_weight_decay < 0.0)
    throw std::invalid_argument("invalid fine-tuning optimiser settings");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
}

TaskBatch sample_task(const std::vector<CityDataset>& sources, int window_len, int horizon, int batch_size,
                      std::mt19937_64& rng) {
  const long span = window_len + horizon;
  std::vector<int> eligible;
  for (std::size_t c = 0; c < sources.size(); ++c)
    if (sources[c].num_steps() >= 2 * span) eligible.push_back(static_cast<int>(c));
  if (eligible.empty())
    throw std::invalid_argument("sample_task: no source city holds two disjoint windows of " +
                                std::to_string(span) + " steps");
  TaskBatch task;
  task.city = eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
  const long total = sources[task.city].num_steps();
  const long cut = std::uniform_int_distribution<long>(span, total - span)(rng);
  const bool support_first = std::bernoulli_distribution(0.5)(rng);
  auto draw = [&](long begin, long end) {
    std::uniform_int_distribution<long> u(begin + window_len, end - horizon);
    std::vector<long> out(batch_size);
    for (auto& t : out) t = u(rng);
    return out;
  };
  std::vector<long> early = draw(0, cut), late = draw(cut, total);
  task.support = support_first ? early : late;
  task.query = support_first ? late : early;
  return task;
}

namespace {

double checked(double loss, const char* what, int step) {
  if (!std::isfinite(loss))
    throw std::runtime_error(std::string("reptile: non-finite ") + what + " loss at inner step " +
                             std::to_string(step));
  return loss;
}

}  // namespace

ReptileStats reptile_epoch(ParameterStore& store, std::string_view prefix, const nn::LossFn& support,
                           const nn::LossFn& query, const MetaConfig& cfg) {
  cfg.validate();
  const Snapshot theta = store.snapshot(prefix);
  Snapshot stored;
  for (const auto& [path, v] : theta) stored[path] = Mat::Zero(v.rows(), v.cols());
  ReptileStats stats;
  try {
    for (int i = 0; i < cfg.update_step; ++i) {
      store.zero_grad();
      {
        Tape tape;
        Var loss = support(tape, store);
        stats.support_loss.push_back(checked(loss.scalar(), "support", i));
        tape.backward(loss);
      }
      nn::sgd_step(store, cfg.alpha, prefix);
      store.zero_grad();
      {
        Tape tape;
        Var loss = query(tape, store);
        stats.query_loss.push_back(checked(loss.scalar(), "query", i));
        tape.backward(loss);
      }
      double sq = 0.0;
      for (auto& [path, g] : stored) {
        const Mat& grad = store.at(path).grad;
        g += grad;
        sq += grad.squaredNorm();
      }
      stats.gradient_norm_sum += std::sqrt(sq);
    }
  } catch (...) {
    store.restore(theta);
    store.zero_grad();
    throw;
  }
  store.restore(theta);
  const double step = cfg.beta / cfg.update_step;
  for (const auto& [path, g] : stored) store.value(path) -= step * g;
  store.zero_grad();
  return stats;
}

Var batch_loss(Tape& tape, ParameterStore& store, const TransferModel& model, const PatternBank& bank,
               const std::vector<ForecastSample>& samples, const Mat& adjacency) {
  if (samples.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Var total;
  for (const auto& s : samples) {
    Var l = forecast_loss(model.forward(tape, store, bank, s, adjacency).prediction, s.truth);
    total = total.valid() ? nn::add(total, l) : l;
  }
  return nn::scale(total, 1.0 / static_cast<double>(samples.size()));
}

std::vector<ForecastSample> make_samples(const CityDataset& city, const std::vector<long>& origins,
                                         const TransferConfig& cfg, const QueryEmbedder& embedder) {
  std::vector<ForecastSample> out;
  out.reserve(origins.size());
  for (long t : origins) out.push_back(make_sample(city, t, cfg, embedder));
  return out;
}

double evaluate_loss(ParameterStore& store, const TransferModel& model, const PatternBank& bank,
                     const std::vector<ForecastSample>& samples, const Mat& adjacency) {
  double total = 0.0;
  for (const auto& s : samples) {
    Tape tape(false);
    total += forecast_loss(model.forward(tape, store, bank, s, adjacency).prediction, s.truth).scalar();
  }
  return samples.empty() ? std::numeric_limits<double>::quiet_NaN() : total / samples.size();
}

std::vector<MetaEpoch> meta_train(ParameterStore& store, const TransferModel& model, const PatternBank& bank,
                                  const std::vector<CityDataset>& sources, const MetaConfig& cfg,
                                  std::uint64_t seed, const QueryEmbedder& embedder) {
  cfg.validate();
  const TransferConfig& tc = model.config();
  std::mt19937_64 rng(seed);
  std::vector<MetaEpoch> trace;
  for (int e = 0; e < cfg.meta_epochs; ++e) {
    MetaEpoch rec;
    rec.epoch = e;
    for (int k = 0; k < cfg.tasks_per_epoch; ++k) {
      const TaskBatch task = sample_task(sources, tc.window_len, tc.horizon, cfg.batch_size, rng);
      const CityDataset& city = sources[task.city];
      const auto spt = make_samples(city, task.support, tc, embedder);
      const auto qry = make_samples(city, task.query, tc, embedder);
      auto loss_of = [&](const std::vector<ForecastSample>& set) {
        return [&](Tape& tape, ParameterStore& s) { return batch_loss(tape, s, model, bank, set, city.adjacency); };
      };
      const ReptileStats st = reptile_epoch(store, TransferModel::kPrefix, loss_of(spt), loss_of(qry), cfg);
      rec.support_loss += st.support_loss.front() / cfg.tasks_per_epoch;
      rec.query_loss += st.query_loss.back() / cfg.tasks_per_epoch;
    }
    trace.push_back(rec);
  }
  return trace;
}

std::vector<FinetuneEpoch> finetune(ParameterStore& store, const TransferModel& model, const PatternBank& bank,
                                    const CityDataset& target, const std::vector<long>& train_origins,
                                    const std::vector<long>& val_origins, const MetaConfig& cfg,
                                    std::uint64_t seed, const QueryEmbedder& embedder) {
  cfg.validate();
  if (train_origins.empty()) throw std::invalid_argument("finetune: no few-shot training windows");
  const TransferConfig& tc = model.config();
  const auto train = make_samples(target, train_origins, tc, embedder);
  const auto val = make_samples(target, val_origins, tc, embedder);
  for (const auto& path : store.paths(TransferModel::kPrefix)) {
    Parameter& p = store.at(path);
    p.m.setZero();
    p.v.setZero();
  }
  store.set_step(0);
  nn::AdamConfig adam;
  adam.lr = cfg.finetune_lr;
  adam.weight_decay = cfg.finetune_weight_decay;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(train.size());
  std::vector<FinetuneEpoch> trace;
  for (int e = 0; e < cfg.finetune_epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    FinetuneEpoch rec;
    rec.epoch = e;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<ForecastSample> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(train[order[i]]);
      store.zero_grad();
      Tape tape;
      Var loss = batch_loss(tape, store, model, bank, batch, target.adjacency);
      if (!std::isfinite(loss.scalar()))
        throw std::runtime_error("finetune: non-finite loss in epoch " + std::to_string(e));
      tape.backward(loss);
      nn::adam_step(store, adam, TransferModel::kPrefix);
      rec.train_loss += loss.scalar();
      ++batches;
    }
    rec.train_loss /= batches;
    rec.val_loss = evaluate_loss(store, model, bank, val, target.adjacency);
    trace.push_back(rec);
  }
  store.zero_grad();
  return trace;
}

void write_meta_trace(const std::vector<MetaEpoch>& trace, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << std::setprecision(10) << "epoch,support_loss,query_loss\n";
  for (const auto& r : trace) out << r.epoch << ',' << r.support_loss << ',' << r.query_loss << '\n';
}

void write_finetune_trace(const std::vector<FinetuneEpoch>& trace, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << std::setprecision(10) << "epoch,train_loss,val_loss\n";
  for (const auto& r : trace) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << '\n';
}

}  // namespace mtpb
