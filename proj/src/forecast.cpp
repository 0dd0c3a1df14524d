#include "mtpb/forecast.hpp"

#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace mtpb {

using nn::Tape;

QueryConfig TransferConfig::query_config() const {
  QueryConfig q;
  q.layers = layers;
  q.input_width = query_with_embeddings ? layers.d : patch_width();
  q.scales = scales;
  q.k = k;
  q.raw_scores = raw_scores;
  q.query_with_embeddings = query_with_embeddings;
  return q;
}

void TransferConfig::validate() const {
  layers.validate();
  if (patch_len <= 0 || window_len <= 0 || window_len % patch_len != 0)
    throw std::invalid_argument("window length must be a positive multiple of the patch length");
  if (horizon <= 0) throw std::invalid_argument("forecast horizon must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  if (tcn_blocks <= 0) throw std::invalid_argument("at least one temporal block is required");
  for (int c : scales)
    if (c > num_patches())
      throw std::invalid_argument("pattern scale " + std::to_string(c) + " exceeds the patch count");
}

std::vector<long> forecast_origins(long begin, long end, int window_len, int horizon, int stride) {
  if (stride <= 0) throw std::invalid_argument("origin stride must be positive");
  std::vector<long> out;
  for (long t = begin; t + horizon <= end; t += stride)
    if (t >= window_len) out.push_back(t);
  return out;
}

ForecastSample make_sample(const CityDataset& city, long origin, const TransferConfig& cfg,
                           const QueryEmbedder& embedder) {
  if (origin < cfg.window_len)
    throw std::invalid_argument("origin " + std::to_string(origin) + " has less than " +
                                std::to_string(cfg.window_len) + " steps of history");
  ForecastSample s;
  s.origin = origin;
  s.history = make_patches(city, origin - cfg.window_len, cfg.window_len, cfg.patch_len);
  if (cfg.query_with_embeddings) {
    if (!embedder) throw std::invalid_argument("embedding queries need an embedder");
    s.queries = embedder(s.history, city.adjacency);
  } else {
    s.queries = s.history.patches;
  }
  if (origin + cfg.horizon <= city.num_steps())
    s.truth = city.speed.middleRows(origin, cfg.horizon).transpose();
  return s;
}

TransferModel::TransferModel(TransferConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))), query_(cfg_.query_config()), attention_(cfg_.layers.d) {}

void TransferModel::init(ParameterStore& store, std::mt19937_64& rng) const {
  const int d = cfg_.layers.d;
  query_.init(store, rng);
  attention_.init(store, rng);
  const std::string st = kShort;
  nn::init_linear(store, st + "/in", kChannels, d, rng);
  for (int b = 0; b < cfg_.tcn_blocks; ++b) {
    const std::string p = st + "/block" + std::to_string(b);
    nn::init_linear(store, p + "/filter", 2 * d, d, rng);
    nn::init_linear(store, p + "/gate", 2 * d, d, rng);
    store.add(p + "/gc/w", glorot(d, d, rng));
    nn::init_linear(store, p + "/skip", d, d, rng);
  }
  nn::init_linear(store, st + "/out", d, d, rng);
  nn::init_linear(store, kLong, cfg_.window_len * kChannels, d, rng);
  const std::string h = kHead;
  nn::init_linear(store, h + "/h1", 3 * d, d, rng);
  nn::init_linear(store, h + "/h2", d, d, rng);
  nn::init_linear(store, h + "/out", d, cfg_.horizon, rng);
}

Var TransferModel::short_term(Tape& tape, ParameterStore& store, Var last_patch, Var a_used,
                              int nodes) const {
  const int len = static_cast<int>(last_patch.rows() / nodes);
  if (last_patch.rows() != static_cast<Eigen::Index>(nodes) * len || last_patch.cols() != kChannels)
    throw std::invalid_argument("short_term: expected (N*P) x C input");
  if (a_used.rows() != nodes || a_used.cols() != nodes)
    throw std::invalid_argument("short_term: adjacency does not match the node count");
  const std::string st = kShort;
  Var x = nn::linear(tape, store, st + "/in", last_patch);
  Var skip;
  for (int b = 0; b < cfg_.tcn_blocks; ++b) {
    const std::string p = st + "/block" + std::to_string(b);
    Var taps = nn::concat_cols({x, nn::shift_in_blocks(x, nodes, len, 1 << b)});
    Var h = nn::hadamard(nn::tanh(nn::linear(tape, store, p + "/filter", taps)),
                         nn::sigmoid(nn::linear(tape, store, p + "/gate", taps)));
    h = nn::graph_conv_slots(h, a_used, tape.param(store, p + "/gc/w"), nodes, len);
    Var s = nn::linear(tape, store, p + "/skip", h);
    skip = skip.valid() ? nn::add(skip, s) : s;
    x = nn::add(x, h);
  }
  std::vector<int> last(nodes);
  for (int i = 0; i < nodes; ++i) last[i] = i * len + len - 1;
  return nn::linear(tape, store, st + "/out", nn::relu(nn::gather_rows(skip, last)));
}

Var TransferModel::long_term(Tape& tape, ParameterStore& store, Var history) const {
  if (history.cols() != static_cast<Eigen::Index>(cfg_.window_len) * kChannels)
    throw std::invalid_argument("long_term: history must hold exactly " +
                                std::to_string(cfg_.window_len) + " steps");
  return nn::linear(tape, store, kLong, history);
}

Var TransferModel::fuse(Tape& tape, ParameterStore& store, Var z, Var r_short, Var r_long) const {
  const Eigen::Index d = cfg_.layers.d;
  if (z.cols() != d || r_short.cols() != d || r_long.cols() != d || z.rows() != r_short.rows() ||
      z.rows() != r_long.rows())
    throw std::invalid_argument("fuse: inputs must all be N x d");
  const std::string h = kHead;
  Var x = nn::concat_cols({z, r_short, r_long});
  x = nn::relu(nn::linear(tape, store, h + "/h1", x));
  x = nn::relu(nn::linear(tape, store, h + "/h2", x));
  return nn::linear(tape, store, h + "/out", x);
}

TransferModel::Forward TransferModel::forward(Tape& tape, ParameterStore& store, const PatternBank& bank,
                                              const ForecastSample& sample, const Mat& adjacency) const {
  const PatchSet& hist = sample.history;
  const int n = hist.num_nodes, np = hist.num_patches();
  if (hist.window_len != cfg_.window_len || hist.patch_len != cfg_.patch_len)
    throw std::invalid_argument("forward: sample window does not match the model");
  if (adjacency.rows() != n || adjacency.cols() != n)
    throw std::invalid_argument("forward: adjacency does not match the node count");
  Forward f;
  if (cfg_.no_meta) {
    query_.check_bank(bank);
    f.z = tape.constant(Mat::Zero(n, cfg_.layers.d));
  } else {
    f.z = query_.meta_knowledge(tape, store, bank, tape.constant(sample.queries), n).z;
  }
  if (cfg_.no_reconstruction) {
    f.a_used = tape.constant(row_stochastic(adjacency));
  } else {
    f.a_prime = attention_(tape, store, f.z);
    f.graph = reconstruct_graph(f.z, tape.constant(row_stochastic(adjacency)), f.a_prime, cfg_.gamma);
    f.a_used = f.graph.a_used;
  }
  Var patches = tape.constant(hist.patches);
  std::vector<int> last(n);
  for (int i = 0; i < n; ++i) last[i] = i * np + np - 1;
  Var last_patch = nn::reshape(nn::gather_rows(patches, last), static_cast<Eigen::Index>(n) * cfg_.patch_len,
                               kChannels);
  f.r_short = short_term(tape, store, last_patch, f.a_used, n);
  f.r_long = long_term(tape, store,
                       nn::reshape(patches, n, static_cast<Eigen::Index>(cfg_.window_len) * kChannels));
  f.prediction = fuse(tape, store, f.z, f.r_short, f.r_long);
  return f;
}

Var forecast_loss(Var prediction, const Mat& truth) {
  if (prediction.rows() != truth.rows() || prediction.cols() != truth.cols())
    throw std::invalid_argument("forecast_loss: prediction and truth shapes differ");
  return nn::mse(prediction, truth);
}

void write_forecast_dump(const std::vector<ForecastRecord>& records, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << std::setprecision(10) << "node,origin_step,horizon_step,prediction,truth\n";
  for (const auto& r : records)
    for (Eigen::Index i = 0; i < r.prediction.rows(); ++i)
      for (Eigen::Index h = 0; h < r.prediction.cols(); ++h)
        out << i << ',' << r.origin << ',' << h + 1 << ',' << r.prediction(i, h) << ','
            << r.truth(i, h) << '\n';
}

}  // namespace mtpb
