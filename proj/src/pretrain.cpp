#include "mtpb/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mtpb/optim.hpp"

namespace mtpb {

using nn::Tape;


std::string to_string(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::T: return "T";
    case DecoderVariant::TS: return "T+S";
    case DecoderVariant::TST: return "T+S+T";
  }
  return "?";
}

DecoderVariant decoder_variant_from_string(const std::string& s) {
  if (s == "T") return DecoderVariant::T;
  if (s == "T+S" || s == "TS") return DecoderVariant::TS;
  if (s == "T+S+T" || s == "TST") return DecoderVariant::TST;
  throw std::invalid_argument("unknown decoder variant '" + s + "'");
}

void PatchModelConfig::validate() const {
  layers.validate();
  if (patch_len <= 0 || window_len <= 0 || window_len % patch_len != 0)
    throw std::invalid_argument("window length must be a positive multiple of the patch length");
}

PatchAutoencoder::PatchAutoencoder(PatchModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void PatchAutoencoder::init(ParameterStore& store, std::mt19937_64& rng) const {
  const int d = cfg_.layers.d;
  const std::string enc = kEncoder, dec = kDecoder;
  store.add(enc + "/w_enc", glorot(d, cfg_.patch_width(), rng));
  store.add(enc + "/b_enc", Mat::Zero(1, d));
  store.add(enc + "/pe", normal_init(kHoursPerWeek, d, 0.02, rng));
  for (int k = 0; k < cfg_.layers.encoder_depth; ++k)
    nn::init_transformer_block(store, enc + "/block" + std::to_string(k), d, cfg_.layers.ffn, rng);

  store.add(dec + "/mask_token", normal_init(1, d, 0.02, rng));
  store.add(dec + "/pe", normal_init(kHoursPerWeek, d, 0.02, rng));
  for (int k = 0; k < cfg_.layers.decoder_depth; ++k)
    nn::init_transformer_block(store, dec + "/t1/" + std::to_string(k), d, cfg_.layers.ffn, rng);
  if (cfg_.variant != DecoderVariant::T) store.add(dec + "/gc/w", glorot(d, d, rng));
  if (cfg_.variant == DecoderVariant::TST)
    for (int k = 0; k < cfg_.layers.decoder_depth; ++k)
      nn::init_transformer_block(store, dec + "/t2/" + std::to_string(k), d, cfg_.layers.ffn, rng);
  nn::init_linear(store, dec + "/out", d, cfg_.patch_width(), rng);
}

PatchAutoencoder::Encoded PatchAutoencoder::encode_unmasked(Tape& tape, ParameterStore& store,
                                                            const PatchSet& patches,
                                                            const MaskPlan& mask) const {
  const int n = patches.num_nodes, np = patches.num_patches();
  if (patches.width() != cfg_.patch_width())
    throw std::invalid_argument("encode_unmasked: patch width does not match the model");
  if (mask.num_nodes() != n || mask.num_patches() != np)
    throw std::invalid_argument("encode_unmasked: mask shape does not match the patch grid");
  Encoded out;
  out.slots.resize(n);
  std::vector<int> rows, slots;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < np; ++j)
      if (!mask.masked(i, j)) out.slots[i].push_back(j);
    if (out.slots[i].empty())
      throw std::invalid_argument("encode_unmasked: node " + std::to_string(i) +
                                  " has no unmasked patch");
    if (out.slots[i].size() != out.slots[0].size())
      throw std::invalid_argument("encode_unmasked: nodes must share the unmasked count");
    for (int j : out.slots[i]) {
      rows.push_back(i * np + j);
      slots.push_back(patches.week_slot[j]);
    }
  }
  const std::string enc = kEncoder;
  Mat input(static_cast<Eigen::Index>(rows.size()), patches.width());
  for (std::size_t r = 0; r < rows.size(); ++r) input.row(static_cast<Eigen::Index>(r)) = patches.patches.row(rows[r]);
  Var x = nn::linear(tape.constant(std::move(input)), tape.param(store, enc + "/w_enc"),
                     tape.param(store, enc + "/b_enc"));
  x = nn::add(x, nn::gather_rows(tape.param(store, enc + "/pe"), slots));
  for (int k = 0; k < cfg_.layers.encoder_depth; ++k)
    x = nn::transformer_block(tape, store, enc + "/block" + std::to_string(k), x, n,
                              cfg_.layers.heads);
  out.hidden = x;
  return out;
}

Var PatchAutoencoder::decode_hidden(Tape& tape, ParameterStore& store, const Encoded& enc,
                                    const PatchSet& patches, const MaskPlan& mask,
                                    const Mat& adjacency) const {
  const int n = patches.num_nodes, np = patches.num_patches();
  if (adjacency.rows() != n || adjacency.cols() != n)
    throw std::invalid_argument("decode: adjacency is " + std::to_string(adjacency.rows()) + "x" +
                                std::to_string(adjacency.cols()) + " for " + std::to_string(n) +
                                " nodes");
  const std::string dec = kDecoder;
  const int unmasked = static_cast<int>(enc.slots.front().size());
  const int token_row = n * unmasked;
  std::vector<int> index(static_cast<std::size_t>(n) * np), slots;
  for (int i = 0; i < n; ++i) {
    int rank = 0;
    for (int j = 0; j < np; ++j) {
      index[static_cast<std::size_t>(i) * np + j] = mask.masked(i, j) ? token_row : i * unmasked + rank++;
      slots.push_back(patches.week_slot[j]);
    }
  }
  Var x = nn::gather_rows(nn::concat_rows({enc.hidden, tape.param(store, dec + "/mask_token")}), index);
  x = nn::add(x, nn::gather_rows(tape.param(store, dec + "/pe"), slots));
  for (int k = 0; k < cfg_.layers.decoder_depth; ++k)
    x = nn::transformer_block(tape, store, dec + "/t1/" + std::to_string(k), x, n, cfg_.layers.heads);
  if (cfg_.variant != DecoderVariant::T)
    x = nn::graph_conv_slots(x, tape.constant(adjacency), tape.param(store, dec + "/gc/w"), n, np);
  if (cfg_.variant == DecoderVariant::TST)
    for (int k = 0; k < cfg_.layers.decoder_depth; ++k)
      x = nn::transformer_block(tape, store, dec + "/t2/" + std::to_string(k), x, n, cfg_.layers.heads);
  return x;
}

Var PatchAutoencoder::decode_and_reconstruct(Tape& tape, ParameterStore& store, const Encoded& enc,
                                             const PatchSet& patches, const MaskPlan& mask,
                                             const Mat& adjacency) const {
  Var h = decode_hidden(tape, store, enc, patches, mask, adjacency);
  return nn::linear(tape, store, std::string(kDecoder) + "/out", h);
}

Mat PatchAutoencoder::embed(ParameterStore& store, const PatchSet& patches, const Mat& adjacency) const {
  Tape tape(false);
  MaskPlan none;
  none.mask.assign(patches.num_nodes, std::vector<bool>(patches.num_patches(), false));
  auto enc = encode_unmasked(tape, store, patches, none);
  return decode_hidden(tape, store, enc, patches, none, adjacency).value();
}

Mat masked_speed_selector(const PatchSet& patches, const MaskPlan& mask) {
  const int np = patches.num_patches();
  Mat sel = Mat::Zero(patches.patches.rows(), patches.width());
  for (int i = 0; i < patches.num_nodes; ++i)
    for (int j = 0; j < np; ++j)
      if (mask.masked(i, j))
        for (int p = 0; p < patches.patch_len; ++p) sel(i * np + j, p * kChannels) = 1.0;
  return sel;
}

Var pretrain_loss(const PatchSet& patches, Var reconstructed, const MaskPlan& mask) {
  return nn::mse(reconstructed, patches.patches, masked_speed_selector(patches, mask));
}

std::vector<long> day_windows(const CityDataset& city, long begin, long end, int window_len) {
  const long spd = city.steps_per_day();
  long first = begin + ((spd - (city.start_offset + begin) % spd) % spd);
  std::vector<long> out;
  for (long s = first; s + window_len <= end; s += window_len) out.push_back(s);
  return out;
}

Scaler source_scaler(const CityDataset& city) { return fit_scaler(city); }

std::vector<double> heldout_reconstruction_error(const PatchAutoencoder& model, ParameterStore& store,
                                                 const std::vector<CityDataset>& cities,
                                                 double mask_ratio, std::uint64_t seed) {
  const int t0 = model.config().window_len, p = model.config().patch_len;
  std::mt19937_64 rng(seed);
  double se = 0.0, ae = 0.0, ape = 0.0;
  long count = 0, ape_count = 0;
  for (const auto& city : cities) {
    const Scaler sc = source_scaler(city);
    const CityDataset norm = apply_scaler(city, sc);
    const long spd = city.steps_per_day();
    for (long start : day_windows(city, city.num_steps() - spd, city.num_steps(), t0)) {
      PatchSet ps = make_patches(norm, start, t0, p);
      MaskPlan mask = sample_mask(ps.num_nodes, ps.num_patches(), mask_ratio, rng);
      if (mask.masked_per_node() == 0) continue;
      Tape tape(false);
      auto enc = model.encode_unmasked(tape, store, ps, mask);
      const Mat rec = model.decode_and_reconstruct(tape, store, enc, ps, mask, city.adjacency).value();
      const Mat sel = masked_speed_selector(ps, mask);
      for (Eigen::Index k = 0; k < sel.size(); ++k) {
        if (sel.data()[k] == 0.0) continue;
        const double truth = sc.inverse(ps.patches.data()[k]);
        const double err = sc.inverse(rec.data()[k]) - truth;
        se += err * err;
        ae += std::abs(err);
        ++count;
        if (truth != 0.0) {
          ape += std::abs(err / truth);
          ++ape_count;
        }
      }
    }
  }
  if (count == 0) return {0.0, 0.0, 0.0};
  return {std::sqrt(se / count), ae / count, ape_count ? 100.0 * ape / ape_count : 0.0};
}

PretrainResult pretrain(const std::vector<CityDataset>& sources, const PretrainConfig& cfg) {
  if (sources.empty()) throw std::invalid_argument("pretrain: at least one source city is required");
  PatchAutoencoder model(cfg.model);
  const int t0 = cfg.model.window_len, p = cfg.model.patch_len;

  PretrainResult result;
  std::mt19937_64 rng(cfg.seed);
  model.init(result.store, rng);

  struct Window {
    std::size_t city;
    long start;
  };
  std::vector<CityDataset> normalized;
  std::vector<Window> windows;
  for (std::size_t c = 0; c < sources.size(); ++c) {
    normalized.push_back(apply_scaler(sources[c], source_scaler(sources[c])));
    const long heldout_begin = sources[c].num_steps() - sources[c].steps_per_day();
    for (long s : day_windows(sources[c], 0, heldout_begin, t0)) windows.push_back({c, s});
  }
  if (windows.empty()) throw std::invalid_argument("pretrain: no training windows");

  const std::uint64_t eval_seed = cfg.seed ^ 0x9e3779b97f4a7c15ULL;
  result.initial_heldout_rmse =
      heldout_reconstruction_error(model, result.store, sources, cfg.mask_ratio, eval_seed)[0];

  nn::AdamConfig adam{cfg.lr, cfg.weight_decay};
  double best = std::numeric_limits<double>::infinity();
  Snapshot best_state = result.store.snapshot();
  int since_best = 0;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(windows.begin(), windows.end(), rng);
    double total = 0.0;
    for (const auto& w : windows) {
      const CityDataset& city = normalized[w.city];
      PatchSet ps = make_patches(city, w.start, t0, p);
      MaskPlan mask = sample_mask(ps.num_nodes, ps.num_patches(), cfg.mask_ratio, rng);
      result.store.zero_grad();
      Tape tape;
      auto enc = model.encode_unmasked(tape, result.store, ps, mask);
      Var rec = model.decode_and_reconstruct(tape, result.store, enc, ps, mask, city.adjacency);
      Var loss = pretrain_loss(ps, rec, mask);
      if (!std::isfinite(loss.scalar()))
        throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
      nn::adam_step(result.store, adam, "pretrain/");
      total += loss.scalar();
      ++step;
    }
    const auto err = heldout_reconstruction_error(model, result.store, sources, cfg.mask_ratio, eval_seed);
    result.trace.push_back({epoch, total / static_cast<double>(windows.size()), err[0], err[1], err[2]});
    if (err[0] < best) {
      best = err[0];
      best_state = result.store.snapshot();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  result.store.restore(best_state);
  return result;
}

void write_pretrain_trace(const std::vector<PretrainEpoch>& trace, const std::filesystem::path& file) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << "epoch,train_loss,heldout_rmse,heldout_mae,heldout_mape\n";
  os.precision(17);
  for (const auto& e : trace)
    os << e.epoch << ',' << e.train_loss << ',' << e.heldout_rmse << ',' << e.heldout_mae << ','
       << e.heldout_mape << '\n';
}

}  // namespace mtpb
