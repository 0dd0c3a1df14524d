// Prints one PASS/FAIL line per acceptance criterion; exits nonzero if any
// criterion fails. `acceptance 4 6` runs a subset.
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "mtpb/aggregate.hpp"
#include "mtpb/experiment.hpp"
#include "mtpb/layers.hpp"
#include "mtpb/optim.hpp"
#include "transfer_toy.hpp"

using namespace mtpb;
using mtpb::testing::random_adjacency;
using mtpb::testing::random_mat;
namespace fs = std::filesystem;

namespace {

using clk = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Outcome&)> run;
};

fs::path work_dir() {
  const fs::path p = fs::temp_directory_path() / "mtpb_acceptance";
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------- 1

double probe_error(ParameterStore& store, const std::function<nn::Var(nn::Tape&, ParameterStore&)>& f,
                   const Mat& probe, std::size_t& skipped) {
  auto loss = [&](nn::Tape& t, ParameterStore& s) { return nn::sum(nn::hadamard(f(t, s), t.constant(probe))); };
  nn::GradCheckOptions o;
  o.epsilon = 1e-4;
  const auto r = nn::finite_diff_check(loss, store, o);
  skipped += r.coords_skipped;
  return r.max_rel_error;
}

void gradient_integrity(Outcome& out) {
  using namespace nn;
  std::mt19937_64 rng(101);
  std::size_t skipped = 0;
  std::vector<std::pair<std::string, double>> errors;

  auto check = [&](const std::string& name, ParameterStore store, Eigen::Index rows, Eigen::Index cols,
                   const std::function<Var(Tape&, ParameterStore&)>& f) {
    const Mat probe = random_mat(rows, cols, rng);
    errors.emplace_back(name, probe_error(store, f, probe, skipped));
  };

  {
    ParameterStore s;
    init_linear(s, "l", 5, 4, rng);
    s.add("x", random_mat(3, 5, rng));
    check("linear", s, 3, 4, [](Tape& t, ParameterStore& st) { return linear(t, st, "l", t.param(st, "x")); });
  }
  {
    ParameterStore s;
    init_layer_norm(s, "ln", 6);
    s.value("ln/gamma") = random_mat(1, 6, rng);
    s.value("ln/beta") = random_mat(1, 6, rng);
    s.add("x", random_mat(4, 6, rng));
    check("layer_norm", s, 4, 6, [](Tape& t, ParameterStore& st) {
      return layer_norm(t.param(st, "x"), t.param(st, "ln/gamma"), t.param(st, "ln/beta"));
    });
  }
  {
    ParameterStore s;
    s.add("x", random_mat(4, 5, rng));
    check("softmax_rows", s, 4, 5, [](Tape& t, ParameterStore& st) { return softmax_rows(t.param(st, "x")); });
    check("tanh", s, 4, 5, [](Tape& t, ParameterStore& st) { return nn::tanh(t.param(st, "x")); });
    check("sigmoid", s, 4, 5, [](Tape& t, ParameterStore& st) { return sigmoid(t.param(st, "x")); });
  }
  {
    ParameterStore s;
    s.add("q", random_mat(6, 4, rng));
    s.add("k", random_mat(6, 4, rng));
    s.add("v", random_mat(6, 4, rng));
    check("attention", s, 6, 4, [](Tape& t, ParameterStore& st) {
      return attention(t.param(st, "q"), t.param(st, "k"), t.param(st, "v"), 2, 2);
    });
  }
  {
    ParameterStore s;
    init_transformer_block(s, "blk", 8, 16, rng);
    s.add("x", random_mat(6, 8, rng));
    check("transformer_block", s, 6, 8,
          [](Tape& t, ParameterStore& st) { return transformer_block(t, st, "blk", t.param(st, "x"), 2, 2); });
  }
  {
    ParameterStore s;
    s.add("h", random_mat(5, 3, rng));
    s.add("a", random_adjacency(5, rng));
    s.add("w", random_mat(3, 3, rng));
    check("graph_conv", s, 5, 3, [](Tape& t, ParameterStore& st) {
      return graph_conv(t.param(st, "h"), t.param(st, "a"), t.param(st, "w"));
    });
    ParameterStore sl;
    sl.add("h", random_mat(12, 3, rng));
    sl.add("w", random_mat(3, 3, rng));
    const Mat a3 = random_adjacency(3, rng);
    check("graph_conv_slots", sl, 12, 3, [a3](Tape& t, ParameterStore& st) {
      return graph_conv_slots(t.param(st, "h"), t.constant(a3), t.param(st, "w"), 3, 4);
    });
  }
  {
    ParameterStore s;
    const Mat r = random_mat(4, 4, rng);
    s.add("m", r * r.transpose() + 4.0 * Mat::Identity(4, 4));
    s.add("b", random_mat(4, 2, rng));
    check("solve_spd", s, 4, 2, [](Tape& t, ParameterStore& st) {
      Var m = t.param(st, "m");
      return solve_spd(scale(add(m, transpose(m)), 0.5), t.param(st, "b"));
    });
  }
  {
    ParameterStore s;
    s.add("x", random_mat(4, 5, rng).cwiseAbs());
    check("row_normalize", s, 4, 5, [](Tape& t, ParameterStore& st) { return row_normalize(t.param(st, "x")); });
    const Mat truth = random_mat(4, 5, rng);
    check("mse", s, 1, 1, [truth](Tape& t, ParameterStore& st) { return mse(t.param(st, "x"), truth); });
  }

  // Pretraining loss on a 2-node, 4-patch toy.
  {
    PatchModelConfig pc;
    pc.layers.d = 8;
    pc.layers.d_q = 8;
    pc.layers.heads = 2;
    pc.layers.ffn = 16;
    pc.layers.encoder_depth = 1;
    pc.layers.decoder_depth = 1;
    pc.patch_len = 2;
    pc.window_len = 8;
    PatchAutoencoder model(pc);
    ParameterStore s;
    model.init(s, rng);
    Mat series = random_mat(2 * 8, kChannels, rng);
    const PatchSet ps = patches_from_series(series, 2, 8, 2, {5, 6, 7, 8});
    const MaskPlan m = sample_mask(2, 4, 0.5, std::uint64_t{7});
    Mat adj(2, 2);
    adj << 0, 0.6, 0.4, 0;
    auto fn = [&](Tape& t, ParameterStore& st) {
      auto enc = model.encode_unmasked(t, st, ps, m);
      return pretrain_loss(ps, model.decode_and_reconstruct(t, st, enc, ps, m, adj), m);
    };
    const auto r = finite_diff_check(fn, s);
    skipped += r.coords_skipped;
    errors.emplace_back("pretrain_loss", r.max_rel_error);
  }

  // Transfer pipeline loss on a 3-node toy.
  {
    const TransferConfig cfg = mtpb::testing::toy_transfer_config();
    TransferModel model(cfg);
    ParameterStore s;
    model.init(s, rng);
    const PatternBank bank = mtpb::testing::toy_bank(cfg, rng);
    const ForecastSample sample = mtpb::testing::toy_sample(cfg, 3, rng);
    const Mat a = random_adjacency(3, rng);
    auto fn = [&](Tape& t, ParameterStore& st) {
      return forecast_loss(model.forward(t, st, bank, sample, a).prediction, sample.truth);
    };
    GradCheckOptions o;
    o.prefix = TransferModel::kPrefix;
    o.max_coords_per_tensor = 16;
    const auto r = finite_diff_check(fn, s, o);
    skipped += r.coords_skipped;
    errors.emplace_back("transfer_pipeline", r.max_rel_error);
    out.require(r.coords_checked > 500, "too few transfer coordinates checked");
  }

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : errors) {
    out.require(e < 1e-4, name + " rel-err " + std::to_string(e));
    if (e >= worst) worst = e, worst_name = name;
  }
  out.detail << errors.size() << " checks, max rel-err " << std::scientific << std::setprecision(2) << worst
             << " (" << worst_name << "), " << skipped << " kink coordinates skipped";
}

// ---------------------------------------------------------------- 2

Mat dense_oracle(const Mat& z, const Mat& a, const Mat& ap, double g) {
  const Eigen::Index n = z.rows();
  const Mat gram = z * z.transpose();
  const Mat m = gram + 2.0 * g * Mat::Identity(n, n);
  const Mat rhs = gram + g * (a + ap);
  return Eigen::FullPivLU<Eigen::MatrixXd>(m).solve(Eigen::MatrixXd(rhs));
}

Mat random_stochastic(int n, std::mt19937_64& rng) {
  Mat m = random_mat(n, n, rng).array().exp();
  for (int i = 0; i < n; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

void closed_form(Outcome& out) {
  std::mt19937_64 rng(202);
  nn::Tape t(false);
  double worst = 0.0;
  int instances = 0;
  bool symmetric = true;
  const int sizes[] = {3, 10, 64};
  for (int i = 0; i < 20; ++i) {
    const int n = sizes[i % 3];
    const Mat z = random_mat(n, 16, rng);
    const Mat a = row_stochastic(random_adjacency(n, rng)), ap = random_stochastic(n, rng);
    const auto r = reconstruct_graph(t.constant(z), t.constant(a), t.constant(ap), 10.0);
    worst = std::max(worst, (r.c.value() - dense_oracle(z, a, ap, 10.0)).cwiseAbs().maxCoeff());
    const Mat h = r.a_hat.value();
    symmetric = symmetric && h == Mat(h.transpose());
    ++instances;
  }
  out.require(worst < 1e-8, "oracle mismatch");
  out.require(symmetric, "A_hat not exactly symmetric");

  const Mat a = row_stochastic(random_adjacency(10, rng)), ap = random_stochastic(10, rng);
  const auto zero = reconstruct_graph(t.constant(Mat::Zero(10, 16)), t.constant(a), t.constant(ap), 10.0);
  const bool exact = zero.c.value() == Mat(0.5 * (a + ap));
  out.require(exact, "Z = 0 does not give (A + A')/2 exactly");

  const auto big = reconstruct_graph(t.constant(random_mat(10, 16, rng)), t.constant(a), t.constant(ap), 1e6);
  const Mat s = 0.5 * (a + ap);
  const double limit = (big.a_hat.value() - 0.5 * (s + s.transpose())).cwiseAbs().maxCoeff();
  out.require(limit < 1e-3, "gamma = 1e6 limit");
  out.detail << instances << " instances, max oracle diff " << std::scientific << std::setprecision(2) << worst
             << ", Z=0 exact " << (exact ? "yes" : "no") << ", gamma=1e6 gap " << limit;
}

// ---------------------------------------------------------------- 3

Mat planted(const Mat& dirs, int per, double noise, std::mt19937_64& rng, std::vector<int>& labels) {
  std::normal_distribution<double> g(0.0, noise);
  std::uniform_real_distribution<double> len(0.5, 2.0);
  Mat pts(dirs.rows() * per, dirs.cols());
  labels.clear();
  for (Eigen::Index c = 0; c < dirs.rows(); ++c)
    for (int k = 0; k < per; ++k) {
      Eigen::RowVectorXd p = dirs.row(c).normalized();
      for (Eigen::Index j = 0; j < p.size(); ++j) p(j) += g(rng);
      pts.row(c * per + k) = len(rng) * p;
      labels.push_back(static_cast<int>(c));
    }
  return pts;
}

bool non_increasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1] + 1e-9 * std::max(1.0, std::abs(v[i - 1]))) return false;
  return true;
}

PretrainConfig desk_pretrain(DecoderVariant v, int epochs, std::uint64_t seed) {
  PretrainConfig pc = ExperimentConfig::desk().pretrain_config();
  pc.model.variant = v;
  pc.epochs = epochs;
  pc.seed = seed;
  return pc;
}

void clustering(Outcome& out) {
  std::mt19937_64 rng(303);
  std::vector<int> labels;
  bool inertia_ok = true;
  double min_ari = 1.0;
  {
    Mat dirs(2, 8);
    dirs.row(0) = random_mat(1, 8, rng);
    dirs.row(1) = -dirs.row(0);
    const Mat pts = planted(dirs, 60, 0.1, rng, labels);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto r = kmeans_cosine(pts, 2, s);
      min_ari = std::min(min_ari, adjusted_rand_index(r.assignments, labels));
      inertia_ok = inertia_ok && non_increasing(r.inertia);
    }
  }
  {
    const Mat dirs = random_mat(3, 12, rng);
    const Mat pts = planted(dirs, 50, 0.05, rng, labels);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto r = kmeans_cosine(pts, 3, s);
      min_ari = std::min(min_ari, adjusted_rand_index(r.assignments, labels));
      inertia_ok = inertia_ok && non_increasing(r.inertia);
    }
  }
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Mat pts = random_mat(300, 6, rng);
    inertia_ok = inertia_ok && non_increasing(kmeans_cosine(pts, 2 + static_cast<int>(s % 9), s).inertia);
  }
  out.require(min_ari == 1.0, "planted clusters not recovered exactly");

  SyntheticSpec spec;
  spec.num_cities = 3;
  const auto cities = generate_synthetic_corpus(spec);
  const PretrainConfig pc = desk_pretrain(DecoderVariant::TST, 10, 3);
  PretrainResult pr = pretrain(cities, pc);
  PatchAutoencoder model(pc.model);
  const CorpusEmbedding emb = embed_corpus(cities, model, pr.store);

  BankConfig bc = ExperimentConfig::desk().bank_config();
  bc.seed = 9;
  auto [b1, r1] = build_bank(emb, bc, pr.store.hash());
  auto [b2, r2] = build_bank(emb, bc, pr.store.hash());
  bool deterministic = true;
  for (std::size_t s = 0; s < b1.centroids.size(); ++s)
    deterministic = deterministic && b1.centroids[s] == b2.centroids[s];
  for (const auto& sr : r1.scales) inertia_ok = inertia_ok && non_increasing(sr.inertia);
  out.require(deterministic, "bank differs between identical builds");
  out.require(inertia_ok, "inertia increased");

  const Mat seg = corpus_segments(emb, 24);
  const auto k3 = kmeans_cosine(seg, 3, 5), k30 = kmeans_cosine(seg, 30, 5);
  const double s3 = silhouette(seg, k3.assignments, 5), s30 = silhouette(seg, k30.assignments, 5);
  out.require(s3 > s30, "silhouette K=3 not above K=30");
  out.detail << "min ARI " << min_ari << ", inertia monotone " << (inertia_ok ? "yes" : "no") << ", bank deterministic "
             << (deterministic ? "yes" : "no") << ", silhouette@24 K=3 " << std::fixed << std::setprecision(3) << s3
             << " vs K=30 " << s30;
}

// ---------------------------------------------------------------- 4

void pretraining_direction(Outcome& out) {
  SyntheticSpec spec;
  spec.num_cities = 3;
  spec.nodes_per_city = 20;
  spec.days = 14;
  const auto cities = generate_synthetic_corpus(spec);
  double t_sum = 0.0, tst_sum = 0.0;
  bool halved = true;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const PretrainResult tst = pretrain(cities, desk_pretrain(DecoderVariant::TST, 60, seed));
    const PretrainResult t = pretrain(cities, desk_pretrain(DecoderVariant::T, 60, seed));
    const double e_tst = tst.trace[tst.best_epoch].heldout_rmse, e_t = t.trace[t.best_epoch].heldout_rmse;
    halved = halved && e_tst < 0.5 * tst.initial_heldout_rmse && e_t < 0.5 * t.initial_heldout_rmse;
    t_sum += e_t;
    tst_sum += e_tst;
    per_seed << std::fixed << std::setprecision(3) << " [" << e_t << " / " << e_tst << "]";
  }
  const double margin = (t_sum - tst_sum) / t_sum;
  out.require(margin > 0.05, "T vs T+S+T margin not above 5%");
  out.require(halved, "final RMSE not below half the untrained RMSE");
  out.detail << std::fixed << std::setprecision(3) << "held-out RMSE T " << t_sum / 3 << " vs T+S+T " << tst_sum / 3
             << " (margin " << std::setprecision(1) << 100 * margin << "%), per seed T/TST" << per_seed.str();
}

// ---------------------------------------------------------------- 5

void meta_benefit(Outcome& out) {
  const ExperimentConfig desk = ExperimentConfig::desk();
  SyntheticSpec spec;
  const auto all = generate_synthetic_corpus(spec);
  std::vector<CityDataset> raw(all.begin(), all.end() - 1);
  std::vector<CityDataset> sources;
  for (const auto& c : raw) sources.push_back(apply_scaler(c, source_scaler(c)));
  const FewShotSplit split = split_few_shot(all.back(), desk.few_shot_days, desk.window_len);
  const CityDataset target = apply_scaler(all.back(), fit_scaler(all.back(), {0, split.few_shot.end}));

  const PretrainConfig pc = desk_pretrain(DecoderVariant::TST, 5, 0);
  PretrainResult pr = pretrain(raw, pc);
  PatchAutoencoder pm(pc.model);
  const auto [bank, report] = build_bank(embed_corpus(raw, pm, pr.store), desk.bank_config(), pr.store.hash());

  const TransferModel model(desk.transfer_config());
  const auto origins =
      forecast_origins(split.few_shot.begin, split.few_shot.end, desk.window_len, desk.horizon, 12);
  const std::size_t nval = origins.size() / 5;
  const std::vector<long> train(origins.begin(), origins.end() - nval), val(origins.end() - nval, origins.end());

  MetaConfig mc = desk.meta;
  mc.finetune_epochs = 2;
  int wins = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ParameterStore random_init;
    std::mt19937_64 rng(seed);
    model.init(random_init, rng);
    ParameterStore meta_init = random_init;
    meta_train(meta_init, model, bank, sources, mc, seed);
    const auto fr = finetune(random_init, model, bank, target, train, val, mc, seed);
    const auto fm = finetune(meta_init, model, bank, target, train, val, mc, seed);
    const double lr = fr.back().val_loss, lm = fm.back().val_loss;
    wins += lm < lr;
    per_seed << std::fixed << std::setprecision(4) << " [" << lr << " / " << lm << "]";
  }
  out.require(wins >= 4, "meta initialisation won fewer than 4 of 5 seeds");
  out.detail << "meta init lower val loss in " << wins << "/5 seeds, random/meta" << per_seed.str();
}

// ---------------------------------------------------------------- 6

std::vector<MetricsReport> g_reports;

void end_to_end(Outcome& out) {
  const fs::path root = work_dir() / "end_to_end";
  fs::remove_all(root);
  RunOptions opts;
  opts.cache_dir = root / "cache";
  double full60 = 0, ha60 = 0, full180 = 0, nometa180 = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ExperimentConfig cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    const RunResult full = run_experiment(cfg, root / ("full-" + std::to_string(seed)), opts);
    cfg.ablation.no_meta = true;
    const RunResult nm = run_experiment(cfg, root / ("no_meta-" + std::to_string(seed)), opts);
    full60 += full.model->at_minutes(60).rmse / 3;
    ha60 += full.ha->at_minutes(60).rmse / 3;
    full180 += full.model->at_minutes(180).rmse / 3;
    nometa180 += nm.model->at_minutes(180).rmse / 3;
    g_reports.insert(g_reports.end(), {*full.model, *full.ha, *nm.model});
  }
  out.require(full60 < ha60, "full does not beat HA at 60 min");
  out.require(full180 < nometa180, "full does not beat w/o meta at 180 min");
  out.detail << std::fixed << std::setprecision(4) << "RMSE@60 full " << full60 << " vs HA " << ha60
             << "; RMSE@180 full " << full180 << " vs w/o meta " << nometa180;
}

// ---------------------------------------------------------------- 7

void metric_correctness(Outcome& out) {
  std::mt19937_64 rng(707);
  std::vector<ForecastRecord> recs;
  for (int o = 0; o < 8; ++o) {
    ForecastRecord r;
    r.origin = o;
    r.prediction = random_mat(7, 36, rng, 10.0);
    r.truth = random_mat(7, 36, rng, 10.0);
    recs.push_back(r);
  }
  const std::vector<int> horizons{10, 60, 120, 180};
  const MetricsReport rep = compute_metrics(recs, horizons, 5);
  double worst = 0.0;
  for (const auto& h : rep.horizons) {
    double sq = 0, ab = 0, pct = 0;
    int n = 0;
    for (const auto& r : recs)
      for (Eigen::Index i = 0; i < r.truth.rows(); ++i) {
        const double y = r.truth(i, h.step - 1), e = r.prediction(i, h.step - 1) - y;
        sq += e * e;
        ab += std::abs(e);
        pct += std::abs(e / y);
        ++n;
      }
    worst = std::max({worst, std::abs(h.rmse - std::sqrt(sq / n)), std::abs(h.mae - ab / n),
                      std::abs(*h.mape - 100 * pct / n)});
  }
  out.require(worst < 1e-10, "oracle mismatch");

  std::vector<MetricsReport> all = g_reports;
  all.push_back(rep);
  bool ordered = true;
  for (const auto& r : all)
    for (const auto& h : r.horizons) ordered = ordered && h.rmse >= h.mae;
  out.require(ordered, "RMSE below MAE");

  CityDataset c;
  c.name = "periodic";
  c.adjacency = Mat::Zero(3, 3);
  const long week = 7 * 288;
  c.speed.resize(3 * week, 3);
  for (long t = 0; t < c.speed.rows(); ++t)
    for (int i = 0; i < 3; ++i)
      c.speed(t, i) = 50 + 10 * std::sin(2 * M_PI * (t % week) / week * (i + 1)) + (t % 288) * 0.01;
  std::vector<long> origins;
  for (long t = 2 * week; t + 36 <= c.num_steps(); t += 97) origins.push_back(t);
  const MetricsReport ha = compute_metrics(ha_baseline(c, {0, 2 * week}, origins, 36), horizons, 5);
  bool zero = true, identical = true;
  for (const auto& h : ha.horizons) {
    zero = zero && h.rmse == 0.0 && h.mae == 0.0;
    identical = identical && h.rmse == ha.horizons[0].rmse && h.mae == ha.horizons[0].mae &&
                h.mape == ha.horizons[0].mape;
  }
  out.require(zero && identical, "HA not exact on a weekly periodic signal");
  out.detail << "max oracle diff " << std::scientific << std::setprecision(2) << worst << ", RMSE >= MAE on "
             << all.size() << " reports, HA periodic error " << ha.horizons[0].rmse;
}

// ---------------------------------------------------------------- 8

#ifndef MTPB_CLI
#define MTPB_CLI ""
#endif

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + MTPB_CLI + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

void reproducibility(Outcome& out) {
  const fs::path root = work_dir() / "repro";
  out.require(std::string(MTPB_CLI).size() > 0, "mtpb CLI not built");
  if (std::string(MTPB_CLI).empty()) return;
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "small.json");
    cfg << R"({"seed": 11,
      "data": {"synthetic": {"num_cities": 3, "nodes_per_city": 6, "days": 6}, "few_shot_days": 2},
      "model": {"layers": {"d": 16, "d_q": 16, "ffn": 32}},
      "pretrain": {"epochs": 2, "lr": 0.001},
      "meta": {"meta_epochs": 2, "alpha": 0.05, "beta": 0.05},
      "finetune": {"epochs": 2, "train_stride": 24},
      "evaluate": {"eval_stride": 24}})";
  }
  const std::string cfg = "--config \"" + (root / "small.json").string() + "\"";
  int rc = 0;
  std::vector<std::string> runs = {"run", "baseline-ha", "run --no-reconstruction"};
  int identical = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const fs::path a = root / ("a" + std::to_string(i)), b = root / ("b" + std::to_string(i));
    rc |= run_cli(runs[i] + " " + cfg + " --out \"" + a.string() + "\"");
    rc |= run_cli(runs[i] + " " + cfg + " --out \"" + b.string() + "\"");
    const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
    identical += !ma.empty() && ma == mb;
  }
  out.require(rc == 0, "CLI returned an error");
  out.require(identical == static_cast<int>(runs.size()), "metrics CSVs differ between repeated runs");
  out.detail << identical << "/" << runs.size() << " repeated CLI runs produced byte-identical metrics.csv";
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<Criterion> criteria = {
      {1, "gradient integrity", 120, gradient_integrity},
      {2, "closed-form graph solve", 30, closed_form},
      {3, "clustering", 120, clustering},
      {4, "pretraining decoder direction", 600, pretraining_direction},
      {5, "meta-learning benefit", 600, meta_benefit},
      {6, "end-to-end direction", 900, end_to_end},
      {7, "metric correctness", 60, metric_correctness},
      {8, "reproducibility", 300, reproducibility},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome out;
    const auto t0 = clk::now();
    try {
      c.run(out);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << "exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(clk::now() - t0).count();
    if (secs > c.budget_seconds) {
      out.pass = false;
      out.detail << " [over the " << c.budget_seconds << " s budget]";
    }
    failed += !out.pass;
    std::cout << (out.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << " (" << std::fixed
              << std::setprecision(1) << secs << " s): " << out.detail.str() << std::endl;
  }
  return failed ? 1 : 0;
}
