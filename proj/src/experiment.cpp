#include "mtpb/experiment.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace mtpb {

namespace fs = std::filesystem;
using json = nlohmann::json;

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.layers.d = 32;
  c.layers.d_q = 32;
  c.layers.heads = 4;
  c.layers.ffn = 64;
  c.pretrain_lr = 1e-3;
  c.pretrain_epochs = 30;
  c.meta.alpha = 0.05;
  c.meta.beta = 0.05;
  c.meta.finetune_epochs = 10;
  c.train_stride = 12;
  c.eval_stride = 12;
  return c;
}

PretrainConfig ExperimentConfig::pretrain_config() const {
  PretrainConfig p;
  p.model.layers = layers;
  p.model.patch_len = patch_len;
  p.model.window_len = window_len;
  p.model.variant = ablation.no_st_decoder ? DecoderVariant::T : decoder;
  p.mask_ratio = mask_ratio;
  p.lr = pretrain_lr;
  p.weight_decay = pretrain_weight_decay;
  p.epochs = pretrain_epochs;
  p.patience = pretrain_patience;
  p.seed = seed;
  return p;
}

BankConfig ExperimentConfig::bank_config() const {
  BankConfig b;
  b.scales = ablation.short_only_patterns ? std::vector<int>{1} : scales;
  b.k = k;
  b.seed = seed;
  b.kmeans = kmeans;
  b.silhouette_max_points = silhouette_max_points;
  return b;
}

TransferConfig ExperimentConfig::transfer_config() const {
  TransferConfig t;
  t.layers = layers;
  t.patch_len = patch_len;
  t.window_len = window_len;
  t.horizon = horizon;
  t.scales = bank_config().scales;
  t.k = k;
  t.gamma = gamma;
  t.tcn_blocks = tcn_blocks;
  t.raw_scores = raw_scores;
  t.query_with_embeddings = query_with_embeddings;
  t.no_meta = ablation.no_meta;
  t.no_reconstruction = ablation.no_reconstruction;
  return t;
}

void ExperimentConfig::validate() const {
  if (corpus_dir.empty()) synthetic.validate();
  if (few_shot_days < 1) throw std::invalid_argument("few_shot_days must be at least 1");
  if (base_interval <= 0) throw std::invalid_argument("base interval must be positive");
  pretrain_config().model.validate();
  transfer_config().validate();
  meta.validate();
  if (train_stride < 1 || eval_stride < 1) throw std::invalid_argument("origin strides must be positive");
  if (k < 1) throw std::invalid_argument("pattern count must be positive");
  for (int h : horizons)
    if (horizon_step(h, base_interval) > horizon)
      throw std::invalid_argument("evaluation horizon " + std::to_string(h) + " min exceeds the forecast length");
}

namespace {

json layers_json(const nn::LayerSpec& l) {
  return {{"d", l.d},         {"d_q", l.d_q},
          {"heads", l.heads}, {"ffn", l.ffn},
          {"encoder_depth", l.encoder_depth}, {"decoder_depth", l.decoder_depth}};
}

// Reads the keys of `j` into the matching fields, rejecting unknown keys.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw std::invalid_argument("unknown config key '" + where_ + "." + key + "'");
  }
  template <typename T>
  void operator()(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config key '" + where_ + "." + key + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ExperimentConfig& c) {
  const auto& s = c.synthetic;
  return {
      {"seed", c.seed},
      {"data",
       {{"corpus_dir", c.corpus_dir},
        {"target_city", c.target_city},
        {"base_interval_minutes", c.base_interval},
        {"few_shot_days", c.few_shot_days},
        {"synthetic",
         {{"num_cities", s.num_cities},
          {"nodes_per_city", s.nodes_per_city},
          {"days", s.days},
          {"num_profiles", s.num_profiles},
          {"noise_std", s.noise_std},
          {"spatial_mix", s.spatial_mix},
          {"seed", s.seed},
          {"interval_minutes", s.interval_minutes}}}}},
      {"model", {{"layers", layers_json(c.layers)}, {"window_len", c.window_len}, {"patch_len", c.patch_len}}},
      {"pretrain",
       {{"decoder", to_string(c.decoder)},
        {"mask_ratio", c.mask_ratio},
        {"lr", c.pretrain_lr},
        {"weight_decay", c.pretrain_weight_decay},
        {"epochs", c.pretrain_epochs},
        {"patience", c.pretrain_patience}}},
      {"patterns",
       {{"scales", c.scales},
        {"k", c.k},
        {"kmeans_max_iter", c.kmeans.max_iter},
        {"kmeans_tol", c.kmeans.tol},
        {"kmeans_restarts", c.kmeans.restarts},
        {"silhouette_max_points", c.silhouette_max_points}}},
      {"transfer",
       {{"horizon", c.horizon},
        {"gamma", c.gamma},
        {"tcn_blocks", c.tcn_blocks},
        {"raw_scores", c.raw_scores},
        {"query_with_embeddings", c.query_with_embeddings}}},
      {"meta",
       {{"alpha", c.meta.alpha},
        {"beta", c.meta.beta},
        {"update_step", c.meta.update_step},
        {"meta_epochs", c.meta.meta_epochs},
        {"tasks_per_epoch", c.meta.tasks_per_epoch},
        {"batch_size", c.meta.batch_size}}},
      {"finetune",
       {{"epochs", c.meta.finetune_epochs},
        {"lr", c.meta.finetune_lr},
        {"weight_decay", c.meta.finetune_weight_decay},
        {"train_stride", c.train_stride}}},
      {"evaluate", {{"horizons_min", c.horizons}, {"eval_stride", c.eval_stride}}},
      {"ablation",
       {{"no_meta", c.ablation.no_meta},
        {"no_st_decoder", c.ablation.no_st_decoder},
        {"short_only_patterns", c.ablation.short_only_patterns},
        {"no_reconstruction", c.ablation.no_reconstruction}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader top(j, "config");
  top("seed", c.seed);
  if (const json* d = top.child("data")) {
    Reader r(*d, "data");
    r("corpus_dir", c.corpus_dir);
    r("target_city", c.target_city);
    r("base_interval_minutes", c.base_interval);
    r("few_shot_days", c.few_shot_days);
    if (const json* s = r.child("synthetic")) {
      Reader q(*s, "data.synthetic");
      q("num_cities", c.synthetic.num_cities);
      q("nodes_per_city", c.synthetic.nodes_per_city);
      q("days", c.synthetic.days);
      q("num_profiles", c.synthetic.num_profiles);
      q("noise_std", c.synthetic.noise_std);
      q("spatial_mix", c.synthetic.spatial_mix);
      q("seed", c.synthetic.seed);
      q("interval_minutes", c.synthetic.interval_minutes);
    }
  }
  if (const json* m = top.child("model")) {
    Reader r(*m, "model");
    r("window_len", c.window_len);
    r("patch_len", c.patch_len);
    if (const json* l = r.child("layers")) {
      Reader q(*l, "model.layers");
      q("d", c.layers.d);
      q("d_q", c.layers.d_q);
      q("heads", c.layers.heads);
      q("ffn", c.layers.ffn);
      q("encoder_depth", c.layers.encoder_depth);
      q("decoder_depth", c.layers.decoder_depth);
    }
  }
  if (const json* p = top.child("pretrain")) {
    Reader r(*p, "pretrain");
    std::string variant = to_string(c.decoder);
    r("decoder", variant);
    c.decoder = decoder_variant_from_string(variant);
    r("mask_ratio", c.mask_ratio);
    r("lr", c.pretrain_lr);
    r("weight_decay", c.pretrain_weight_decay);
    r("epochs", c.pretrain_epochs);
    r("patience", c.pretrain_patience);
  }
  if (const json* p = top.child("patterns")) {
    Reader r(*p, "patterns");
    r("scales", c.scales);
    r("k", c.k);
    r("kmeans_max_iter", c.kmeans.max_iter);
    r("kmeans_tol", c.kmeans.tol);
    r("kmeans_restarts", c.kmeans.restarts);
    r("silhouette_max_points", c.silhouette_max_points);
  }
  if (const json* t = top.child("transfer")) {
    Reader r(*t, "transfer");
    r("horizon", c.horizon);
    r("gamma", c.gamma);
    r("tcn_blocks", c.tcn_blocks);
    r("raw_scores", c.raw_scores);
    r("query_with_embeddings", c.query_with_embeddings);
  }
  if (const json* m = top.child("meta")) {
    Reader r(*m, "meta");
    r("alpha", c.meta.alpha);
    r("beta", c.meta.beta);
    r("update_step", c.meta.update_step);
    r("meta_epochs", c.meta.meta_epochs);
    r("tasks_per_epoch", c.meta.tasks_per_epoch);
    r("batch_size", c.meta.batch_size);
  }
  if (const json* f = top.child("finetune")) {
    Reader r(*f, "finetune");
    r("epochs", c.meta.finetune_epochs);
    r("lr", c.meta.finetune_lr);
    r("weight_decay", c.meta.finetune_weight_decay);
    r("train_stride", c.train_stride);
  }
  if (const json* e = top.child("evaluate")) {
    Reader r(*e, "evaluate");
    r("horizons_min", c.horizons);
    r("eval_stride", c.eval_stride);
  }
  if (const json* a = top.child("ablation")) {
    Reader r(*a, "ablation");
    r("no_meta", c.ablation.no_meta);
    r("no_st_decoder", c.ablation.no_st_decoder);
    r("short_only_patterns", c.ablation.short_only_patterns);
    r("no_reconstruction", c.ablation.no_reconstruction);
  }
  return c;
}

ExperimentConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read config " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument(file.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(to_json(cfg).dump()); }

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Data: return "data";
    case Stage::Pretrain: return "pretrain";
    case Stage::Bank: return "build-bank";
    case Stage::Meta: return "meta-train";
    case Stage::Finetune: return "finetune";
    case Stage::Evaluate: return "evaluate";
  }
  return "?";
}

std::vector<std::pair<Stage, std::uint64_t>> stage_config_hashes(const ExperimentConfig& cfg) {
  const json j = to_json(cfg);
  const json& ab = j["ablation"];
  auto h = [](const json& part) { return fnv1a(part.dump()); };
  return {
      {Stage::Data, h(j["data"])},
      {Stage::Pretrain, h({j["seed"], j["model"], j["pretrain"], ab["no_st_decoder"]})},
      {Stage::Bank, h({j["seed"], j["patterns"], ab["short_only_patterns"]})},
      {Stage::Meta, h({j["seed"], j["transfer"], j["meta"], ab["no_meta"], ab["no_reconstruction"]})},
      {Stage::Finetune, h({j["seed"], j["finetune"]})},
      {Stage::Evaluate, h(j["evaluate"])},
  };
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::uint64_t derive_seed(std::uint64_t seed, const char* tag) { return fnv1a(std::string_view(tag), seed * 0x9e3779b97f4a7c15ULL); }

struct Corpus {
  std::vector<CityDataset> sources;
  CityDataset target;
};

Corpus load_corpus(const ExperimentConfig& cfg) {
  std::vector<CityDataset> cities;
  if (cfg.corpus_dir.empty()) {
    cities = generate_synthetic_corpus(cfg.synthetic);
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(cfg.corpus_dir))
      if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) cities.push_back(load_city(d));
  }
  if (cities.size() < 2) throw std::invalid_argument("the corpus needs a target and at least one source city");
  for (auto& c : cities) c = resample_to_base_interval(c, cfg.base_interval);
  std::size_t target = cities.size() - 1;
  if (!cfg.target_city.empty()) {
    auto it = std::find_if(cities.begin(), cities.end(), [&](const CityDataset& c) { return c.name == cfg.target_city; });
    if (it == cities.end()) throw std::invalid_argument("target city '" + cfg.target_city + "' not in the corpus");
    target = static_cast<std::size_t>(it - cities.begin());
  }
  Corpus out;
  for (std::size_t i = 0; i < cities.size(); ++i)
    if (i == target)
      out.target = cities[i];
    else
      out.sources.push_back(cities[i]);
  return out;
}

void copy_into(const fs::path& from, const fs::path& to) {
  fs::create_directories(to.parent_path());
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

// Writes through a temporary name so an interrupted stage never leaves a
// checkpoint that looks complete.
template <typename F>
void write_atomically(const fs::path& file, F&& write) {
  fs::path tmp = file;
  tmp += ".tmp";
  write(tmp);
  fs::rename(tmp, file);
}

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, fs::path dir, const RunOptions& opts)
      : cfg_(cfg), dir_(std::move(dir)), opts_(opts) {
    cache_ = opts.cache_dir.empty() ? dir_ / "checkpoints" : opts.cache_dir;
    for (const char* sub : {"traces", "matrices", "checkpoints"}) fs::create_directories(dir_ / sub);
    fs::create_directories(cache_);
    std::ofstream(dir_ / "config.json") << to_json(cfg_).dump(2) << '\n';
    std::uint64_t chain = config_hash_seed();
    for (const auto& [stage, h] : stage_config_hashes(cfg_)) {
      chain = fnv1a(&h, sizeof h, chain);
      StageRecord r;
      r.stage = stage;
      r.config_hash = h;
      r.chain_hash = chain;
      r.status = "pending";
      result_.stages.push_back(r);
    }
    result_.dir = dir_;
  }

  RunResult run() {
    const Stage order[] = {Stage::Data, Stage::Pretrain, Stage::Bank, Stage::Meta, Stage::Finetune, Stage::Evaluate};
    for (Stage s : order) {
      step(s);
      if (s == opts_.until) break;
    }
    write_manifest("complete");
    return result_;
  }

 private:
  static std::uint64_t config_hash_seed() { return fnv1a("mtpb-run"); }

  StageRecord& record(Stage s) { return result_.stages[static_cast<std::size_t>(s)]; }
  fs::path cached(Stage s, const std::string& suffix) {
    return cache_ / (to_string(s) + "-" + hex(record(s).chain_hash) + suffix);
  }

  void log(const std::string& msg) const {
    if (opts_.verbose) std::cerr << "[mtpb] " << msg << std::endl;
  }

  void step(Stage s) {
    StageRecord& rec = record(s);
    rec.status = "running";
    write_manifest("running");
    log(to_string(s) + " ...");
    const auto t0 = std::chrono::steady_clock::now();
    try {
      switch (s) {
        case Stage::Data: data(); break;
        case Stage::Pretrain: pretrain_stage(); break;
        case Stage::Bank: bank_stage(); break;
        case Stage::Meta: meta_stage(); break;
        case Stage::Finetune: finetune_stage(); break;
        case Stage::Evaluate: evaluate_stage(); break;
      }
    } catch (const std::exception& e) {
      rec.status = std::string("failed: ") + e.what();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_manifest("failed");
      throw StageError(s, e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.status = "ok";
    log(to_string(s) + (rec.cached ? " (cached)" : "") + " done in " + std::to_string(rec.seconds) + " s");
    write_manifest("running");
  }

  void write_manifest(const std::string& status) const {
    json stages = json::array();
    for (const auto& r : result_.stages)
      stages.push_back({{"stage", to_string(r.stage)},
                        {"config_hash", hex(r.config_hash)},
                        {"chain_hash", hex(r.chain_hash)},
                        {"cached", r.cached},
                        {"seconds", r.seconds},
                        {"status", r.status}});
    const json& j = to_json(cfg_);
    json m = {{"status", status},
              {"config_hash", hex(config_hash(cfg_))},
              {"seed", cfg_.seed},
              {"ablation", j["ablation"]},
              {"stages", stages}};
    std::ofstream(dir_ / "manifest.json") << m.dump(2) << '\n';
  }

  void data() {
    corpus_ = load_corpus(cfg_);
    split_ = split_few_shot(corpus_.target, cfg_.few_shot_days, cfg_.window_len);
    for (const auto& c : corpus_.sources) scaled_sources_.push_back(apply_scaler(c, source_scaler(c)));
    target_scaler_ = fit_scaler(corpus_.target, {0, split_.few_shot.end});
    scaled_target_ = apply_scaler(corpus_.target, target_scaler_);
  }

  void pretrain_stage() {
    const PretrainConfig pc = cfg_.pretrain_config();
    pretrain_model_.emplace(pc.model);
    const fs::path ckpt = cached(Stage::Pretrain, ".bin"), trace = cached(Stage::Pretrain, ".csv");
    if (fs::exists(ckpt) && fs::exists(trace)) {
      params_.load(ckpt);
      record(Stage::Pretrain).cached = true;
    } else {
      PretrainResult r = pretrain(corpus_.sources, pc);
      write_atomically(trace, [&](const fs::path& p) { write_pretrain_trace(r.trace, p); });
      write_atomically(ckpt, [&](const fs::path& p) { r.store.save(p, "pretrain"); });
      params_.merge_from(r.store, "pretrain");
    }
    copy_into(trace, dir_ / "traces" / "pretrain.csv");
    copy_into(ckpt, dir_ / "checkpoints" / "pretrain.bin");
  }

  void bank_stage() {
    const fs::path file = cached(Stage::Bank, ".bin");
    const fs::path summary = cached(Stage::Bank, "-summary.csv"), trace = cached(Stage::Bank, "-trace.csv");
    if (fs::exists(file) && fs::exists(summary) && fs::exists(trace)) {
      bank_ = PatternBank::load(file);
      record(Stage::Bank).cached = true;
    } else {
      const CorpusEmbedding emb = embed_corpus(corpus_.sources, *pretrain_model_, params_);
      auto [bank, report] = build_bank(emb, cfg_.bank_config(), params_.hash("pretrain"));
      write_atomically(summary, [&](const fs::path& p) {
        write_atomically(trace, [&](const fs::path& q) { write_cluster_report(report, p, q); });
      });
      write_atomically(file, [&](const fs::path& p) { bank.save(p); });
      bank_ = std::move(bank);
    }
    copy_into(summary, dir_ / "traces" / "cluster_summary.csv");
    copy_into(trace, dir_ / "traces" / "cluster_trace.csv");
    copy_into(file, dir_ / "checkpoints" / "bank.bin");
  }

  QueryEmbedder embedder() {
    if (!cfg_.query_with_embeddings) return {};
    return [this](const PatchSet& ps, const Mat& a) { return pretrain_model_->embed(params_, ps, a); };
  }

  void meta_stage() {
    model_.emplace(cfg_.transfer_config());
    const fs::path ckpt = cached(Stage::Meta, ".bin"), trace = cached(Stage::Meta, ".csv");
    params_.erase(TransferModel::kPrefix);
    if (fs::exists(ckpt) && fs::exists(trace)) {
      params_.load(ckpt);
      record(Stage::Meta).cached = true;
    } else {
      std::mt19937_64 rng(derive_seed(cfg_.seed, "transfer-init"));
      model_->init(params_, rng);
      const auto t = meta_train(params_, *model_, bank_, scaled_sources_, cfg_.meta,
                                derive_seed(cfg_.seed, "meta-train"), embedder());
      write_atomically(trace, [&](const fs::path& p) { write_meta_trace(t, p); });
      write_atomically(ckpt, [&](const fs::path& p) { params_.save(p, TransferModel::kPrefix); });
    }
    copy_into(trace, dir_ / "traces" / "meta.csv");
    copy_into(ckpt, dir_ / "checkpoints" / "meta.bin");
  }

  void finetune_stage() {
    const fs::path ckpt = cached(Stage::Finetune, ".bin"), trace = cached(Stage::Finetune, ".csv");
    if (fs::exists(ckpt) && fs::exists(trace)) {
      params_.load(ckpt);
      record(Stage::Finetune).cached = true;
    } else {
      const auto origins = forecast_origins(split_.few_shot.begin, split_.few_shot.end, cfg_.window_len,
                                            cfg_.horizon, cfg_.train_stride);
      const auto t = finetune(params_, *model_, bank_, scaled_target_, origins, {}, cfg_.meta,
                              derive_seed(cfg_.seed, "finetune"), embedder());
      write_atomically(trace, [&](const fs::path& p) { write_finetune_trace(t, p); });
      write_atomically(ckpt, [&](const fs::path& p) { params_.save(p, TransferModel::kPrefix); });
    }
    copy_into(trace, dir_ / "traces" / "finetune.csv");
    copy_into(ckpt, dir_ / "checkpoints" / "final.bin");
  }

  void evaluate_stage() {
    const auto origins =
        forecast_origins(split_.test.begin, split_.test.end, cfg_.window_len, cfg_.horizon, cfg_.eval_stride);
    if (origins.empty()) throw std::invalid_argument("the test period holds no complete forecast window");
    const auto emb = embedder();
    std::vector<ForecastRecord> records;
    for (std::size_t o = 0; o < origins.size(); ++o) {
      const ForecastSample s = make_sample(scaled_target_, origins[o], model_->config(), emb);
      nn::Tape tape(false);
      const auto f = model_->forward(tape, params_, bank_, s, scaled_target_.adjacency);
      ForecastRecord r;
      r.origin = origins[o];
      r.prediction = f.prediction.value().unaryExpr([&](double z) { return target_scaler_.inverse(z); });
      r.truth = corpus_.target.speed.middleRows(origins[o], cfg_.horizon).transpose();
      records.push_back(std::move(r));
      if (o == 0) dump_matrices(f);
    }
    MetricsReport m = compute_metrics(records, cfg_.horizons, cfg_.base_interval);
    m.model = "MTPB";
    m.seed = cfg_.seed;
    MetricsReport ha = compute_metrics(
        ha_baseline(corpus_.target, {0, split_.few_shot.end}, origins, cfg_.horizon), cfg_.horizons,
        cfg_.base_interval);
    ha.model = "HA";
    ha.seed = cfg_.seed;
    write_metrics_csv({m, ha}, dir_ / "metrics.csv");
    write_forecast_dump(records, dir_ / "forecasts.csv");
    result_.model = m;
    result_.ha = ha;
  }

  void dump_matrices(const TransferModel::Forward& f) const {
    const fs::path m = dir_ / "matrices";
    const Mat a = row_stochastic(scaled_target_.adjacency);
    write_matrix_csv(a, m / "A.csv");
    for (const char* stale : {"A_prime.csv", "C.csv", "A_hat.csv", "A_used.csv"}) fs::remove(m / stale);
    if (cfg_.ablation.no_reconstruction) {
      write_matrix_csv(a, m / "A_hat.csv");
      return;
    }
    write_matrix_csv(f.a_prime.value(), m / "A_prime.csv");
    write_matrix_csv(f.graph.c.value(), m / "C.csv");
    write_matrix_csv(f.graph.a_hat.value(), m / "A_hat.csv");
    write_matrix_csv(f.a_used.value(), m / "A_used.csv");
  }

  const ExperimentConfig& cfg_;
  fs::path dir_, cache_;
  RunOptions opts_;
  RunResult result_;

  Corpus corpus_;
  FewShotSplit split_;
  std::vector<CityDataset> scaled_sources_;
  Scaler target_scaler_;
  CityDataset scaled_target_;
  ParameterStore params_;
  std::optional<PatchAutoencoder> pretrain_model_;
  PatternBank bank_;
  std::optional<TransferModel> model_;
};

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const fs::path& dir, const RunOptions& opts) {
  cfg.validate();
  Runner runner(cfg, dir, opts);
  return runner.run();
}

MetricsReport run_ha_baseline(const ExperimentConfig& cfg, const fs::path& dir) {
  cfg.validate();
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << '\n';
  const Corpus corpus = load_corpus(cfg);
  const FewShotSplit split = split_few_shot(corpus.target, cfg.few_shot_days, cfg.window_len);
  const auto origins =
      forecast_origins(split.test.begin, split.test.end, cfg.window_len, cfg.horizon, cfg.eval_stride);
  MetricsReport ha = compute_metrics(ha_baseline(corpus.target, {0, split.few_shot.end}, origins, cfg.horizon),
                                     cfg.horizons, cfg.base_interval);
  ha.model = "HA";
  ha.seed = cfg.seed;
  write_metrics_csv({ha}, dir / "metrics.csv");
  return ha;
}

std::vector<std::pair<std::string, ExperimentConfig>> ablation_variants(const ExperimentConfig& base) {
  ExperimentConfig full = base;
  full.ablation = {};
  std::vector<std::pair<std::string, ExperimentConfig>> out{{"full", full}};
  auto add = [&](const char* name, bool AblationFlags::*flag) {
    ExperimentConfig c = full;
    c.ablation.*flag = true;
    out.emplace_back(name, c);
  };
  add("no_meta", &AblationFlags::no_meta);
  add("no_st_decoder", &AblationFlags::no_st_decoder);
  add("short_only_patterns", &AblationFlags::short_only_patterns);
  add("no_reconstruction", &AblationFlags::no_reconstruction);
  return out;
}

AblationReport run_ablations(const ExperimentConfig& base, const fs::path& dir, const RunOptions& opts) {
  RunOptions shared = opts;
  shared.until = Stage::Evaluate;
  if (shared.cache_dir.empty()) shared.cache_dir = dir / "cache";
  AblationReport report;
  for (const auto& [name, cfg] : ablation_variants(base)) {
    report.variants.push_back(name);
    try {
      RunResult r = run_experiment(cfg, dir / name, shared);
      report.metrics.push_back(r.model);
      report.errors.emplace_back();
    } catch (const std::exception& e) {
      report.metrics.emplace_back();
      report.errors.emplace_back(e.what());
    }
  }
  std::ofstream out(dir / "ablation.csv");
  out << std::setprecision(17) << "variant,horizon_min,rmse,mae,mape,delta_rmse_vs_full,error\n";
  const auto& full = report.metrics.front();
  for (std::size_t v = 0; v < report.variants.size(); ++v) {
    if (!report.metrics[v]) {
      std::string err = report.errors[v];
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out << report.variants[v] << ",,,,,," << err << '\n';
      continue;
    }
    for (const auto& h : report.metrics[v]->horizons) {
      out << report.variants[v] << ',' << h.minutes << ',' << h.rmse << ',' << h.mae << ',';
      if (h.mape) out << *h.mape;
      out << ',';
      if (full) out << h.rmse - full->at_minutes(h.minutes).rmse;
      out << ",\n";
    }
  }
  return report;
}

}  // namespace mtpb
