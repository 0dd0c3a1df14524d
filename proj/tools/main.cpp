#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "mtpb/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mtpb;

namespace {

struct Common {
  std::string config;
  std::string profile = "default";
  std::optional<std::uint64_t> seed;
  std::string out = "runs/latest";
  std::string cache;
  std::vector<std::string> overrides;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--profile", c.profile, "Base settings before the config file")
      ->check(CLI::IsMember({"default", "desk"}));
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("-o,--out", c.out, "Run directory");
  app->add_option("--cache", c.cache, "Checkpoint cache directory (default: <out>/checkpoints)");
  app->add_option("--set", c.overrides, "Override a setting, e.g. --set meta.alpha=0.05")->take_all();
  app->add_flag("-v,--verbose", c.verbose, "Log stage progress");
}

// Applies "a.b.c=value"; the value is read as JSON when it parses, else as a
// string.
void apply_override(json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
  std::string ptr = "/" + kv.substr(0, eq);
  std::replace(ptr.begin(), ptr.end(), '.', '/');
  const std::string raw = kv.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  const json::json_pointer p(ptr);
  if (!j.contains(p)) throw std::invalid_argument("unknown setting '" + kv.substr(0, eq) + "'");
  j[p] = value;
}

ExperimentConfig resolve(const Common& c, const AblationFlags* flags = nullptr) {
  ExperimentConfig cfg = c.profile == "desk" ? ExperimentConfig::desk() : ExperimentConfig{};
  json j = to_json(cfg);
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    j.merge_patch(json::parse(in));
  }
  for (const auto& kv : c.overrides) apply_override(j, kv);
  cfg = config_from_json(j);
  if (c.seed) cfg.seed = *c.seed;
  if (flags) {
    cfg.ablation.no_meta |= flags->no_meta;
    cfg.ablation.no_st_decoder |= flags->no_st_decoder;
    cfg.ablation.short_only_patterns |= flags->short_only_patterns;
    cfg.ablation.no_reconstruction |= flags->no_reconstruction;
  }
  return cfg;
}

RunOptions options(const Common& c, Stage until) {
  RunOptions o;
  o.until = until;
  o.cache_dir = c.cache;
  o.verbose = c.verbose;
  return o;
}

void print_metrics(const MetricsReport& r) {
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& h : r.horizons) {
    std::cout << r.model << "  " << std::setw(4) << h.minutes << " min  RMSE " << h.rmse << "  MAE " << h.mae
              << "  MAPE ";
    if (h.mape)
      std::cout << *h.mape << "%";
    else
      std::cout << "n/a";
    std::cout << '\n';
  }
}

void print_run(const RunResult& r) {
  for (const auto& s : r.stages)
    if (s.status != "pending")
      std::cout << std::left << std::setw(11) << to_string(s.stage) << std::right << (s.cached ? " cached " : " ran    ")
                << std::fixed << std::setprecision(1) << s.seconds << " s\n";
  if (r.model) print_metrics(*r.model);
  if (r.ha) print_metrics(*r.ha);
  std::cout << "outputs in " << r.dir.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot traffic forecasting with pretrained pattern banks and meta-learned transfer"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate-synthetic", "Write a synthetic city corpus to disk");
  SyntheticSpec spec;
  std::string gen_out = "data/synthetic";
  gen->add_option("-o,--out", gen_out, "Corpus directory");
  gen->add_option("--cities", spec.num_cities);
  gen->add_option("--nodes", spec.nodes_per_city);
  gen->add_option("--days", spec.days);
  gen->add_option("--profiles", spec.num_profiles);
  gen->add_option("--noise", spec.noise_std);
  gen->add_option("--spatial-mix", spec.spatial_mix);
  gen->add_option("--interval", spec.interval_minutes);
  gen->add_option("--seed", spec.seed);

  Common common;
  AblationFlags flags;
  struct StageCommand {
    const char* name;
    const char* help;
    Stage until;
  };
  const StageCommand stage_commands[] = {
      {"pretrain", "Pretrain the masked patch autoencoder on the source cities", Stage::Pretrain},
      {"build-bank", "Cluster source embeddings into the multi-scale pattern bank", Stage::Bank},
      {"meta-train", "Reptile meta-training of the transfer model on source tasks", Stage::Meta},
      {"finetune", "Fine-tune on the target city's few-shot data", Stage::Finetune},
      {"evaluate", "Score the fine-tuned model and HA on the target test period", Stage::Evaluate},
      {"run", "Run every stage", Stage::Evaluate},
  };
  std::vector<std::pair<CLI::App*, Stage>> stage_apps;
  for (const auto& s : stage_commands) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, common);
    sub->add_flag("--no-meta", flags.no_meta, "Replace queried meta-knowledge with zeros");
    sub->add_flag("--no-st-decoder", flags.no_st_decoder, "Pretrain with a temporal-only decoder");
    sub->add_flag("--short-only-patterns", flags.short_only_patterns, "Keep only the single-patch scale");
    sub->add_flag("--no-reconstruction", flags.no_reconstruction, "Use the normalised given graph");
    stage_apps.emplace_back(sub, s.until);
  }
  auto* ablate = app.add_subcommand("ablate", "Run the full model and each ablation variant");
  add_common(ablate, common);
  auto* ha = app.add_subcommand("baseline-ha", "Historical-average baseline on the target test period");
  add_common(ha, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      std::vector<std::vector<int>> labels;
      const auto cities = generate_synthetic_corpus(spec, &labels);
      for (std::size_t c = 0; c < cities.size(); ++c) {
        const fs::path dir = fs::path(gen_out) / cities[c].name;
        save_city(cities[c], dir);
        std::ofstream lab(dir / "labels.csv");
        lab << "node,profile\n";
        for (std::size_t i = 0; i < labels[c].size(); ++i) lab << i << ',' << labels[c][i] << '\n';
      }
      std::cout << "wrote " << cities.size() << " cities to " << gen_out << '\n';
      return 0;
    }
    for (const auto& [sub, until] : stage_apps)
      if (sub->parsed()) {
        print_run(run_experiment(resolve(common, &flags), common.out, options(common, until)));
        return 0;
      }
    if (ablate->parsed()) {
      const AblationReport r = run_ablations(resolve(common), common.out, options(common, Stage::Evaluate));
      int failed = 0;
      for (std::size_t v = 0; v < r.variants.size(); ++v) {
        std::cout << "== " << r.variants[v] << '\n';
        if (r.metrics[v])
          print_metrics(*r.metrics[v]);
        else {
          std::cout << "failed: " << r.errors[v] << '\n';
          ++failed;
        }
      }
      std::cout << "summary in " << (fs::path(common.out) / "ablation.csv").string() << '\n';
      return failed ? 2 : 0;
    }
    if (ha->parsed()) {
      print_metrics(run_ha_baseline(resolve(common), common.out));
      return 0;
    }
  } catch (const StageError& e) {
    std::cerr << "stage " << to_string(e.stage()) << " failed: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
