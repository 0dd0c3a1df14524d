#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mtpb/aggregate.hpp"
#include "mtpb/experiment.hpp"

namespace py = pybind11;
using namespace mtpb;

namespace {

ExperimentConfig parse_config(const std::string& text) {
  return text.empty() ? ExperimentConfig{} : config_from_json(nlohmann::json::parse(text));
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::Data, Stage::Pretrain, Stage::Bank, Stage::Meta, Stage::Finetune, Stage::Evaluate})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown stage '" + name + "'");
}

py::dict metrics_dict(const MetricsReport& r) {
  py::dict out;
  out["model"] = r.model;
  out["seed"] = r.seed;
  py::list rows;
  for (const auto& h : r.horizons) {
    py::dict d;
    d["minutes"] = h.minutes;
    d["step"] = h.step;
    d["rmse"] = h.rmse;
    d["mae"] = h.mae;
    d["mape"] = h.mape ? py::cast(*h.mape) : py::none();
    d["count"] = h.count;
    rows.append(d);
  }
  out["horizons"] = rows;
  return out;
}

}  // namespace

PYBIND11_MODULE(_mtpb, m) {
  m.doc() = "Pattern-bank meta-transfer forecasting core";

  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);

  py::class_<CityDataset>(m, "City")
      .def(py::init<>())
      .def_readwrite("name", &CityDataset::name)
      .def_readwrite("adjacency", &CityDataset::adjacency)
      .def_readwrite("speed", &CityDataset::speed)
      .def_readwrite("interval_minutes", &CityDataset::interval_minutes)
      .def_readwrite("start_offset", &CityDataset::start_offset)
      .def_property_readonly("num_nodes", &CityDataset::num_nodes)
      .def_property_readonly("num_steps", &CityDataset::num_steps)
      .def("validate", &CityDataset::validate)
      .def("__repr__", [](const CityDataset& c) {
        return "<City " + c.name + ": " + std::to_string(c.num_nodes()) + " nodes, " +
               std::to_string(c.num_steps()) + " steps>";
      });

  m.def("load_city", &load_city, py::arg("dir"));
  m.def("save_city", &save_city, py::arg("city"), py::arg("dir"));
  m.def("resample", [](const CityDataset& c, int minutes) { return resample_to_base_interval(c, minutes); },
        py::arg("city"), py::arg("minutes") = 5);
  m.def(
      "generate_synthetic",
      [](int num_cities, int nodes, int days, int profiles, double noise_std, double spatial_mix,
         std::uint64_t seed) {
        SyntheticSpec s;
        s.num_cities = num_cities;
        s.nodes_per_city = nodes;
        s.days = days;
        s.num_profiles = profiles;
        s.noise_std = noise_std;
        s.spatial_mix = spatial_mix;
        s.seed = seed;
        std::vector<std::vector<int>> labels;
        auto cities = generate_synthetic_corpus(s, &labels);
        return py::make_tuple(cities, labels);
      },
      py::arg("num_cities") = 4, py::arg("nodes") = 20, py::arg("days") = 14, py::arg("profiles") = 3,
      py::arg("noise_std") = 2.0, py::arg("spatial_mix") = 0.6, py::arg("seed") = 7,
      "Synthetic corpus and the planted profile of every node.");

  m.def("default_config", [] { return to_json(ExperimentConfig{}).dump(); });
  m.def("desk_config", [] { return to_json(ExperimentConfig::desk()).dump(); });
  m.def("normalize_config", [](const std::string& text) { return to_json(parse_config(text)).dump(); },
        py::arg("config_json"), "Fills defaults and rejects unknown keys.");
  m.def("config_hash", [](const std::string& text) { return config_hash(parse_config(text)); },
        py::arg("config_json"));

  m.def(
      "run_experiment",
      [](const std::string& text, const std::filesystem::path& dir, const std::string& until,
         const std::filesystem::path& cache, bool verbose) {
        RunOptions o;
        o.until = parse_stage(until);
        o.cache_dir = cache;
        o.verbose = verbose;
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(parse_config(text), dir, o);
        }
        py::dict out;
        py::list stages;
        for (const auto& s : r.stages) {
          py::dict d;
          d["stage"] = to_string(s.stage);
          d["cached"] = s.cached;
          d["seconds"] = s.seconds;
          d["status"] = s.status;
          stages.append(d);
        }
        out["stages"] = stages;
        out["model"] = r.model ? py::object(metrics_dict(*r.model)) : py::none();
        out["ha"] = r.ha ? py::object(metrics_dict(*r.ha)) : py::none();
        return out;
      },
      py::arg("config_json"), py::arg("dir"), py::arg("until") = "evaluate", py::arg("cache_dir") = "",
      py::arg("verbose") = false);
  m.def(
      "run_ha_baseline",
      [](const std::string& text, const std::filesystem::path& dir) {
        return metrics_dict(run_ha_baseline(parse_config(text), dir));
      },
      py::arg("config_json"), py::arg("dir"));
  m.def(
      "run_ablations",
      [](const std::string& text, const std::filesystem::path& dir) {
        AblationReport r;
        {
          py::gil_scoped_release release;
          r = run_ablations(parse_config(text), dir);
        }
        py::dict out;
        for (std::size_t v = 0; v < r.variants.size(); ++v)
          out[py::str(r.variants[v])] = r.metrics[v] ? py::object(metrics_dict(*r.metrics[v])) : py::str(r.errors[v]);
        return out;
      },
      py::arg("config_json"), py::arg("dir"));

  m.def(
      "compute_metrics",
      [](const std::vector<Mat>& predictions, const std::vector<Mat>& truths, const std::vector<int>& horizons,
         int interval) {
        if (predictions.size() != truths.size())
          throw std::invalid_argument("predictions and truths differ in length");
        std::vector<ForecastRecord> recs(predictions.size());
        for (std::size_t i = 0; i < recs.size(); ++i) {
          recs[i].prediction = predictions[i];
          recs[i].truth = truths[i];
        }
        return metrics_dict(compute_metrics(recs, horizons, interval));
      },
      py::arg("predictions"), py::arg("truths"), py::arg("horizons_min"), py::arg("interval_minutes") = 5,
      "Each prediction and truth is nodes x horizon.");
  m.def(
      "historical_average",
      [](const CityDataset& c, long train_begin, long train_end, long origin, int horizon) {
        return HistoricalAverage(c, {train_begin, train_end}).forecast(origin, horizon);
      },
      py::arg("city"), py::arg("train_begin"), py::arg("train_end"), py::arg("origin"), py::arg("horizon"));

  m.def(
      "kmeans_cosine",
      [](const Mat& points, int k, std::uint64_t seed, int max_iter, int restarts) {
        KMeansOptions o;
        o.max_iter = max_iter;
        o.restarts = restarts;
        auto r = kmeans_cosine(points, k, seed, o);
        return py::make_tuple(r.centroids, r.assignments, r.inertia);
      },
      py::arg("points"), py::arg("k"), py::arg("seed") = 0, py::arg("max_iter") = 100, py::arg("restarts") = 1,
      "Returns (centroids, assignments, inertia trace).");
  m.def("silhouette", &silhouette, py::arg("points"), py::arg("labels"), py::arg("seed") = 0,
        py::arg("max_points") = 5000);
  m.def("adjusted_rand_index", &adjusted_rand_index, py::arg("a"), py::arg("b"));

  m.def(
      "reconstruct_graph",
      [](const Mat& z, const Mat& a, const Mat& a_prime, double gamma) {
        nn::Tape t(false);
        auto r = reconstruct_graph(t.constant(z), t.constant(a), t.constant(a_prime), gamma);
        return py::make_tuple(r.c.value(), r.a_hat.value(), r.a_used.value());
      },
      py::arg("z"), py::arg("a"), py::arg("a_prime"), py::arg("gamma") = 10.0, "Returns (C, A_hat, A_used).");
  m.def("row_stochastic", &row_stochastic, py::arg("a"));
}
