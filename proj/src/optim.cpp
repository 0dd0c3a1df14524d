#include "mtpb/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <utility>

namespace mtpb::nn {

void adam_step(ParameterStore& store, const AdamConfig& cfg, std::string_view prefix) {
  const auto paths = store.paths(prefix);
  for (const auto& path : paths)
    if (!store.at(path).grad.allFinite())
      throw std::runtime_error("adam_step: non-finite gradient at " + path);

  const long step = store.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (const auto& path : paths) {
    Parameter& p = store.at(path);
    p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad;
    p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad.cwiseAbs2();
    if (cfg.weight_decay != 0.0) p.value *= (1.0 - cfg.lr * cfg.weight_decay);
    p.value.array() -= cfg.lr * (p.m.array() / bc1) / ((p.v.array() / bc2).sqrt() + cfg.eps);
  }
  store.set_step(step);
}

void sgd_step(ParameterStore& store, double lr, std::string_view prefix) {
  for (const auto& path : store.paths(prefix)) {
    Parameter& p = store.at(path);
    p.value -= lr * p.grad;
  }
}

namespace {

std::pair<double, std::uint64_t> evaluate(const LossFn& fn, ParameterStore& store) {
  Tape tape(false);
  const double v = fn(tape, store).scalar();
  return {v, tape.kink_signature()};
}

}  // namespace

GradCheckReport finite_diff_check(const LossFn& fn, ParameterStore& store,
                                  const GradCheckOptions& opts) {
  store.zero_grad();
  {
    Tape tape;
    Var loss = fn(tape, store);
    tape.backward(loss);
  }
  GradCheckReport report;
  const std::uint64_t base = evaluate(fn, store).second;
  std::mt19937_64 rng(opts.seed);
  for (const auto& path : store.paths(opts.prefix)) {
    Parameter& p = store.at(path);
    const Eigen::Index n = p.value.size();
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    if (coords.size() > opts.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    const Mat analytic = p.grad;
    for (Eigen::Index c : coords) {
      double& x = p.value.data()[c];
      const double saved = x;
      x = saved + opts.epsilon;
      // Fourth-order central stencil at offsets +/-eps and +/-2eps.
      double f[4];
      bool kinked = false;
      const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
      for (int k = 0; k < 4; ++k) {
        x = saved + offsets[k] * opts.epsilon;
        const auto [v, sig] = evaluate(fn, store);
        f[k] = v;
        kinked = kinked || sig != base;
      }
      x = saved;
      if (kinked) {
        ++report.coords_skipped;
        continue;
      }
      const double numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * opts.epsilon);
      const double a = analytic.data()[c];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      ++report.coords_checked;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = rel;
        report.worst_path = path;
        report.worst_index = c;
      }
    }
  }
  return report;
}

}  // namespace mtpb::nn
