#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

#include "mtpb/params.hpp"
#include "mtpb/tape.hpp"

namespace mtpb::nn {

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam step with decoupled weight decay over every parameter under
/// `prefix`, then increments the store's step counter. A non-finite gradient
/// throws std::runtime_error naming the parameter path, before any update.
void adam_step(ParameterStore& store, const AdamConfig& cfg, std::string_view prefix = {});

/// Plain gradient descent: value -= lr * grad, under `prefix`.
void sgd_step(ParameterStore& store, double lr, std::string_view prefix = {});

/// Builds a scalar loss on the given tape from parameters in the store.
using LossFn = std::function<Var(Tape&, ParameterStore&)>;

struct GradCheckOptions {
  double epsilon = 1e-4;
  /// Coordinates per parameter tensor; larger tensors are sampled (seeded).
  std::size_t max_coords_per_tensor = 64;
  /// Denominator floor of the relative error.
  double abs_floor = 1e-6;
  unsigned seed = 0;
  std::string prefix;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_path;
  Eigen::Index worst_index = -1;
  std::size_t coords_checked = 0;
  /// Coordinates whose perturbation crossed a ReLU kink; their central
  /// difference does not estimate the derivative and they are not scored.
  std::size_t coords_skipped = 0;
};

/// Compares analytic gradients against fourth-order central differences
/// (offsets +/-epsilon and +/-2 epsilon). The relative
/// error of a coordinate is |g - n| / max(|g|, |n|, abs_floor). Coordinates
/// whose +/- epsilon evaluations change the kink signature are skipped.
GradCheckReport finite_diff_check(const LossFn& fn, ParameterStore& store,
                                  const GradCheckOptions& opts = {});

}  // namespace mtpb::nn
