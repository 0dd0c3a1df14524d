#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <utility>

#include "mtpb/city.hpp"

namespace mtpb {

namespace {

double bump(double h, double centre, double width) {
  const double z = (h - centre) / width;
  return std::exp(-0.5 * z * z);
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Sharp onset at `at`, exponential recovery with time constant `tau`.
double onset_decay(double h, double at, double sharpness, double tau) {
  return logistic((h - at) / sharpness) * std::exp(-std::max(0.0, h - at) / tau);
}

}  // namespace

double profile_shape(int profile, double hour_of_week, std::uint64_t seed) {
  const double wrapped = std::fmod(std::fmod(hour_of_week, 168.0) + 168.0, 168.0);
  const int day = static_cast<int>(wrapped / 24.0);
  const double h = wrapped - 24.0 * day;
  const double weekday = day < 5 ? 1.0 : 0.6;
  double dip = 0.0;
  double level = 1.0;
  switch (profile) {
    case 0:  // commuter: rapid morning rise of congestion, broad evening peak
      dip = 0.6 * onset_decay(h, 7.0, 0.15, 1.6) + 0.45 * bump(h, 17.5, 1.2);
      break;
    case 1:  // evening drop with rebound and post-rise fluctuation
      level = 0.92;
      dip = 0.65 * bump(h, 18.0, 0.8) - 0.08 * bump(h, 20.0, 0.6) -
            0.06 * std::sin(2.0 * M_PI * (h - 19.5) / 0.75) * bump(h, 21.5, 1.0);
      break;
    case 2:  // midday plateau with a sharp afternoon drop-rebound
      dip = 0.4 * bump(h, 12.5, 2.2) + 0.35 * onset_decay(h, 15.0, 0.08, 0.4);
      break;
    default: {
      std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(profile));
      std::uniform_real_distribution<double> centre(6.0, 20.0), width(0.7, 2.0), depth(0.3, 0.6);
      for (int b = 0; b < 2; ++b) {
        const double c = centre(rng), w = width(rng), dd = depth(rng);
        dip += dd * bump(h, c, w);
      }
    }
  }
  return std::clamp(level - weekday * dip, 0.0, 1.0);
}

void SyntheticSpec::validate() const {
  if (num_cities <= 0 || nodes_per_city <= 0 || days <= 0 || num_profiles <= 0)
    throw std::invalid_argument("SyntheticSpec: counts must be positive");
  if (noise_std < 0.0) throw std::invalid_argument("SyntheticSpec: noise_std must be nonnegative");
  if (spatial_mix < 0.0 || spatial_mix > 1.0)
    throw std::invalid_argument("SyntheticSpec: spatial_mix must lie in [0,1]");
  if (interval_minutes <= 0 || 60 % interval_minutes != 0)
    throw std::invalid_argument("SyntheticSpec: interval must divide an hour");
}

std::vector<CityDataset> generate_synthetic_corpus(const SyntheticSpec& spec,
                                                   std::vector<std::vector<int>>* labels) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const int n = spec.nodes_per_city;
  const int spd = 1440 / spec.interval_minutes;
  const long steps = static_cast<long>(spec.days) * spd;
  const int np = spec.num_profiles;

  // Shapes are shared by every city; tabulate once per week step.
  const long week = 7L * spd;
  Mat shapes(week, np);
  for (long s = 0; s < week; ++s)
    for (int p = 0; p < np; ++p)
      shapes(s, p) = profile_shape(p, 24.0 * static_cast<double>(s) / spd, spec.seed);

  std::vector<CityDataset> cities;
  if (labels) labels->clear();
  for (int c = 0; c < spec.num_cities; ++c) {
    CityDataset city;
    city.name = "synthetic-" + std::to_string(c);
    city.interval_minutes = spec.interval_minutes;
    city.start_offset = static_cast<long>(c % 7) * spd;

    // Ring lattice (two neighbours per side) plus a few random chords.
    city.adjacency = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int k = 1; k <= 2 && k < n; ++k) {
        const int j = (i + k) % n;
        if (j != i) city.adjacency(i, j) = city.adjacency(j, i) = 1.0;
      }
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (int e = 0; e < n / 10; ++e) {
      const int a = pick(rng), b = pick(rng);
      if (a != b) city.adjacency(a, b) = city.adjacency(b, a) = 1.0;
    }

    const double free_flow = 40.0 + 30.0 * unit(rng);
    const double depth = 0.35 + 0.25 * unit(rng);
    const int rotation = pick(rng);

    Mat weights = Mat::Zero(n, np);
    std::vector<int> city_labels(n);
    for (int i = 0; i < n; ++i) {
      const int label = static_cast<int>((static_cast<long>((i + rotation) % n) * np) / n);
      if (np == 1) {
        weights(i, 0) = 1.0;
        continue;
      }
      double rest = 0.0;
      for (int p = 0; p < np; ++p)
        if (p != label) rest += (weights(i, p) = -std::log(1.0 - unit(rng)));
      for (int p = 0; p < np; ++p)
        if (p != label) weights(i, p) *= 0.1 / rest;
      weights(i, label) = 0.9;
    }
    Vec jitter(n);
    for (int i = 0; i < n; ++i) jitter(i) = 0.9 + 0.2 * unit(rng);

    Mat x(steps, n);
    for (long t = 0; t < steps; ++t) {
      const long ws = (city.start_offset + t) % week;
      for (int i = 0; i < n; ++i) {
        const double s = shapes.row(ws).dot(weights.row(i));
        x(t, i) = free_flow * jitter(i) * (1.0 - depth * (1.0 - s));
      }
    }

    if (spec.noise_std > 0.0) {
      constexpr double phi = 0.97;
      const double innov = spec.noise_std * std::sqrt(1.0 - phi * phi);
      for (int i = 0; i < n; ++i) {
        double state = spec.noise_std * gauss(rng);
        for (long t = 0; t < steps; ++t) {
          state = phi * state + innov * gauss(rng);
          x(t, i) += state;
        }
      }
    }

    // Smoothing is linear, so it acts on the per-node profile mixture the
    // same way it acts on the series; the planted label is the dominant
    // component of the mixture each node ends up with.
    Mat effective = jitter.asDiagonal() * weights;
    if (spec.spatial_mix > 0.0) {
      Mat prop = city.adjacency;
      for (int i = 0; i < n; ++i) {
        const double deg = prop.row(i).sum();
        if (deg > 0) prop.row(i) /= deg;
        else prop(i, i) = 1.0;
      }
      for (int r = 0; r < SyntheticSpec::kSmoothingRounds; ++r) {
        x = (1.0 - spec.spatial_mix) * x + spec.spatial_mix * (x * prop.transpose());
        effective = (1.0 - spec.spatial_mix) * effective + spec.spatial_mix * (prop * effective);
      }
    }
    for (int i = 0; i < n; ++i) effective.row(i).maxCoeff(&city_labels[i]);

    if (spec.noise_std > 0.0) {
      const double white = 0.25 * spec.noise_std;
      for (long t = 0; t < steps; ++t)
        for (int i = 0; i < n; ++i) x(t, i) += white * gauss(rng);
    }
    city.speed = x.cwiseMax(0.0).cwiseMin(100.0);
    cities.push_back(std::move(city));
    if (labels) labels->push_back(std::move(city_labels));
  }
  return cities;
}

}  // namespace mtpb
