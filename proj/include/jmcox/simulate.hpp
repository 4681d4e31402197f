#pragma once

// Data generation from the joint model: Gaussian transitions on the grid,
// hazard lambda0 * exp(beta0 Z(t)) with the next-value covariate path, so the
// hazard is constant on every grid interval and event times are drawn exactly
// by a piecewise-exponential inverse transform.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "jmcox/covariate_model.hpp"
#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"

namespace jmcox {

struct SimConfig {
  std::size_t n = 200;
  double grid_step = 0.25;
  double tau = 3.0;
  TransitionParams alpha0{0.0, 1.0, 0.0, 0.7, 0.25};
  double beta0 = 1.0;
  double lambda0 = 0.3;
  double censor_rate = 0.2;  // 0: administrative censoring at tau only
  std::uint64_t seed = 20240601;
  Truncation truncation;

  void validate() const {
    if (n < 1) throw validation_error("sim: n must be >= 1");
    if (!(grid_step > 0.0) || !std::isfinite(grid_step)) throw validation_error("sim: grid_step must be positive");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw validation_error("sim: tau must be positive");
    double ratio = tau / grid_step;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 * std::max(1.0, ratio))
      throw validation_error("sim: tau must be a multiple of grid_step");
    if (!(lambda0 > 0.0)) throw validation_error("sim: lambda0 must be positive");
    if (!(censor_rate >= 0.0)) throw validation_error("sim: censor_rate must be nonnegative");
    if (!(alpha0.s0sq > 0.0) || !(alpha0.ssq > 0.0)) throw validation_error("sim: variances must be positive");
    if (!std::isfinite(beta0)) throw validation_error("sim: beta0 must be finite");
  }
};

struct SimTruth {
  subject_id id = 0;
  double latent_z = 0.0;  // Z_{a_x + 1}, never recorded in the data
  double event_time = std::numeric_limits<double>::infinity();  // infinite when T > tau
  double censor_time = 0.0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for index i under a master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t i) {
  return splitmix64(splitmix64(seed) ^ splitmix64(i + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline std::pair<Subject, SimTruth> gen_subject(Rng& rng, const SimConfig& cfg, const MeasurementGrid& grid,
                                                subject_id id) {
  // censoring first, from the same stream but without any covariate input
  double c = cfg.tau;
  if (cfg.censor_rate > 0.0) c = std::min(cfg.tau, std::exponential_distribution<double>(cfg.censor_rate)(rng));

  const TransitionParams& al = cfg.alpha0;
  std::vector<double> path{draw_normal(rng, al.mu0, al.s0sq, cfg.truncation)};
  double t_event = std::numeric_limits<double>::infinity();
  const std::size_t J = grid.size();
  for (std::size_t j = 0; j < J; ++j) {
    double lo = grid.times[j];
    double hi = j + 1 < J ? grid.times[j + 1] : cfg.tau;
    if (lo >= c) break;
    double next = draw_normal(rng, al.a + al.b * path.back(), al.ssq, cfg.truncation);
    path.push_back(next);
    double rate = cfg.lambda0 * std::exp(cfg.beta0 * next);
    double wait = std::exponential_distribution<double>(rate)(rng);
    if (lo + wait <= hi) {
      t_event = lo + wait;
      break;
    }
  }

  Subject s;
  s.id = id;
  s.delta = t_event <= c ? 1 : 0;
  s.x = s.delta ? t_event : c;
  std::size_t ax = last_index(s.x, grid);
  s.z.assign(path.begin(), path.begin() + static_cast<std::ptrdiff_t>(ax + 1));
  SimTruth truth{id, path.at(ax + 1), t_event, c};
  return {std::move(s), truth};
}

struct SimulatedData {
  Dataset data;
  std::vector<SimTruth> truths;
};

inline SimulatedData gen_dataset(const SimConfig& cfg) {
  cfg.validate();
  SimulatedData out;
  out.data.tau = cfg.tau;
  out.data.grid = MeasurementGrid::uniform(cfg.grid_step, cfg.tau);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    Rng rng(derive_seed(cfg.seed, i));
    auto [s, t] = gen_subject(rng, cfg, out.data.grid, static_cast<subject_id>(i + 1));
    out.data.subjects.push_back(std::move(s));
    out.truths.push_back(t);
  }
  out.data.validate({.jitter_ties = true});
  return out;
}

// Adds each subject's latent value as an observed terminal value.
inline Dataset fullinfo_dataset(const Dataset& data, const std::vector<SimTruth>& truths) {
  if (truths.size() != data.size()) throw validation_error("fullinfo_dataset: truths misaligned with dataset");
  Dataset out = data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Subject& s = out.subjects[i];
    if (truths[i].id != s.id) throw validation_error("fullinfo_dataset: truth id mismatch for subject " + std::to_string(s.id));
    if (s.terminal && *s.terminal != truths[i].latent_z)
      throw validation_error("fullinfo_dataset: conflicting terminal value for subject " + std::to_string(s.id));
    s.terminal = truths[i].latent_z;
  }
  return out;
}

}  // namespace jmcox
