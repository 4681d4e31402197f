#pragma once

// E-step: conditional law of a subject's latent covariate value given the
// observed data, represented by mode-centred Gauss-Hermite atoms.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "jmcox/covariate_model.hpp"
#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"
#include "jmcox/quadrature.hpp"

namespace jmcox {

// Cumulative-hazard exponent of one subject, split by observability:
//   sum_{x_k <= x} dL_k e^{beta Z(x_k)} = a_obs + a_lat * e^{beta z}.
struct ExponentSplit {
  double a_obs = 0.0;
  double a_lat = 0.0;
  double own_jump = 0.0;
};

inline ExponentSplit exponent_split(const Subject& s, const SieveHazard& hazard, double beta,
                                    const MeasurementGrid& grid) {
  ExponentSplit out;
  const std::size_t ax = s.last_measured();
  for (std::size_t j = 0; j < ax; ++j) {
    double m = hazard.mass(grid.times[j], grid.times[j + 1]);
    if (m > 0.0) out.a_obs += m * std::exp(beta * s.z[j + 1]);
  }
  double window = hazard.mass(grid.times[ax], s.x);
  if (s.terminal) {
    if (window > 0.0) out.a_obs += window * std::exp(beta * *s.terminal);
  } else {
    out.a_lat = window;
  }
  if (s.delta == 1) {
    if (auto k = hazard.index_of(s.x)) out.own_jump = hazard.jumps()[*k];
  }
  return out;
}

inline constexpr double exp_overflow_guard = 700.0;

// delta*beta*z - a_lat*e^{beta z} + ln N(z; cond mean, cond var).
inline double log_unnormalized_posterior(double z, const Subject& s, const ExponentSplit& split,
                                         const Theta& theta) {
  double bz = theta.beta * z;
  if (bz > exp_overflow_guard) return -std::numeric_limits<double>::infinity();
  NormalParams c = cond_latent_params(s.z, theta.alpha);
  double tilt = split.a_lat > 0.0 ? split.a_lat * std::exp(bz) : 0.0;
  return s.delta * bz - tilt + log_normal_pdf(z, c.mean, c.var);
}

struct PosteriorResult {
  PosteriorAtoms atoms;
  // log of  integral exp(log_unnormalized_posterior(z)) dz
  double log_integral = 0.0;
};

namespace detail {

struct LogPosterior {
  double beta, a_lat, tilt_slope, mean, var;

  double value(double z) const {
    double bz = beta * z;
    if (bz > exp_overflow_guard) return -std::numeric_limits<double>::infinity();
    double r = z - mean;
    double tilt = a_lat > 0.0 ? a_lat * std::exp(bz) : 0.0;
    return tilt_slope * z - tilt - log_sqrt_2pi - 0.5 * std::log(var) - 0.5 * r * r / var;
  }
  double d1(double z) const {
    double e = a_lat > 0.0 ? a_lat * beta * std::exp(beta * z) : 0.0;
    return tilt_slope - e - (z - mean) / var;
  }
  double d2(double z) const {
    double e = a_lat > 0.0 ? a_lat * beta * beta * std::exp(beta * z) : 0.0;
    return -e - 1.0 / var;
  }
};

// Root of the strictly decreasing d1 by Newton steps kept inside a bracket.
inline double find_mode(const LogPosterior& lp, subject_id id) {
  double x = lp.mean + lp.var * lp.tilt_slope;
  double sd = std::sqrt(lp.var);
  double lo = x, hi = x, step = sd;
  int expand = 0;
  while (lp.d1(lo) < 0.0) {
    lo -= step;
    step *= 2.0;
    if (++expand > 200) throw convergence_error("posterior mode bracket failed for subject " + std::to_string(id));
  }
  step = sd;
  while (lp.d1(hi) > 0.0) {
    hi += step;
    step *= 2.0;
    if (++expand > 400) throw convergence_error("posterior mode bracket failed for subject " + std::to_string(id));
  }
  for (int it = 0; it < 100; ++it) {
    double g = lp.d1(x);
    if (g == 0.0) return x;
    if (g > 0.0) lo = x; else hi = x;
    double h = lp.d2(x);
    double next = x - g / h;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-14 * std::max(1.0, std::abs(x)) || hi - lo <= 1e-15 * std::max(1.0, std::abs(x)))
      return next;
    x = next;
  }
  throw convergence_error("posterior mode search did not converge for subject " + std::to_string(id));
}

}  // namespace detail

inline PosteriorResult posterior_quadrature(const Subject& s, const Theta& theta, int order,
                                            const MeasurementGrid& grid) {
  if (order < 2) throw std::invalid_argument("quadrature order must be >= 2");
  PosteriorResult out;
  if (s.terminal) {
    out.atoms = PosteriorAtoms::degenerate(*s.terminal);
    return out;
  }
  ExponentSplit split = exponent_split(s, theta.hazard, theta.beta, grid);
  NormalParams c = cond_latent_params(s.z, theta.alpha);
  detail::LogPosterior lp{theta.beta, split.a_lat, s.delta * theta.beta, c.mean, c.var};

  double mode = detail::find_mode(lp, s.id);
  double sd = 1.0 / std::sqrt(-lp.d2(mode));
  // The same atoms also carry the e^{beta z}-weighted moments of the risk
  // sums; that tilted density is narrower on the steep side, so the node
  // spacing follows whichever of the two is tighter.
  if (lp.a_lat > 0.0 && theta.beta != 0.0) {
    detail::LogPosterior tilted = lp;
    tilted.tilt_slope += theta.beta;
    sd = std::min(sd, 1.0 / std::sqrt(-tilted.d2(detail::find_mode(tilted, s.id))));
  }
  double peak = lp.value(mode);
  const HermiteRule& rule = hermite_rule(order);

  PosteriorAtoms& at = out.atoms;
  at.mode = mode;
  at.curvature_sd = sd;
  at.nodes.resize(order);
  at.weights.resize(order);
  double total = 0.0;
  for (int q = 0; q < order; ++q) {
    double z = mode + sd * rule.nodes[q];
    double w = std::exp(rule.log_ratio[q] + lp.value(z) - peak);
    at.nodes[q] = z;
    at.weights[q] = w;
    total += w;
  }
  if (!(total > 0.0) || !std::isfinite(total))
    throw convergence_error("posterior quadrature degenerate for subject " + std::to_string(s.id));
  for (double& w : at.weights) w /= total;
  out.log_integral = peak + std::log(sd) + log_sqrt_2pi + std::log(total);
  return out;
}

inline PosteriorAtoms posterior_atoms(const Subject& s, const Theta& theta, int order, const MeasurementGrid& grid) {
  return posterior_quadrature(s, theta, order, grid).atoms;
}

template <class G>
double cond_exp(const PosteriorAtoms& atoms, G&& g) {
  double acc = 0.0;
  for (std::size_t q = 0; q < atoms.size(); ++q) {
    double v = g(atoms.nodes[q]);
    if (!std::isfinite(v)) throw std::domain_error("cond_exp: non-finite integrand at a node");
    acc += atoms.weights[q] * v;
  }
  return acc;
}

// E-step for every subject, in dataset order.
inline std::vector<PosteriorAtoms> e_step(const Dataset& data, const Theta& theta, int order) {
  std::vector<PosteriorAtoms> atoms;
  atoms.reserve(data.size());
  for (const auto& s : data.subjects) atoms.push_back(posterior_atoms(s, theta, order, data.grid));
  return atoms;
}

}  // namespace jmcox
