#pragma once

// Gaussian first-order transition model for the longitudinal covariate.
// The transition ignores calendar spacing between grid times.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"

namespace jmcox {

using AlphaVector = Eigen::Matrix<double, 5, 1>;
using AlphaMatrix = Eigen::Matrix<double, 5, 5>;

inline constexpr double log_sqrt_2pi = 0.91893853320467274178;

inline double log_normal_pdf(double z, double mean, double var) {
  double r = z - mean;
  return -log_sqrt_2pi - 0.5 * std::log(var) - 0.5 * r * r / var;
}

inline double log_joint_density(std::span<const double> values, const TransitionParams& alpha) {
  if (values.empty()) throw std::domain_error("log_joint_density: empty value list");
  for (double v : values)
    if (!std::isfinite(v)) throw std::domain_error("log_joint_density: non-finite value");
  double ll = log_normal_pdf(values[0], alpha.mu0, alpha.s0sq);
  for (std::size_t j = 1; j < values.size(); ++j)
    ll += log_normal_pdf(values[j], alpha.a + alpha.b * values[j - 1], alpha.ssq);
  return ll;
}

struct NormalParams {
  double mean;
  double var;
};

// Law of the next transition value Z_{a_x+1} given the measured history.
inline NormalParams cond_latent_params(std::span<const double> history, const TransitionParams& alpha) {
  if (history.empty()) throw std::domain_error("cond_latent_params: empty history");
  return {alpha.a + alpha.b * history.back(), alpha.ssq};
}

inline std::vector<double> complete_values(std::span<const double> history, double latent) {
  std::vector<double> v(history.begin(), history.end());
  v.push_back(latent);
  return v;
}

inline AlphaVector score_alpha(std::span<const double> values, const TransitionParams& alpha) {
  AlphaVector g = AlphaVector::Zero();
  double r0 = values[0] - alpha.mu0;
  g(0) = r0 / alpha.s0sq;
  g(1) = -0.5 / alpha.s0sq + 0.5 * r0 * r0 / (alpha.s0sq * alpha.s0sq);
  for (std::size_t j = 1; j < values.size(); ++j) {
    double prev = values[j - 1];
    double r = values[j] - alpha.a - alpha.b * prev;
    g(2) += r / alpha.ssq;
    g(3) += r * prev / alpha.ssq;
    g(4) += -0.5 / alpha.ssq + 0.5 * r * r / (alpha.ssq * alpha.ssq);
  }
  return g;
}

inline AlphaMatrix hessian_alpha(std::span<const double> values, const TransitionParams& alpha) {
  AlphaMatrix h = AlphaMatrix::Zero();
  const double v0 = alpha.s0sq, v = alpha.ssq;
  double r0 = values[0] - alpha.mu0;
  h(0, 0) = -1.0 / v0;
  h(0, 1) = h(1, 0) = -r0 / (v0 * v0);
  h(1, 1) = 0.5 / (v0 * v0) - r0 * r0 / (v0 * v0 * v0);
  for (std::size_t j = 1; j < values.size(); ++j) {
    double prev = values[j - 1];
    double r = values[j] - alpha.a - alpha.b * prev;
    h(2, 2) -= 1.0 / v;
    h(2, 3) -= prev / v;
    h(3, 3) -= prev * prev / v;
    h(2, 4) -= r / (v * v);
    h(3, 4) -= r * prev / (v * v);
    h(4, 4) += 0.5 / (v * v) - r * r / (v * v * v);
  }
  h(3, 2) = h(2, 3);
  h(4, 2) = h(2, 4);
  h(4, 3) = h(3, 4);
  return h;
}

// Weighted least-squares sufficient statistics for the transitions plus the
// entry-value moments. Accumulated in call order.
class TransitionStats {
 public:
  void add_entry(double z0) {
    n0_ += 1.0;
    s0_ += z0;
    s00_ += z0 * z0;
  }

  void add(double prev, double next, double w = 1.0) {
    sw_ += w;
    sx_ += w * prev;
    sxx_ += w * prev * prev;
    sy_ += w * next;
    sxy_ += w * prev * next;
  }

  // Latent transition prev -> Z with E[Z] = ez (total weight one).
  void add_latent(double prev, double ez) { add(prev, ez, 1.0); }

  double entry_count() const { return n0_; }
  double transition_weight() const { return sw_; }

  struct Coefficients {
    double mu0, a, b;
    bool degenerate_slope;
  };

  Coefficients solve() const {
    Coefficients c{};
    c.mu0 = s0_ / n0_;
    double mx = sx_ / sw_, my = sy_ / sw_;
    double cxx = sxx_ / sw_ - mx * mx;
    double cxy = sxy_ / sw_ - mx * my;
    if (cxx <= 1e-14 * std::max(1.0, sxx_ / sw_)) {
      c.b = 0.0;
      c.degenerate_slope = true;
    } else {
      c.b = cxy / cxx;
      c.degenerate_slope = false;
    }
    c.a = my - c.b * mx;
    return c;
  }

 private:
  double n0_ = 0, s0_ = 0, s00_ = 0;
  double sw_ = 0, sx_ = 0, sxx_ = 0, sy_ = 0, sxy_ = 0;
};

struct AlphaFit {
  TransitionParams alpha;
  std::vector<std::string> warnings;
};

// Maximizer in alpha of the expected complete-data log density, the latent
// transition of each subject weighted by its posterior atoms.
inline AlphaFit weighted_mle_alpha(const Dataset& data, std::span<const PosteriorAtoms> atoms,
                                   const AlphaBox& box = {}) {
  if (data.size() < 2) throw validation_error("weighted_mle_alpha: fewer than 2 subjects");
  if (atoms.size() != data.size()) throw std::invalid_argument("weighted_mle_alpha: atoms misaligned");

  TransitionStats stats;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    stats.add_entry(s.z[0]);
    for (std::size_t j = 1; j < s.z.size(); ++j) stats.add(s.z[j - 1], s.z[j]);
    const PosteriorAtoms& at = atoms[i];
    if (at.size() == 0) throw std::invalid_argument("weighted_mle_alpha: subject without atoms");
    double ez = 0.0;
    for (std::size_t q = 0; q < at.size(); ++q) ez += at.weights[q] * at.nodes[q];
    stats.add_latent(s.z.back(), ez);
  }
  auto coef = stats.solve();

  AlphaFit fit;
  if (coef.degenerate_slope) fit.warnings.push_back("transition slope not identified; set to 0");

  // second pass: residual variances
  double ss0 = 0.0, ssr = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    double r0 = s.z[0] - coef.mu0;
    ss0 += r0 * r0;
    for (std::size_t j = 1; j < s.z.size(); ++j) {
      double r = s.z[j] - coef.a - coef.b * s.z[j - 1];
      ssr += r * r;
    }
    const PosteriorAtoms& at = atoms[i];
    double mean_prev = coef.a + coef.b * s.z.back();
    for (std::size_t q = 0; q < at.size(); ++q) {
      double r = at.nodes[q] - mean_prev;
      ssr += at.weights[q] * r * r;
    }
  }
  fit.alpha = {coef.mu0, ss0 / stats.entry_count(), coef.a, coef.b, ssr / stats.transition_weight()};
  if (fit.alpha.s0sq < box.var_floor) fit.warnings.push_back("entry variance floored");
  if (fit.alpha.ssq < box.var_floor) fit.warnings.push_back("innovation variance floored");
  fit.alpha = box.project(fit.alpha);
  return fit;
}

// Observed transitions only (each subject's latent step dropped).
inline TransitionParams observed_only_alpha(const Dataset& data, const AlphaBox& box = {}) {
  TransitionStats stats;
  for (const auto& s : data.subjects) {
    stats.add_entry(s.z[0]);
    for (std::size_t j = 1; j < s.z.size(); ++j) stats.add(s.z[j - 1], s.z[j]);
    if (s.terminal) stats.add(s.z.back(), *s.terminal);
  }
  TransitionParams p;
  if (stats.transition_weight() < 2.0) {
    // too few transitions: start from the entry distribution
    double mu0 = stats.entry_count() > 0 ? stats.solve().mu0 : 0.0;
    double ss = 0.0;
    for (const auto& s : data.subjects) ss += (s.z[0] - mu0) * (s.z[0] - mu0);
    double v0 = std::max(ss / std::max(1.0, stats.entry_count()), 1.0);
    return box.project({mu0, v0, mu0, 0.0, v0});
  }
  auto c = stats.solve();
  double ss0 = 0.0, ssr = 0.0;
  for (const auto& s : data.subjects) {
    ss0 += (s.z[0] - c.mu0) * (s.z[0] - c.mu0);
    for (std::size_t j = 1; j < s.z.size(); ++j) {
      double r = s.z[j] - c.a - c.b * s.z[j - 1];
      ssr += r * r;
    }
    if (s.terminal) {
      double r = *s.terminal - c.a - c.b * s.z.back();
      ssr += r * r;
    }
  }
  p = {c.mu0, ss0 / stats.entry_count(), c.a, c.b, ssr / stats.transition_weight()};
  return box.project(p);
}

// Optional truncation of simulated covariate values at +-c (off by default).
struct Truncation {
  bool enabled = false;
  double c = 50.0;
};

template <class Rng>
double draw_normal(Rng& rng, double mean, double var, const Truncation& trunc = {}) {
  std::normal_distribution<double> nd(mean, std::sqrt(var));
  double z = nd(rng);
  if (trunc.enabled) {
    if (std::abs(mean) > trunc.c) throw validation_error("truncation bound excludes the transition mean");
    while (std::abs(z) > trunc.c) z = nd(rng);
  }
  return z;
}

}  // namespace jmcox
