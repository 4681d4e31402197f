#pragma once

// NPML estimation over the sieve of step cumulative hazards with jumps at the
// observed event times, by an ECM algorithm:
//   E  : posterior atoms of every latent value at the current parameter
//   CM1: closed-form alpha (weighted Gaussian MLE)
//   CM2: inner cycles of { jumps <- (1/n) / W_n(x_k), beta <- step-halved Newton }
// Termination requires both parameter stability and a small empirical score
// over the canonical probes.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jmcox/covariate_model.hpp"
#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"
#include "jmcox/posterior.hpp"

namespace jmcox {

struct FitConfig {
  int quadrature_order = 40;
  int max_iter = 1000;
  double tol_param = 1e-9;
  double tol_score = 1e-6;
  int inner_cycles = 3;
  double beta_box = 10.0;  // |beta| <= beta_box; 0 freezes beta at 0
  AlphaBox alpha_box;
  int step_halving_max = 30;
  std::optional<TransitionParams> fixed_alpha;  // freeze alpha at this value

  void validate() const {
    if (max_iter < 1) throw validation_error("max_iter must be >= 1");
    if (!(tol_param > 0.0) || !(tol_score > 0.0)) throw validation_error("tolerances must be positive");
    if (quadrature_order < 2) throw validation_error("quadrature order must be >= 2");
    if (inner_cycles < 1) throw validation_error("inner_cycles must be >= 1");
    if (!(beta_box >= 0.0)) throw validation_error("beta_box must be nonnegative");
    if (step_halving_max < 0) throw validation_error("step_halving_max must be nonnegative");
  }
};

struct FitResult {
  Theta theta_hat;
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  double score_norm = 0.0;
  std::vector<std::string> warnings;
  std::vector<PosteriorAtoms> atoms;  // E-step atoms at theta_hat
};

// ---------------------------------------------------------------------------
// Risk-set sums
// ---------------------------------------------------------------------------

// Per event time x_k:  S_p(x_k) = (1/n) sum_{i: x_k <= x_i} E_i[Z(x_k)^p e^{beta Z(x_k)}], p = 0, 1, 2.
struct RiskSums {
  std::vector<double> s0, s1, s2;
};

namespace detail {

// Interval index j with x_k in (t_j, t_{j+1}] for each event time.
inline std::vector<std::size_t> event_intervals(const std::vector<double>& times, const MeasurementGrid& grid) {
  std::vector<std::size_t> j(times.size());
  for (std::size_t k = 0; k < times.size(); ++k) j[k] = last_index(times[k], grid);
  return j;
}

struct LatentMoments {
  double m0, m1, m2;  // E[e^{bZ}], E[Z e^{bZ}], E[Z^2 e^{bZ}]
};

inline LatentMoments latent_moments(const PosteriorAtoms& at, double beta) {
  LatentMoments m{0, 0, 0};
  for (std::size_t q = 0; q < at.size(); ++q) {
    double z = at.nodes[q];
    double e = at.weights[q] * std::exp(beta * z);
    m.m0 += e;
    m.m1 += e * z;
    m.m2 += e * z * z;
  }
  return m;
}

}  // namespace detail

inline RiskSums risk_sums(const Dataset& data, std::span<const PosteriorAtoms> atoms, double beta,
                          const std::vector<double>& event_times) {
  const std::size_t K = event_times.size();
  const double inv_n = 1.0 / static_cast<double>(data.size());
  RiskSums r{std::vector<double>(K, 0.0), std::vector<double>(K, 0.0), std::vector<double>(K, 0.0)};
  auto intervals = detail::event_intervals(event_times, data.grid);
  std::vector<double> ez;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    const std::size_t ax = s.last_measured();
    ez.resize(s.z.size());
    for (std::size_t j = 0; j < s.z.size(); ++j) ez[j] = std::exp(beta * s.z[j]);
    auto lat = detail::latent_moments(atoms[i], beta);
    for (std::size_t k = 0; k < K && event_times[k] <= s.x; ++k) {
      std::size_t j = intervals[k] + 1;
      if (j <= ax) {
        double v = s.z[j];
        r.s0[k] += ez[j];
        r.s1[k] += v * ez[j];
        r.s2[k] += v * v * ez[j];
      } else {
        r.s0[k] += lat.m0;
        r.s1[k] += lat.m1;
        r.s2[k] += lat.m2;
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    r.s0[k] *= inv_n;
    r.s1[k] *= inv_n;
    r.s2[k] *= inv_n;
  }
  return r;
}

// W_n(u) at an event time u.
inline double w_n(double u, const Dataset& data, std::span<const PosteriorAtoms> atoms, double beta) {
  return risk_sums(data, atoms, beta, {u}).s0[0];
}

inline SieveHazard lambda_update(const Dataset& data, std::span<const PosteriorAtoms> atoms, double beta) {
  std::vector<double> ev = data.event_times();
  RiskSums r = risk_sums(data, atoms, beta, ev);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  std::vector<double> jumps(ev.size());
  for (std::size_t k = 0; k < ev.size(); ++k) {
    if (!(r.s0[k] > 0.0) || !std::isfinite(r.s0[k])) throw degenerate_risk_set_error(ev[k]);
    jumps[k] = inv_n / r.s0[k];
  }
  return SieveHazard(std::move(ev), std::move(jumps));
}

// (1/n) sum_i delta_i E_i[Z(x_i)]
inline double mean_event_covariate(const Dataset& data, std::span<const PosteriorAtoms> atoms) {
  double acc = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.subjects[i].delta != 1) continue;
    const auto& at = atoms[i];
    for (std::size_t q = 0; q < at.size(); ++q) acc += at.weights[q] * at.nodes[q];
  }
  return acc / static_cast<double>(data.size());
}

inline double score_beta(const Dataset& data, std::span<const PosteriorAtoms> atoms, double beta,
                         const SieveHazard& hazard) {
  RiskSums r = risk_sums(data, atoms, beta, hazard.times());
  double s = mean_event_covariate(data, atoms);
  for (std::size_t k = 0; k < hazard.size(); ++k) s -= hazard.jumps()[k] * r.s1[k];
  return s;
}

inline double info_beta(const Dataset& data, std::span<const PosteriorAtoms> atoms, double beta,
                        const SieveHazard& hazard) {
  RiskSums r = risk_sums(data, atoms, beta, hazard.times());
  double v = 0.0;
  for (std::size_t k = 0; k < hazard.size(); ++k) v += hazard.jumps()[k] * r.s2[k];
  return v;
}

// Mean conditional alpha-score (1/n) sum_i E_i[d/dalpha ln f(history, Z)].
inline AlphaVector mean_alpha_score(const Dataset& data, std::span<const PosteriorAtoms> atoms,
                                    const TransitionParams& alpha) {
  AlphaVector g = AlphaVector::Zero();
  std::vector<double> values;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    values.assign(s.z.begin(), s.z.end());
    values.push_back(0.0);
    const auto& at = atoms[i];
    for (std::size_t q = 0; q < at.size(); ++q) {
      values.back() = at.nodes[q];
      g += at.weights[q] * score_alpha(values, alpha);
    }
  }
  return g / static_cast<double>(data.size());
}

// Mean conditional alpha-Hessian (1/n) sum_i E_i[d^2/dalpha dalpha^T ln f(history, Z)].
inline AlphaMatrix mean_alpha_hessian(const Dataset& data, std::span<const PosteriorAtoms> atoms,
                                      const TransitionParams& alpha) {
  AlphaMatrix h = AlphaMatrix::Zero();
  std::vector<double> values;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    values.assign(s.z.begin(), s.z.end());
    values.push_back(0.0);
    const auto& at = atoms[i];
    for (std::size_t q = 0; q < at.size(); ++q) {
      values.back() = at.nodes[q];
      h += at.weights[q] * hessian_alpha(values, alpha);
    }
  }
  return h / static_cast<double>(data.size());
}

// Direction h = (h1, h2, h3) with h3 given at the event times.
struct Probe {
  AlphaVector h1 = AlphaVector::Zero();
  double h2 = 0.0;
  std::vector<double> h3;

  static Probe zero(std::size_t events) {
    Probe p;
    p.h3.assign(events, 0.0);
    return p;
  }
};

// Empirical score along a probe, with the conditional expectations taken
// under the supplied atoms.
inline double score_full(const Dataset& data, const Theta& theta, std::span<const PosteriorAtoms> atoms,
                         const Probe& h) {
  const SieveHazard& hz = theta.hazard;
  if (h.h3.size() != hz.size()) throw std::invalid_argument("score_full: h3 must have one value per event time");
  RiskSums r = risk_sums(data, atoms, theta.beta, hz.times());
  double s = 0.0;
  if (!h.h1.isZero()) s += h.h1.dot(mean_alpha_score(data, atoms, theta.alpha));
  if (h.h2 != 0.0) {
    double sb = mean_event_covariate(data, atoms);
    for (std::size_t k = 0; k < hz.size(); ++k) sb -= hz.jumps()[k] * r.s1[k];
    s += h.h2 * sb;
  }
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (const auto& subj : data.subjects) {
    if (subj.delta != 1) continue;
    if (auto k = hz.index_of(subj.x)) s += inv_n * h.h3[*k];
  }
  for (std::size_t k = 0; k < hz.size(); ++k) s -= hz.jumps()[k] * h.h3[k] * r.s0[k];
  return s;
}

struct ScoreCertificate {
  AlphaVector alpha_score = AlphaVector::Zero();
  double beta_score = 0.0;
  std::vector<double> hazard_score;  // 1/n - dL_k W_n(x_k)
  bool include_alpha = true;
  bool include_beta = true;

  double max_norm() const {
    double m = 0.0;
    if (include_alpha) m = std::max(m, alpha_score.cwiseAbs().maxCoeff());
    if (include_beta) m = std::max(m, std::abs(beta_score));
    for (double v : hazard_score) m = std::max(m, std::abs(v));
    return m;
  }
};

// Score over the canonical basis (unit h1 axes, h2 = 1, indicators of each event time).
inline ScoreCertificate score_certificate(const Dataset& data, const Theta& theta,
                                          std::span<const PosteriorAtoms> atoms) {
  const SieveHazard& hz = theta.hazard;
  RiskSums r = risk_sums(data, atoms, theta.beta, hz.times());
  ScoreCertificate c;
  c.alpha_score = mean_alpha_score(data, atoms, theta.alpha);
  c.beta_score = mean_event_covariate(data, atoms);
  for (std::size_t k = 0; k < hz.size(); ++k) c.beta_score -= hz.jumps()[k] * r.s1[k];
  const double inv_n = 1.0 / static_cast<double>(data.size());
  c.hazard_score.resize(hz.size());
  for (std::size_t k = 0; k < hz.size(); ++k) c.hazard_score[k] = inv_n - hz.jumps()[k] * r.s0[k];
  return c;
}

// Sum over subjects of ln L^{(i)}(theta), latent values integrated out by
// mode-centred quadrature.
inline double observed_loglik(const Dataset& data, const Theta& theta, int order) {
  double ll = 0.0;
  for (const auto& s : data.subjects) {
    ExponentSplit split = exponent_split(s, theta.hazard, theta.beta, data.grid);
    double li = -split.a_obs;
    if (s.delta == 1) li += std::log(split.own_jump);
    if (s.terminal) {
      if (s.delta == 1) li += theta.beta * *s.terminal;
      li += log_joint_density(complete_values(s.z, *s.terminal), theta.alpha);
    } else {
      li += log_joint_density(s.z, theta.alpha);
      li += posterior_quadrature(s, theta, order, data.grid).log_integral;
    }
    if (!std::isfinite(li) && !(s.delta == 1 && split.own_jump == 0.0))
      throw std::domain_error("observed_loglik: non-finite contribution for subject " + std::to_string(s.id));
    ll += li;
  }
  return ll;
}

// EM-loglikelihood sum_i E_i[ln l(y_i, Z; theta)] with the expectation under `atoms`.
inline double em_objective(const Dataset& data, const Theta& theta, std::span<const PosteriorAtoms> atoms) {
  const SieveHazard& hz = theta.hazard;
  RiskSums r = risk_sums(data, atoms, theta.beta, hz.times());
  const double n = static_cast<double>(data.size());
  double q = 0.0;
  for (std::size_t k = 0; k < hz.size(); ++k) q -= n * hz.jumps()[k] * r.s0[k];
  std::vector<double> values;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    const auto& at = atoms[i];
    values.assign(s.z.begin(), s.z.end());
    values.push_back(0.0);
    for (std::size_t qn = 0; qn < at.size(); ++qn) {
      values.back() = at.nodes[qn];
      double term = log_joint_density(values, theta.alpha);
      if (s.delta == 1) term += theta.beta * at.nodes[qn];
      q += at.weights[qn] * term;
    }
    if (s.delta == 1) {
      auto k = hz.index_of(s.x);
      q += k ? std::log(hz.jumps()[*k]) : -std::numeric_limits<double>::infinity();
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// ECM driver
// ---------------------------------------------------------------------------

namespace detail {

// EM objective restricted to beta with hazard and atoms held fixed, divided by n.
inline double beta_objective(double beta, double mean_event_z, const Dataset& data,
                             std::span<const PosteriorAtoms> atoms, const SieveHazard& hz) {
  RiskSums r = risk_sums(data, atoms, beta, hz.times());
  double q = beta * mean_event_z;
  for (std::size_t k = 0; k < hz.size(); ++k) q -= hz.jumps()[k] * r.s0[k];
  return q;
}

inline double relative_change(const Theta& a, const Theta& b) {
  auto va = a.alpha.to_array(), vb = b.alpha.to_array();
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]) / (1.0 + std::abs(va[i])));
  m = std::max(m, std::abs(a.beta - b.beta) / (1.0 + std::abs(a.beta)));
  const auto& ja = a.hazard.jumps();
  const auto& jb = b.hazard.jumps();
  for (std::size_t k = 0; k < ja.size(); ++k)
    m = std::max(m, std::abs(ja[k] - jb[k]) / std::max(ja[k], 1e-300));
  return m;
}

inline Theta interpolate(const Theta& from, const Theta& to, double t) {
  auto va = from.alpha.to_array(), vb = to.alpha.to_array();
  for (std::size_t i = 0; i < va.size(); ++i) va[i] += t * (vb[i] - va[i]);
  std::vector<double> jumps(from.hazard.size());
  for (std::size_t k = 0; k < jumps.size(); ++k)
    jumps[k] = from.hazard.jumps()[k] + t * (to.hazard.jumps()[k] - from.hazard.jumps()[k]);
  return {TransitionParams::from_array(va), from.beta + t * (to.beta - from.beta),
          SieveHazard(from.hazard.times(), std::move(jumps))};
}

inline bool alpha_interior(const TransitionParams& p, const AlphaBox& box) {
  auto v = p.to_array();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] <= box.lo[i] || v[i] >= box.hi[i]) return false;
  }
  return p.s0sq > box.var_floor && p.ssq > box.var_floor;
}

}  // namespace detail

// Upper bound on Lambda(tau) from the jump formula: (#events/n) / (m * at-risk fraction at tau),
// m the smallest e^{beta z} over observed values and posterior nodes. Infinite when nobody
// reaches tau.
inline double hazard_upper_bound(const Dataset& data, std::span<const PosteriorAtoms> atoms, double beta) {
  double m = std::numeric_limits<double>::infinity();
  std::size_t at_tau = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Subject& s = data.subjects[i];
    for (double v : s.z) m = std::min(m, std::exp(beta * v));
    for (double v : atoms[i].nodes) m = std::min(m, std::exp(beta * v));
    if (s.x >= data.tau) ++at_tau;
  }
  if (at_tau == 0) return std::numeric_limits<double>::infinity();
  double n = static_cast<double>(data.size());
  return (static_cast<double>(data.event_count()) / n) / (m * static_cast<double>(at_tau) / n);
}

inline FitResult em_fit(const Dataset& data, const FitConfig& cfg, const std::optional<Theta>& init = std::nullopt) {
  cfg.validate();
  if (data.event_count() == 0) throw validation_error("em_fit: dataset has no events");
  const int Q = cfg.quadrature_order;
  const bool beta_free = cfg.beta_box > 0.0;
  const bool alpha_free = !cfg.fixed_alpha.has_value();
  if (alpha_free && data.size() < 2) throw validation_error("em_fit: fewer than 2 subjects");

  FitResult res;
  Theta theta;
  if (init) {
    theta.alpha = init->alpha;
    theta.beta = init->beta;
    theta.hazard = init->hazard.times() == data.event_times() ? init->hazard : nelson_aalen(data);
  } else {
    theta.alpha = observed_only_alpha(data, cfg.alpha_box);
    theta.beta = 0.0;
    theta.hazard = nelson_aalen(data);
  }
  if (cfg.fixed_alpha) theta.alpha = *cfg.fixed_alpha;
  theta.alpha = cfg.alpha_box.project(theta.alpha);
  theta.beta = std::clamp(theta.beta, -cfg.beta_box, cfg.beta_box);

  double ll = observed_loglik(data, theta, Q);
  res.loglik_trace.push_back(ll);
  std::vector<PosteriorAtoms> atoms = e_step(data, theta, Q);
  double change = std::numeric_limits<double>::infinity();

  auto certificate = [&](const Theta& th, const std::vector<PosteriorAtoms>& at) {
    ScoreCertificate c = score_certificate(data, th, at);
    c.include_alpha = alpha_free && detail::alpha_interior(th.alpha, cfg.alpha_box);
    c.include_beta = beta_free && std::abs(th.beta) < cfg.beta_box;
    return c.max_norm();
  };

  for (int iter = 1; iter <= cfg.max_iter; ++iter) {
    res.iterations = iter;
    const Theta previous = theta;

    if (alpha_free) {
      AlphaFit af = weighted_mle_alpha(data, atoms, cfg.alpha_box);
      theta.alpha = af.alpha;
      for (auto& w : af.warnings)
        if (std::find(res.warnings.begin(), res.warnings.end(), w) == res.warnings.end()) res.warnings.push_back(w);
    }
    const double mean_ez = mean_event_covariate(data, atoms);
    for (int c = 0; c < cfg.inner_cycles; ++c) {
      theta.hazard = lambda_update(data, atoms, theta.beta);
      if (!beta_free) continue;
      double sb = score_beta(data, atoms, theta.beta, theta.hazard);
      double ib = info_beta(data, atoms, theta.beta, theta.hazard);
      if (!(ib > 0.0)) continue;  // zero information: beta cannot move
      double base = detail::beta_objective(theta.beta, mean_ez, data, atoms, theta.hazard);
      double step = sb / ib;
      bool accepted = false;
      for (int h = 0; h <= cfg.step_halving_max; ++h) {
        double cand = std::clamp(theta.beta + step, -cfg.beta_box, cfg.beta_box);
        if (detail::beta_objective(cand, mean_ez, data, atoms, theta.hazard) >= base) {
          theta.beta = cand;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted && std::abs(step) > 1e-12)
        res.warnings.push_back("beta step rejected after halving at iteration " + std::to_string(iter));
    }

    double ll_new = observed_loglik(data, theta, Q);
    if (ll_new < ll - 1e-9) {
      // generalized-EM guarantee violated numerically: pull back toward the previous iterate
      Theta target = theta;
      bool ok = false;
      double t = 0.5;
      for (int h = 0; h < cfg.step_halving_max; ++h, t *= 0.5) {
        Theta cand = detail::interpolate(previous, target, t);
        double llc = observed_loglik(data, cand, Q);
        if (llc >= ll - 1e-9) {
          theta = cand;
          ll_new = llc;
          ok = true;
          break;
        }
      }
      if (!ok)
        throw convergence_error("ascent failure at iteration " + std::to_string(iter) + ": loglik " +
                                std::to_string(ll_new) + " < " + std::to_string(ll));
    }
    ll = ll_new;
    res.loglik_trace.push_back(ll);
    change = detail::relative_change(previous, theta);
    atoms = e_step(data, theta, Q);

    if (change < cfg.tol_param) {
      res.score_norm = certificate(theta, atoms);
      if (res.score_norm < cfg.tol_score) {
        res.converged = true;
        break;
      }
    }
  }

  // Final closed-form hazard at the converged atoms.
  {
    Theta polished = theta;
    polished.hazard = lambda_update(data, atoms, theta.beta);
    double llp = observed_loglik(data, polished, Q);
    if (llp >= res.loglik_trace.back() - 1e-9) {
      theta = std::move(polished);
      res.loglik_trace.push_back(llp);
      atoms = e_step(data, theta, Q);
    }
  }
  res.score_norm = certificate(theta, atoms);
  if (res.converged && res.score_norm >= cfg.tol_score) res.converged = false;
  if (!res.converged) res.warnings.push_back("not converged after " + std::to_string(res.iterations) + " iterations");

  double bound = hazard_upper_bound(data, atoms, theta.beta);
  if (std::isfinite(bound) && theta.hazard(data.tau) > bound * (1.0 + 1e-10))
    res.warnings.push_back("cumulative hazard at tau exceeds its a-priori bound");
  if (std::abs(theta.beta) >= cfg.beta_box && beta_free) res.warnings.push_back("beta on the box boundary");

  res.theta_hat = std::move(theta);
  res.atoms = std::move(atoms);
  return res;
}

}  // namespace jmcox
