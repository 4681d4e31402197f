#pragma once

// Classical comparator: Cox partial likelihood with the missing covariate
// imputed by the last measured value, and the Breslow cumulative hazard.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"

namespace jmcox {

// Last value measured at or before u (never latent).
inline double lvcf_value(const Subject& s, double u, const MeasurementGrid& grid) {
  if (u < 0.0 || u > s.x) throw std::domain_error("lvcf_value: u outside [0, x]");
  if (u == 0.0) return s.z.front();
  std::size_t au = last_index(u, grid);
  return s.z[std::min(au, s.last_measured())];
}

enum class CovariatePath {
  lvcf,      // last value carried forward
  observed,  // next-value path with known terminal values (full-information data only)
};

inline double path_value(const Subject& s, double u, const MeasurementGrid& grid, CovariatePath path) {
  if (path == CovariatePath::lvcf) return lvcf_value(s, u, grid);
  CovariateValue v = covariate_at(s, u, grid);
  if (v.latent) throw validation_error("observed covariate path requires terminal values (subject " + std::to_string(s.id) + ")");
  return v.value;
}

struct BaselineFit {
  double beta_pl = 0.0;
  SieveHazard breslow;
  int iterations = 0;
  bool converged = false;
  bool flat = false;      // zero information: likelihood constant in beta
  bool boundary = false;  // hit |beta| = beta_box (monotone likelihood)
  double score = 0.0;
  double information = 0.0;  // -d^2/dbeta^2 log partial likelihood at beta_pl
  double log_partial_lik = 0.0;
};

namespace detail {

// Covariate values of the risk set at each event time, event subject first.
struct RiskTable {
  std::vector<double> times;
  std::vector<std::vector<double>> values;
};

inline RiskTable risk_table(const Dataset& data, CovariatePath path) {
  RiskTable t;
  std::vector<const Subject*> events;
  for (const auto& s : data.subjects)
    if (s.delta == 1) events.push_back(&s);
  std::sort(events.begin(), events.end(), [](const Subject* a, const Subject* b) { return a->x < b->x; });
  for (const Subject* e : events) {
    t.times.push_back(e->x);
    std::vector<double> v{path_value(*e, e->x, data.grid, path)};
    for (const auto& s : data.subjects)
      if (&s != e && s.x >= e->x) v.push_back(path_value(s, e->x, data.grid, path));
    t.values.push_back(std::move(v));
  }
  return t;
}

struct PlTerms {
  double loglik = 0.0, score = 0.0, info = 0.0;
};

inline PlTerms partial_lik_terms(const RiskTable& t, double beta) {
  PlTerms out;
  for (const auto& v : t.values) {
    double shift = -std::numeric_limits<double>::infinity();
    for (double z : v) shift = std::max(shift, beta * z);
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (double z : v) {
      double e = std::exp(beta * z - shift);
      s0 += e;
      s1 += e * z;
      s2 += e * z * z;
    }
    double mean = s1 / s0;
    out.loglik += beta * v.front() - (shift + std::log(s0));
    out.score += v.front() - mean;
    out.info += std::max(s2 / s0 - mean * mean, 0.0);
  }
  return out;
}

}  // namespace detail

inline double log_partial_likelihood(const Dataset& data, double beta, CovariatePath path = CovariatePath::lvcf) {
  return detail::partial_lik_terms(detail::risk_table(data, path), beta).loglik;
}

inline SieveHazard breslow(const Dataset& data, double beta, CovariatePath path = CovariatePath::lvcf) {
  std::vector<double> ev = data.event_times();
  std::vector<double> jumps(ev.size());
  for (std::size_t k = 0; k < ev.size(); ++k) {
    double s0 = 0.0;
    for (const auto& s : data.subjects)
      if (s.x >= ev[k]) s0 += std::exp(beta * path_value(s, ev[k], data.grid, path));
    if (!(s0 > 0.0)) throw degenerate_risk_set_error(ev[k]);
    jumps[k] = 1.0 / s0;
  }
  return SieveHazard(std::move(ev), std::move(jumps));
}

// Newton-Raphson with step halving on the log partial likelihood.
inline BaselineFit partial_lik_fit(const Dataset& data, CovariatePath path = CovariatePath::lvcf,
                                   double beta_box = 10.0, int max_iter = 100) {
  if (data.event_count() == 0) throw validation_error("partial_lik_fit: no events");
  auto table = detail::risk_table(data, path);
  BaselineFit fit;
  double beta = 0.0;
  auto terms = detail::partial_lik_terms(table, beta);
  if (terms.info <= 0.0) {
    fit.flat = true;
    fit.converged = std::abs(terms.score) <= 1e-8;
    fit.score = terms.score;
    fit.log_partial_lik = terms.loglik;
    fit.breslow = breslow(data, 0.0, path);
    return fit;
  }
  for (int it = 1; it <= max_iter; ++it) {
    if (std::abs(terms.score) <= 1e-8) break;
    fit.iterations = it;
    double step = terms.score / terms.info;
    double cand = beta;
    detail::PlTerms next;
    bool ok = false;
    for (int h = 0; h < 40; ++h) {
      cand = std::clamp(beta + step, -beta_box, beta_box);
      next = detail::partial_lik_terms(table, cand);
      if (next.loglik >= terms.loglik - 1e-12 * std::max(1.0, std::abs(terms.loglik))) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok) break;
    beta = cand;
    terms = next;
    if (std::abs(beta) >= beta_box) {
      fit.boundary = true;
      break;
    }
    if (!(terms.info > 0.0)) break;
  }
  fit.converged = !fit.boundary && std::abs(terms.score) <= 1e-8;
  fit.beta_pl = beta;
  fit.score = terms.score;
  fit.information = terms.info;
  fit.log_partial_lik = terms.loglik;
  fit.breslow = breslow(data, beta, path);
  return fit;
}

}  // namespace jmcox
