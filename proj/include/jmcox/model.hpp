#pragma once

// Observation layout, covariate-path convention and the step cumulative hazard.
//
// Path convention: on (t_j, t_{j+1}] the covariate equals the value measured
// (or due to be measured) at t_{j+1}. A subject leaving at x with last
// measurement index a_x therefore carries the never-measured value
// Z_{a_x+1} on the whole terminal window (t_{a_x}, x].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "jmcox/errors.hpp"

namespace jmcox {

using subject_id = std::int64_t;

struct MeasurementGrid {
  std::vector<double> times;

  static MeasurementGrid uniform(double step, double tau) {
    if (!(step > 0.0) || !std::isfinite(step)) throw validation_error("grid step must be positive");
    MeasurementGrid g;
    for (std::size_t k = 0;; ++k) {
      double t = static_cast<double>(k) * step;
      // grid times strictly below the horizon; guard against round-off at k*step == tau
      if (t >= tau - 1e-12 * std::max(1.0, tau)) break;
      g.times.push_back(t);
    }
    return g;
  }

  std::size_t size() const { return times.size(); }

  void validate(double tau) const {
    if (times.empty() || times.front() != 0.0)
      throw validation_error("measurement grid must start at t_0 = 0");
    for (std::size_t k = 0; k < times.size(); ++k) {
      if (!std::isfinite(times[k]) || times[k] >= tau)
        throw validation_error("grid times must be finite and below tau");
      if (k > 0 && !(times[k] > times[k - 1]))
        throw validation_error("grid times must be strictly increasing");
    }
  }
};

// a_t = max{k : t_k < t}.
inline std::size_t last_index(double t, const MeasurementGrid& grid) {
  if (!(t > 0.0)) throw std::domain_error("last_index requires t > 0");
  auto it = std::lower_bound(grid.times.begin(), grid.times.end(), t);
  return static_cast<std::size_t>(it - grid.times.begin()) - 1;
}

struct Subject {
  subject_id id = 0;
  double x = 0.0;
  int delta = 0;
  std::vector<double> z;  // z_0 ... z_{a_x}
  // Value on the terminal window when it is known (full-information data).
  std::optional<double> terminal;

  std::size_t last_measured() const { return z.size() - 1; }
  bool fully_observed() const { return terminal.has_value(); }
};

// Covariate value at a time point: either known or the subject's latent value.
struct CovariateValue {
  bool latent = false;
  double value = 0.0;

  static CovariateValue observed(double v) { return {false, v}; }
  static CovariateValue unknown() { return {true, 0.0}; }
  bool operator==(const CovariateValue&) const = default;
};

inline CovariateValue covariate_at(const Subject& s, double u, const MeasurementGrid& grid) {
  if (u < 0.0 || u > s.x) throw std::domain_error("covariate_at: u outside [0, x]");
  if (u == 0.0) return CovariateValue::observed(s.z.front());
  std::size_t j = last_index(u, grid);
  if (j + 1 <= s.last_measured()) return CovariateValue::observed(s.z[j + 1]);
  if (s.terminal) return CovariateValue::observed(*s.terminal);
  return CovariateValue::unknown();
}

// Start of the terminal window (t_{a_x}, x].
inline double latent_window_start(const Subject& s, const MeasurementGrid& grid) {
  return grid.times[s.last_measured()];
}

class SieveHazard {
 public:
  SieveHazard() = default;
  SieveHazard(std::vector<double> event_times, std::vector<double> jumps)
      : times_(std::move(event_times)), jumps_(std::move(jumps)) {
    if (times_.size() != jumps_.size()) throw std::invalid_argument("hazard: size mismatch");
    cumulative_.resize(jumps_.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < jumps_.size(); ++k) {
      if (!(jumps_[k] >= 0.0) || !std::isfinite(jumps_[k]))
        throw std::invalid_argument("hazard: jumps must be finite and nonnegative");
      if (k > 0 && !(times_[k] > times_[k - 1]))
        throw std::invalid_argument("hazard: event times must be strictly increasing");
      acc += jumps_[k];
      cumulative_[k] = acc;
    }
  }

  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& jumps() const { return jumps_; }
  std::size_t size() const { return times_.size(); }

  // Lambda(t) = sum_{x_k <= t} jump_k
  double operator()(double t) const {
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    if (it == times_.begin()) return 0.0;
    return cumulative_[static_cast<std::size_t>(it - times_.begin()) - 1];
  }

  // Hazard mass on (a, b].
  double mass(double a, double b) const { return b > a ? (*this)(b) - (*this)(a) : 0.0; }

  // Index of an exact event time, if present.
  std::optional<std::size_t> index_of(double t) const {
    auto it = std::lower_bound(times_.begin(), times_.end(), t);
    if (it == times_.end() || *it != t) return std::nullopt;
    return static_cast<std::size_t>(it - times_.begin());
  }

 private:
  std::vector<double> times_;
  std::vector<double> jumps_;
  std::vector<double> cumulative_;
};

inline double hazard_eval(const SieveHazard& h, double t) { return h(t); }

// Discrete representation of the conditional law of a subject's latent value.
struct PosteriorAtoms {
  std::vector<double> nodes;
  std::vector<double> weights;
  double mode = 0.0;
  double curvature_sd = 0.0;

  static PosteriorAtoms degenerate(double z) { return {{z}, {1.0}, z, 0.0}; }
  std::size_t size() const { return nodes.size(); }
};

// alpha = (mu0, s0sq, a, b, ssq): Z_0 ~ N(mu0, s0sq), Z_j | Z_{j-1} ~ N(a + b Z_{j-1}, ssq).
struct TransitionParams {
  double mu0 = 0.0;
  double s0sq = 1.0;
  double a = 0.0;
  double b = 0.0;
  double ssq = 1.0;

  static constexpr std::size_t dim = 5;

  std::array<double, dim> to_array() const { return {mu0, s0sq, a, b, ssq}; }
  static TransitionParams from_array(const std::array<double, dim>& v) {
    return {v[0], v[1], v[2], v[3], v[4]};
  }
  bool operator==(const TransitionParams&) const = default;
};

// Compact box A for alpha; variances are additionally floored.
struct AlphaBox {
  std::array<double, 5> lo{-1e3, 1e-8, -1e3, -1e3, 1e-8};
  std::array<double, 5> hi{1e3, 1e6, 1e3, 1e3, 1e6};
  double var_floor = 1e-8;

  bool contains(const TransitionParams& p) const {
    auto v = p.to_array();
    for (std::size_t i = 0; i < 5; ++i)
      if (!(v[i] >= lo[i] && v[i] <= hi[i])) return false;
    return p.s0sq >= var_floor && p.ssq >= var_floor;
  }

  TransitionParams project(const TransitionParams& p) const {
    auto v = p.to_array();
    for (std::size_t i = 0; i < 5; ++i) v[i] = std::clamp(v[i], lo[i], hi[i]);
    v[1] = std::max(v[1], var_floor);
    v[4] = std::max(v[4], var_floor);
    return TransitionParams::from_array(v);
  }
};

struct Theta {
  TransitionParams alpha;
  double beta = 0.0;
  SieveHazard hazard;
};

struct ValidationOptions {
  bool jitter_ties = false;
};

struct Dataset {
  MeasurementGrid grid;
  double tau = 0.0;
  std::vector<Subject> subjects;

  std::size_t size() const { return subjects.size(); }

  std::size_t event_count() const {
    return static_cast<std::size_t>(
        std::count_if(subjects.begin(), subjects.end(), [](const Subject& s) { return s.delta == 1; }));
  }

  // Sorted uncensored follow-up times.
  std::vector<double> event_times() const {
    std::vector<double> t;
    for (const auto& s : subjects)
      if (s.delta == 1) t.push_back(s.x);
    std::sort(t.begin(), t.end());
    return t;
  }

  bool fully_observed() const {
    return std::all_of(subjects.begin(), subjects.end(), [](const Subject& s) { return s.fully_observed(); });
  }

  // Checks all structural invariants. With jitter enabled, tied event times
  // are separated by 1e-9 * rank within each tie group (id order).
  void validate(const ValidationOptions& opt = {}) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw validation_error("tau must be positive and finite");
    grid.validate(tau);
    if (subjects.empty()) throw validation_error("dataset has no subjects");
    std::sort(subjects.begin(), subjects.end(), [](const Subject& a, const Subject& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      const Subject& s = subjects[i];
      std::string tag = "subject " + std::to_string(s.id) + ": ";
      if (i > 0 && subjects[i - 1].id == s.id) throw validation_error(tag + "duplicate id");
      if (!(s.x > 0.0) || !(s.x <= tau)) throw validation_error(tag + "follow-up time outside (0, tau]");
      if (s.delta != 0 && s.delta != 1) throw validation_error(tag + "delta must be 0 or 1");
      if (s.x == tau && s.delta == 1) throw validation_error(tag + "event at tau must be censored");
      if (s.z.size() != last_index(s.x, grid) + 1)
        throw validation_error(tag + "measurement count must equal a_x + 1");
      for (double v : s.z)
        if (!std::isfinite(v)) throw validation_error(tag + "non-finite measurement");
      if (s.terminal && !std::isfinite(*s.terminal)) throw validation_error(tag + "non-finite terminal value");
    }
    resolve_ties(opt.jitter_ties);
  }

 private:
  void resolve_ties(bool jitter) {
    std::map<double, std::vector<std::size_t>> by_time;
    for (std::size_t i = 0; i < subjects.size(); ++i)
      if (subjects[i].delta == 1) by_time[subjects[i].x].push_back(i);
    for (auto& [t, idx] : by_time) {
      if (idx.size() < 2) continue;
      if (!jitter) throw validation_error("tied event times at x = " + std::to_string(t));
      // idx is already in id order
      for (std::size_t r = 1; r < idx.size(); ++r) subjects[idx[r]].x = t + 1e-9 * static_cast<double>(r);
    }
    if (jitter) {
      std::vector<double> ev = event_times();
      if (std::adjacent_find(ev.begin(), ev.end()) != ev.end())
        throw validation_error("jitter could not separate tied event times");
      for (const auto& s : subjects) {
        if (s.x > tau || s.z.size() != last_index(s.x, grid) + 1)
          throw validation_error("jitter moved subject " + std::to_string(s.id) + " across a grid time");
      }
    }
  }
};

// Nelson-Aalen jumps at the sorted event times.
inline SieveHazard nelson_aalen(const Dataset& d) {
  std::vector<double> ev = d.event_times();
  std::vector<double> jumps(ev.size());
  for (std::size_t k = 0; k < ev.size(); ++k) {
    std::size_t at_risk = static_cast<std::size_t>(std::count_if(
        d.subjects.begin(), d.subjects.end(), [&](const Subject& s) { return s.x >= ev[k]; }));
    jumps[k] = 1.0 / static_cast<double>(at_risk);
  }
  return SieveHazard(std::move(ev), std::move(jumps));
}

}  // namespace jmcox
