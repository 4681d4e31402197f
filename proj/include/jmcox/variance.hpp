#pragma once

// Asymptotic variance from the estimated information operator sigma-hat,
// discretized on probes h = (h1, h2, h3) with h3 carried by the event times
// (the only points charged by the fitted hazard).
//
//   sigma1(h)      = A h1,                A = -(1/n) sum_i E_i[d2 ln f]
//   sigma2(h)      = S2tot h2 + sum_k dL_k S1(x_k) h3(x_k)
//   sigma3(h)(x_m) = S1(x_m) h2 + S0(x_m) h3(x_m)
//
// and the variance of theta(g) is  <g, sigma^{-1} g>  with the inner product
//   <h, g> = h1'g1 + h2 g2 + sum_k h3(x_k) g3(x_k) dL_k.

#include <Eigen/Dense>
#include <cmath>
#include <array>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"
#include "jmcox/npml_fit.hpp"

namespace jmcox {

struct DiscretizedOperator {
  AlphaMatrix A = AlphaMatrix::Zero();
  Eigen::MatrixXd B;  // acts on (h2, h3(x_1), ..., h3(x_K))
  std::vector<double> dL;
  std::vector<double> times;

  std::size_t events() const { return dL.size(); }
};

inline DiscretizedOperator build_sigma_hat(const Dataset& data, const Theta& theta,
                                           std::span<const PosteriorAtoms> atoms) {
  DiscretizedOperator op;
  op.A = -mean_alpha_hessian(data, atoms, theta.alpha);
  const SieveHazard& hz = theta.hazard;
  const std::size_t K = hz.size();
  RiskSums r = risk_sums(data, atoms, theta.beta, hz.times());
  op.dL = hz.jumps();
  op.times = hz.times();
  op.B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K + 1), static_cast<Eigen::Index>(K + 1));
  double s2tot = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    auto c = static_cast<Eigen::Index>(k + 1);
    s2tot += op.dL[k] * r.s2[k];
    op.B(0, c) = op.dL[k] * r.s1[k];
    op.B(c, 0) = r.s1[k];
    op.B(c, c) = r.s0[k];
  }
  op.B(0, 0) = s2tot;
  return op;
}

inline Eigen::VectorXd pack_b(const Probe& p) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(p.h3.size() + 1));
  v(0) = p.h2;
  for (std::size_t k = 0; k < p.h3.size(); ++k) v(static_cast<Eigen::Index>(k + 1)) = p.h3[k];
  return v;
}

inline void unpack_b(const Eigen::VectorXd& v, Probe& p) {
  p.h2 = v(0);
  p.h3.resize(static_cast<std::size_t>(v.size() - 1));
  for (std::size_t k = 0; k < p.h3.size(); ++k) p.h3[k] = v(static_cast<Eigen::Index>(k + 1));
}

inline Probe apply(const DiscretizedOperator& op, const Probe& h) {
  if (h.h3.size() != op.events()) throw std::invalid_argument("probe size does not match operator");
  Probe out;
  out.h1 = op.A * h.h1;
  unpack_b(op.B * pack_b(h), out);
  return out;
}

// 2-norm condition number from singular values.
inline double condition_number(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  double smin = sv(sv.size() - 1);
  return smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
}

inline constexpr double max_condition = 1e12;

// Factorized sigma-hat; apply with operator() to get h = sigma^{-1}(g).
class SigmaInverse {
 public:
  explicit SigmaInverse(const DiscretizedOperator& op) : op_(&op), ldlt_(op.A), lu_(op.B) {
    cond_a_ = condition_number(op.A);
    if (!(cond_a_ <= max_condition)) throw singular_operator_error("alpha block is singular", cond_a_);
    double rc = lu_.rcond();
    cond_b_ = rc > 0.0 ? 1.0 / rc : std::numeric_limits<double>::infinity();
    if (!(cond_b_ <= max_condition))
      throw singular_operator_error("hazard/beta block is singular (condition number " + std::to_string(cond_b_) + ")",
                                    cond_b_);
  }

  Probe operator()(const Probe& g) const {
    if (g.h3.size() != op_->events()) throw std::invalid_argument("probe size does not match operator");
    Probe h;
    h.h1 = ldlt_.solve(g.h1);
    Eigen::VectorXd rhs = pack_b(g);
    Eigen::VectorXd x = lu_.solve(rhs);
    x += lu_.solve(rhs - op_->B * x);  // one refinement step
    unpack_b(x, h);
    return h;
  }

  double cond_alpha() const { return cond_a_; }
  // 1-norm condition estimate of B
  double cond_b() const { return cond_b_; }

 private:
  const DiscretizedOperator* op_;
  Eigen::LDLT<AlphaMatrix> ldlt_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  double cond_a_ = 0.0, cond_b_ = 0.0;
};

inline Probe invert_apply(const DiscretizedOperator& op, const Probe& g) { return SigmaInverse(op)(g); }

// <g, h> in the dL-weighted inner product.
inline double probe_inner(const Probe& g, const Probe& h, const std::vector<double>& dL) {
  double v = g.h1.dot(h.h1) + g.h2 * h.h2;
  for (std::size_t k = 0; k < dL.size(); ++k) v += g.h3[k] * h.h3[k] * dL[k];
  return v;
}

// Covariance form  <g, sigma^{-1}(g_star)>.
inline double var_form(const DiscretizedOperator& op, const Probe& g, const Probe& g_star) {
  return probe_inner(g, invert_apply(op, g_star), op.dL);
}

inline double var_form(const SigmaInverse& inv, const DiscretizedOperator& op, const Probe& g, const Probe& g_star) {
  return probe_inner(g, inv(g_star), op.dL);
}

inline double var_estimate(const DiscretizedOperator& op, const Probe& g) { return var_form(op, g, g); }

// Closed form for h_beta = (0, 1, 0):  [ sum_k dL_k S2(x_k) ]^{-1}.
inline double var_beta_simple(const Dataset& data, const Theta& theta, std::span<const PosteriorAtoms> atoms) {
  double s = info_beta(data, atoms, theta.beta, theta.hazard);
  if (!(s > 0.0)) throw std::domain_error("var_beta_simple: zero information sum");
  return 1.0 / s;
}

// Standard normal quantile: rational approximation refined by one Halley step.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p outside (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

// Wald interval for beta; var_est is the variance of sqrt(n)(beta_hat - beta_0).
inline std::pair<double, double> ci(double beta_hat, double var_est, std::size_t n, double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::domain_error("ci: level outside (0, 1)");
  if (!(var_est > 0.0)) throw std::domain_error("ci: variance must be positive");
  double half = normal_quantile(0.5 + level / 2.0) * std::sqrt(var_est / static_cast<double>(n));
  return {beta_hat - half, beta_hat + half};
}

struct VarianceReport {
  double var_beta_simple = 0.0;
  std::optional<double> var_beta_full;
  std::array<double, 5> var_alpha{};
  std::vector<std::pair<double, double>> lambda_band;
  double cond_B = 0.0;
  std::vector<std::string> warnings;
};

// Probe picking Lambda(t): h3 = 1{x_k <= t}.
inline Probe lambda_probe(const DiscretizedOperator& op, double t) {
  Probe g = Probe::zero(op.events());
  for (std::size_t k = 0; k < op.events(); ++k) g.h3[k] = op.times[k] <= t ? 1.0 : 0.0;
  return g;
}

inline Probe beta_probe(std::size_t events) {
  Probe g = Probe::zero(events);
  g.h2 = 1.0;
  return g;
}

inline VarianceReport variance_report(const Dataset& data, const Theta& theta, std::span<const PosteriorAtoms> atoms,
                                      const std::vector<double>& band_times) {
  VarianceReport rep;
  rep.var_beta_simple = var_beta_simple(data, theta, atoms);
  DiscretizedOperator op = build_sigma_hat(data, theta, atoms);
  try {
    SigmaInverse inv(op);
    rep.cond_B = inv.cond_b();
    double v = var_form(inv, op, beta_probe(op.events()), beta_probe(op.events()));
    if (!(v > 0.0)) rep.warnings.push_back("full-inversion beta variance is not positive");
    rep.var_beta_full = v;
    for (std::size_t j = 0; j < 5; ++j) {
      Probe g = Probe::zero(op.events());
      g.h1(static_cast<Eigen::Index>(j)) = 1.0;
      rep.var_alpha[j] = var_form(inv, op, g, g);
    }
    for (double t : band_times) {
      Probe g = lambda_probe(op, t);
      rep.lambda_band.emplace_back(t, var_form(inv, op, g, g));
    }
  } catch (const singular_operator_error& e) {
    rep.cond_B = e.condition_number;
    rep.warnings.push_back(e.what());
  }
  return rep;
}

}  // namespace jmcox
