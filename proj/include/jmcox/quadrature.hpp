#pragma once

#include <Eigen/Eigenvalues>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace jmcox {

// Gauss-Hermite rule for the standard normal measure: sum_q weights[q] g(nodes[q])
// approximates E[g(X)], X ~ N(0, 1). `log_ratio[q]` is log(weights[q]) + nodes[q]^2 / 2,
// i.e. the weight divided by the Gaussian kernel, used for mode-centred rules.
struct HermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
  std::vector<double> log_ratio;
};

namespace detail {

// Orthonormal probabilists' Hermite polynomials p_0..p_{order} at x.
inline void orthonormal_hermite(double x, int order, std::vector<double>& p) {
  p.assign(static_cast<std::size_t>(order) + 1, 0.0);
  p[0] = 1.0;
  if (order >= 1) p[1] = x;
  for (int k = 1; k < order; ++k)
    p[k + 1] = (x * p[k] - std::sqrt(static_cast<double>(k)) * p[k - 1]) / std::sqrt(static_cast<double>(k + 1));
}

inline HermiteRule build_hermite_rule(int order) {
  if (order < 1) throw std::invalid_argument("Gauss-Hermite order must be >= 1");
  // Golub-Welsch start, polished by Newton on p_Q; weights from the Christoffel
  // function so that tiny tail weights keep full relative accuracy.
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(order);
  Eigen::VectorXd sub(std::max(order - 1, 0));
  for (int k = 1; k < order; ++k) sub(k - 1) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);

  HermiteRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  rule.log_ratio.resize(order);
  std::vector<double> p;
  for (int q = 0; q < order; ++q) {
    double x = es.eigenvalues()(q);
    for (int it = 0; it < 8; ++it) {
      orthonormal_hermite(x, order, p);
      double dp = std::sqrt(static_cast<double>(order)) * p[order - 1];
      double step = p[order] / dp;
      x -= step;
      if (std::abs(step) < 1e-16 * std::max(1.0, std::abs(x))) break;
    }
    orthonormal_hermite(x, order, p);
    double s = 0.0;
    for (int k = 0; k < order; ++k) s += p[k] * p[k];
    rule.nodes[q] = x;
    rule.weights[q] = 1.0 / s;
    rule.log_ratio[q] = -std::log(s) + 0.5 * x * x;
  }
  return rule;
}

}  // namespace detail

inline const HermiteRule& hermite_rule(int order) {
  static std::mutex mu;
  static std::map<int, std::unique_ptr<HermiteRule>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[order];
  if (!slot) slot = std::make_unique<HermiteRule>(detail::build_hermite_rule(order));
  return *slot;
}

}  // namespace jmcox
