#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <random>

#include "fixtures.hpp"
#include "jmcox/covariate_model.hpp"
#include "jmcox/npml_fit.hpp"
#include "jmcox/posterior.hpp"
#include "oracles.hpp"

using namespace jmcox;

namespace {

TransitionParams random_alpha(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), v(0.2, 2.0);
  return {u(rng), v(rng), u(rng), u(rng), v(rng)};
}

std::vector<double> random_values(std::mt19937_64& rng, int m) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> z(static_cast<std::size_t>(m));
  for (auto& x : z) x = nd(rng);
  return z;
}

TEST(LogJointDensity, SingleStandardNormalAtZero) {
  std::vector<double> z{0.0};
  EXPECT_NEAR(log_joint_density(z, {0, 1, 0, 0, 1}), -0.9189385332046727, 1e-12);
}

TEST(LogJointDensity, TwoIndependentStandardNormals) {
  std::vector<double> z{0.0, 0.0};
  EXPECT_NEAR(log_joint_density(z, {0, 1, 0, 0, 1}), -1.8378770664093453, 1e-12);
}

TEST(LogJointDensity, TransitionTerm) {
  std::vector<double> z{1.0, 2.0};
  EXPECT_NEAR(log_joint_density(z, {0, 1, 0, 1, 1}), -2.8378770664093453, 1e-12);
}

TEST(LogJointDensity, RejectsNonFinite) {
  std::vector<double> z{0.0, std::nan("")};
  EXPECT_THROW(log_joint_density(z, {0, 1, 0, 0, 1}), std::domain_error);
}

TEST(LogJointDensity, IntegratesToOneOverLastCoordinate) {
  std::mt19937_64 rng(11);
  for (int c = 0; c < 20; ++c) {
    auto al = random_alpha(rng);
    auto hist = random_values(rng, 3);
    double m = al.a + al.b * hist.back(), sd = std::sqrt(al.ssq);
    const int N = 200000;
    double lo = m - 10 * sd, h = 20 * sd / N, acc = 0.0;
    double base = log_joint_density(hist, al);
    for (int i = 0; i <= N; ++i) {
      auto v = hist;
      v.push_back(lo + i * h);
      acc += std::exp(log_joint_density(v, al) - base) * ((i == 0 || i == N) ? 0.5 : 1.0);
    }
    EXPECT_NEAR(acc * h, 1.0, 1e-8);
  }
}

TEST(CondLatentParams, Examples) {
  std::vector<double> h{0.0, 2.0};
  auto p = cond_latent_params(h, {0, 1, 0.5, 0.8, 0.25});
  EXPECT_DOUBLE_EQ(p.mean, 2.1);
  EXPECT_DOUBLE_EQ(p.var, 0.25);
  auto q = cond_latent_params(h, {0, 1, 0.5, 0.0, 0.25});
  EXPECT_DOUBLE_EQ(q.mean, 0.5);
  std::vector<double> z0{0.0};
  EXPECT_DOUBLE_EQ(cond_latent_params(z0, {0, 1, 0.5, 0.8, 0.25}).mean, 0.5);
}

TEST(ScoreAlpha, Examples) {
  std::vector<double> z0{0.0}, z1{1.0};
  EXPECT_DOUBLE_EQ(score_alpha(z0, {0, 1, 0, 0, 1})(0), 0.0);
  EXPECT_DOUBLE_EQ(score_alpha(z1, {0, 1, 0, 0, 1})(0), 1.0);
}

TEST(ScoreAlpha, MatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  for (int c = 0; c < 50; ++c) {
    auto al = random_alpha(rng);
    auto z = random_values(rng, 1 + c % 5);
    AlphaVector g = score_alpha(z, al);
    for (int k = 0; k < 5; ++k) {
      auto p = al.to_array(), m = al.to_array();
      const double h = 1e-5;
      p[k] += h;
      m[k] -= h;
      double fd = (log_joint_density(z, TransitionParams::from_array(p)) -
                   log_joint_density(z, TransitionParams::from_array(m))) /
                  (2 * h);
      EXPECT_NEAR(g(k), fd, 1e-6 * std::max(1.0, std::abs(fd))) << "case " << c << " k " << k;
    }
  }
}

TEST(HessianAlpha, ExamplesAndSymmetry) {
  std::vector<double> z0{0.0};
  AlphaMatrix h = hessian_alpha(z0, {0, 1, 0, 0, 1});
  EXPECT_DOUBLE_EQ(h(0, 0), -1.0);
  std::mt19937_64 rng(6);
  for (int c = 0; c < 20; ++c) {
    auto H = hessian_alpha(random_values(rng, 4), random_alpha(rng));
    EXPECT_TRUE(H == H.transpose());
  }
}

TEST(HessianAlpha, MatchesFiniteDifferenceOfScore) {
  std::mt19937_64 rng(7);
  for (int c = 0; c < 30; ++c) {
    auto al = random_alpha(rng);
    auto z = random_values(rng, 1 + c % 4);
    AlphaMatrix H = hessian_alpha(z, al);
    for (int k = 0; k < 5; ++k) {
      auto p = al.to_array(), m = al.to_array();
      const double h = 1e-6;
      p[k] += h;
      m[k] -= h;
      AlphaVector fd = (score_alpha(z, TransitionParams::from_array(p)) - score_alpha(z, TransitionParams::from_array(m))) / (2 * h);
      for (int r = 0; r < 5; ++r) EXPECT_NEAR(H(r, k), fd(r), 1e-5 * std::max(1.0, std::abs(fd(r))));
    }
  }
}

// Degenerate atoms at the terminal values of full-information subjects.
std::vector<PosteriorAtoms> degenerate_atoms(const Dataset& d) {
  std::vector<PosteriorAtoms> at;
  for (const auto& s : d.subjects) at.push_back(PosteriorAtoms::degenerate(*s.terminal));
  return at;
}

TEST(WeightedMle, TwoPointResponseFloorsVariance) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0,
                            {fixture::subject(1, 0.5, 1, {0.0}, 1.0), fixture::subject(2, 0.8, 0, {1.0}, 1.0)});
  auto fit = weighted_mle_alpha(d, degenerate_atoms(d));
  EXPECT_NEAR(fit.alpha.b, 0.0, 1e-14);
  EXPECT_NEAR(fit.alpha.a, 1.0, 1e-14);
  EXPECT_EQ(fit.alpha.ssq, AlphaBox{}.var_floor);
  EXPECT_FALSE(fit.warnings.empty());
}

TEST(WeightedMle, FewerThanTwoSubjectsThrows) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0, {fixture::subject(1, 0.5, 1, {0.0}, 1.0)});
  EXPECT_THROW(weighted_mle_alpha(d, degenerate_atoms(d)), validation_error);
}

TEST(WeightedMle, DegenerateAtTruthEqualsFullyObservedMle) {
  auto sd = fixture::simulated(80, 21);
  Dataset full = fullinfo_dataset(sd.data, sd.truths);
  auto fit = weighted_mle_alpha(full, degenerate_atoms(full));
  // closed-form complete-data MLE computed directly
  double n = 0, s0 = 0;
  std::vector<std::pair<double, double>> tr;
  for (const auto& s : full.subjects) {
    n += 1;
    s0 += s.z[0];
    for (std::size_t j = 1; j < s.z.size(); ++j) tr.push_back({s.z[j - 1], s.z[j]});
    tr.push_back({s.z.back(), *s.terminal});
  }
  double mu0 = s0 / n, v0 = 0;
  for (const auto& s : full.subjects) v0 += (s.z[0] - mu0) * (s.z[0] - mu0) / n;
  Eigen::MatrixXd X(tr.size(), 2);
  Eigen::VectorXd y(tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) {
    X(i, 0) = 1;
    X(i, 1) = tr[i].first;
    y(i) = tr[i].second;
  }
  Eigen::VectorXd ab = X.colPivHouseholderQr().solve(y);
  double ssq = (y - X * ab).squaredNorm() / tr.size();
  EXPECT_NEAR(fit.alpha.mu0, mu0, 1e-12);
  EXPECT_NEAR(fit.alpha.s0sq, v0, 1e-12);
  EXPECT_NEAR(fit.alpha.a, ab(0), 1e-10);
  EXPECT_NEAR(fit.alpha.b, ab(1), 1e-10);
  EXPECT_NEAR(fit.alpha.ssq, ssq, 1e-10);
}

TEST(WeightedMle, MatchesNumericalMaximizer) {
  auto sd = fixture::simulated(12, 8);
  Theta th{{0.1, 1.2, 0.05, 0.6, 0.3}, 0.8, nelson_aalen(sd.data)};
  auto atoms = e_step(sd.data, th, 20);
  auto fit = weighted_mle_alpha(sd.data, atoms);
  auto objective = [&](const std::vector<double>& p) {
    TransitionParams al{p[0], std::exp(p[1]), p[2], p[3], std::exp(p[4])};
    double q = 0.0;
    for (std::size_t i = 0; i < sd.data.size(); ++i) {
      const auto& s = sd.data.subjects[i];
      for (std::size_t k = 0; k < atoms[i].size(); ++k)
        q += atoms[i].weights[k] * log_joint_density(complete_values(s.z, atoms[i].nodes[k]), al);
    }
    return q;
  };
  auto best = oracle::nelder_mead_max(objective, {0.0, 0.0, 0.0, 0.0, 0.0}, 0.5);
  for (int r = 0; r < 3; ++r) best = oracle::nelder_mead_max(objective, best, 0.05);
  EXPECT_NEAR(fit.alpha.mu0, best[0], 1e-6);
  EXPECT_NEAR(fit.alpha.s0sq, std::exp(best[1]), 1e-6);
  EXPECT_NEAR(fit.alpha.a, best[2], 1e-6);
  EXPECT_NEAR(fit.alpha.b, best[3], 1e-6);
  EXPECT_NEAR(fit.alpha.ssq, std::exp(best[4]), 1e-6);
}

TEST(WeightedMle, ScoreVanishesAndHessianNegativeAtMaximizer) {
  auto sd = fixture::simulated(150, 9);
  Theta th{{0, 1, 0, 0.7, 0.25}, 1.0, nelson_aalen(sd.data)};
  auto atoms = e_step(sd.data, th, 40);
  auto fit = weighted_mle_alpha(sd.data, atoms);
  AlphaVector g = mean_alpha_score(sd.data, atoms, fit.alpha) * static_cast<double>(sd.data.size());
  EXPECT_LE(g.lpNorm<Eigen::Infinity>(), 1e-6);
  AlphaMatrix H = mean_alpha_hessian(sd.data, atoms, fit.alpha);
  Eigen::SelfAdjointEigenSolver<AlphaMatrix> es(H);
  EXPECT_LE(es.eigenvalues().maxCoeff(), 1e-8);
}

TEST(ObservedOnlyAlpha, UsesOnlyMeasuredTransitions) {
  auto d = fixture::dataset({0.0, 1.0, 2.0}, 3.0,
                            {fixture::subject(1, 2.5, 0, {0.0, 1.0, 2.0}), fixture::subject(2, 2.5, 0, {1.0, 1.5, 3.0})});
  auto al = observed_only_alpha(d);
  // four transitions (0,1), (1,2), (1,1.5), (1.5,3): least squares slope
  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 1, 1, 1, 1, 1, 1.5;
  Eigen::VectorXd y(4);
  y << 1, 2, 1.5, 3;
  Eigen::VectorXd ab = X.colPivHouseholderQr().solve(y);
  EXPECT_NEAR(al.a, ab(0), 1e-12);
  EXPECT_NEAR(al.b, ab(1), 1e-12);
  EXPECT_NEAR(al.mu0, 0.5, 1e-15);
}

TEST(DrawNormal, TruncationRespected) {
  std::mt19937_64 rng(1);
  Truncation t{true, 0.5};
  for (int i = 0; i < 2000; ++i) EXPECT_LE(std::abs(draw_normal(rng, 0.0, 1.0, t)), 0.5);
  EXPECT_THROW(draw_normal(rng, 2.0, 1.0, t), validation_error);
}

}  // namespace
