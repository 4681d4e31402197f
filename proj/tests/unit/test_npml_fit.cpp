#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "jmcox/baseline_cox.hpp"
#include "jmcox/npml_fit.hpp"
#include "oracles.hpp"

using namespace jmcox;

namespace {

std::vector<PosteriorAtoms> atoms_at(const Dataset& d, const Theta& th, int q = 40) { return e_step(d, th, q); }

SieveHazard random_hazard(const Dataset& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.005, 0.08);
  std::vector<double> jumps(d.event_count());
  for (auto& j : jumps) j = u(rng);
  return SieveHazard(d.event_times(), jumps);
}

TEST(WN, BetaZeroIsAtRiskFraction) {
  auto sd = fixture::simulated(60, 1);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.0, nelson_aalen(sd.data)};
  auto at = atoms_at(sd.data, th);
  for (double u : sd.data.event_times()) {
    double risk = 0;
    for (const auto& s : sd.data.subjects) risk += s.x >= u;
    EXPECT_NEAR(w_n(u, sd.data, at, 0.0), risk / 60.0, 1e-13);
  }
}

TEST(WN, SingleSubjectIsPosteriorMgf) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0, {fixture::subject(1, 1.4, 1, {0.2, 0.5})});
  Theta th{{0, 1, 0.1, 0.5, 0.3}, 0.8, SieveHazard({1.4}, {0.6})};
  auto at = atoms_at(d, th);
  EXPECT_NEAR(w_n(1.4, d, at, 0.8), cond_exp(at[0], [](double z) { return std::exp(0.8 * z); }), 1e-14);
}

TEST(WN, FullyObservedIsClassicalRiskSum) {
  auto sd = fixture::simulated(40, 2);
  Dataset full = fullinfo_dataset(sd.data, sd.truths);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.9, nelson_aalen(full)};
  auto at = atoms_at(full, th);
  for (double u : full.event_times()) {
    double acc = 0;
    for (const auto& s : full.subjects)
      if (s.x >= u) acc += std::exp(0.9 * path_value(s, u, full.grid, CovariatePath::observed));
    EXPECT_NEAR(w_n(u, full, at, 0.9), acc / 40.0, 1e-13);
  }
}

TEST(LambdaUpdate, NelsonAalenForTwoSubjects) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0,
                            {fixture::subject(1, 0.5, 1, {0.0}, 1.0), fixture::subject(2, 1.5, 1, {0.0, 1.0}, 2.0)});
  std::vector<PosteriorAtoms> at{PosteriorAtoms::degenerate(1.0), PosteriorAtoms::degenerate(2.0)};
  auto h = lambda_update(d, at, 0.0);
  EXPECT_DOUBLE_EQ(h.jumps()[0], 0.5);
  EXPECT_DOUBLE_EQ(h.jumps()[1], 1.0);
}

TEST(LambdaUpdate, SingleSubject) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0, {fixture::subject(1, 1.4, 1, {0.2, 0.5})});
  Theta th{{0, 1, 0.1, 0.5, 0.3}, 0.8, SieveHazard({1.4}, {0.6})};
  auto at = atoms_at(d, th);
  auto h = lambda_update(d, at, 0.8);
  EXPECT_NEAR(h.jumps()[0], 1.0 / cond_exp(at[0], [](double z) { return std::exp(0.8 * z); }), 1e-14);
}

TEST(LambdaUpdate, FixedPointIdentity) {
  auto sd = fixture::simulated(5, 33);
  while (sd.data.event_count() == 0) sd = fixture::simulated(5, 34);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.6, nelson_aalen(sd.data)};
  auto at = atoms_at(sd.data, th);
  auto h = lambda_update(sd.data, at, 0.6);
  for (std::size_t k = 0; k < h.size(); ++k)
    EXPECT_NEAR(h.jumps()[k] * w_n(h.times()[k], sd.data, at, 0.6), 1.0 / 5.0, 1e-12);
}

TEST(LambdaUpdate, NelsonAalenAtBetaZeroOnSimulatedData) {
  auto sd = fixture::simulated(200, 3);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.0, nelson_aalen(sd.data)};
  auto h = lambda_update(sd.data, atoms_at(sd.data, th), 0.0);
  auto na = nelson_aalen(sd.data);
  for (std::size_t k = 0; k < h.size(); ++k) EXPECT_NEAR(h.jumps()[k], na.jumps()[k], 1e-12);
}

TEST(ScoreBeta, OneSubjectDegenerateCancels) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0, {fixture::subject(1, 1.4, 1, {0.2, 0.5}, 1.3)});
  std::vector<PosteriorAtoms> at{PosteriorAtoms::degenerate(1.3)};
  for (double beta : {-1.0, 0.0, 0.5, 2.0}) {
    auto h = lambda_update(d, at, beta);
    EXPECT_NEAR(score_beta(d, at, beta, h), 0.0, 1e-14);
  }
}

TEST(ScoreBeta, ConstantCovariateFactorization) {
  const double c = 0.7, beta = 0.4;
  std::vector<Subject> subs;
  std::vector<double> xs{0.3, 0.8, 1.3, 1.7, 2.0};
  std::vector<int> ds{1, 0, 1, 1, 0};
  for (int i = 0; i < 5; ++i) {
    std::vector<double> z(xs[i] > 1.0 ? 2 : 1, c);
    subs.push_back(fixture::subject(i + 1, xs[i], ds[i], z, c));
  }
  auto d = fixture::dataset({0.0, 1.0}, 2.0, subs);
  std::vector<PosteriorAtoms> at(5, PosteriorAtoms::degenerate(c));
  SieveHazard h(d.event_times(), {0.1, 0.3, 0.2});
  double expect = 0.0;
  for (const auto& s : d.subjects) expect += s.delta * c - c * std::exp(beta * c) * h(s.x);
  EXPECT_NEAR(score_beta(d, at, beta, h), expect / 5.0, 1e-14);
  // information: c^2 (1/n) sum Lambda(x_i) at beta = 0
  double info = 0.0;
  for (const auto& s : d.subjects) info += c * c * h(s.x);
  EXPECT_NEAR(info_beta(d, at, 0.0, h), info / 5.0, 1e-14);
  EXPECT_EQ(info_beta(d, at, 0.0, SieveHazard(d.event_times(), {0.0, 0.0, 0.0})), 0.0);
}

TEST(ScoreBeta, FiniteDifferenceOfEmObjective) {
  auto sd = fixture::simulated(60, 4);
  Theta th{{0.1, 0.9, 0.0, 0.6, 0.3}, 0.7, random_hazard(sd.data, 4)};
  auto at = atoms_at(sd.data, th);
  const double h = 1e-5;
  Theta p = th, m = th;
  p.beta += h;
  m.beta -= h;
  double fd = (em_objective(sd.data, p, at) - em_objective(sd.data, m, at)) / (2 * h) / 60.0;
  EXPECT_NEAR(score_beta(sd.data, at, th.beta, th.hazard), fd, 1e-6);
  EXPECT_GT(info_beta(sd.data, at, th.beta, th.hazard), 0.0);
}

TEST(ScoreFull, BetaProbeIsScoreBeta) {
  auto sd = fixture::simulated(50, 5);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.5, random_hazard(sd.data, 5)};
  auto at = atoms_at(sd.data, th);
  Probe g = Probe::zero(th.hazard.size());
  g.h2 = 1.0;
  EXPECT_NEAR(score_full(sd.data, th, at, g), score_beta(sd.data, at, th.beta, th.hazard), 1e-15);
}

TEST(ScoreFull, MartingaleBalanceAtNelsonAalen) {
  auto sd = fixture::simulated(70, 6);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.0, nelson_aalen(sd.data)};
  auto at = atoms_at(sd.data, th);
  Probe g = Probe::zero(th.hazard.size());
  std::fill(g.h3.begin(), g.h3.end(), 1.0);
  EXPECT_NEAR(score_full(sd.data, th, at, g), 0.0, 1e-14);
}

TEST(ScoreFull, HazardDirectionIsDerivativeOfEmObjective) {
  // d/ds Q(dL_k (1 + s h3_k)) / n at s = 0 equals the h3 part of the score
  auto sd = fixture::simulated(40, 7);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.8, random_hazard(sd.data, 7)};
  auto at = atoms_at(sd.data, th);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  Probe g = Probe::zero(th.hazard.size());
  for (auto& v : g.h3) v = nd(rng);
  auto shifted = [&](double s) {
    Theta t = th;
    std::vector<double> j = th.hazard.jumps();
    for (std::size_t k = 0; k < j.size(); ++k) j[k] *= 1.0 + s * g.h3[k];
    t.hazard = SieveHazard(th.hazard.times(), j);
    return em_objective(sd.data, t, at);
  };
  const double h = 1e-6;
  double fd = (shifted(h) - shifted(-h)) / (2 * h) / 40.0;
  EXPECT_NEAR(score_full(sd.data, th, at, g), fd, 1e-7);
}

TEST(ObservedLoglik, CensoredSingleMeasurementMarginal) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0,
                            {fixture::subject(1, 0.5, 0, {0.0}), fixture::subject(2, 1.5, 1, {0.0, 0.3})});
  Theta th{{0, 1, 0, 0.5, 1}, 0.7, SieveHazard({1.5}, {0.4})};
  // subject 1 leaves before any event time: only its entry density remains
  auto sub = d;
  sub.subjects.resize(1);
  EXPECT_NEAR(observed_loglik(sub, th, 40), -0.9189385332046727, 1e-12);
}

TEST(ObservedLoglik, BetaZeroIntegratesOut) {
  auto sd = fixture::simulated(40, 8);
  Theta th{{0, 1, 0, 0.7, 0.25}, 0.0, random_hazard(sd.data, 8)};
  double expect = 0.0;
  for (const auto& s : sd.data.subjects) {
    expect += log_joint_density(s.z, th.alpha) - th.hazard(s.x);
    if (s.delta) expect += std::log(th.hazard.jumps()[*th.hazard.index_of(s.x)]);
  }
  EXPECT_NEAR(observed_loglik(sd.data, th, 40), expect, 1e-9);
}

TEST(ObservedLoglik, MatchesTrapezoidOracle) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> beta(-1.5, 1.5);
  for (int c = 0; c < 5; ++c) {
    auto sd = fixture::simulated(30, 100 + c);
    Theta th{{0.1, 0.8, -0.1, 0.6, 0.3}, beta(rng), random_hazard(sd.data, c)};
    EXPECT_NEAR(observed_loglik(sd.data, th, 40), oracle::loglik(sd.data, th), 1e-6);
  }
}

TEST(EmFit, AscentFixedPointAndCertificate) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto sd = fixture::simulated(120, seed);
    auto r = em_fit(sd.data, FitConfig{});
    ASSERT_TRUE(r.converged) << seed;
    for (std::size_t i = 1; i < r.loglik_trace.size(); ++i)
      EXPECT_GE(r.loglik_trace[i], r.loglik_trace[i - 1] - 1e-8);
    const auto& h = r.theta_hat.hazard;
    for (std::size_t k = 0; k < h.size(); ++k)
      EXPECT_NEAR(h.jumps()[k] * w_n(h.times()[k], sd.data, r.atoms, r.theta_hat.beta), 1.0 / 120.0, 1e-10);
    auto cert = score_certificate(sd.data, r.theta_hat, r.atoms);
    EXPECT_LE(cert.max_norm(), 1e-6);
    EXPECT_LE(r.score_norm, 1e-6);
    EXPECT_NEAR(r.loglik_trace.back(), observed_loglik(sd.data, r.theta_hat, 40), 1e-10);
  }
}

TEST(EmFit, FrozenBetaGivesNelsonAalen) {
  auto sd = fixture::simulated(80, 14);
  FitConfig cfg;
  cfg.beta_box = 0.0;
  auto r = em_fit(sd.data, cfg);
  EXPECT_EQ(r.theta_hat.beta, 0.0);
  auto na = nelson_aalen(sd.data);
  for (std::size_t k = 0; k < na.size(); ++k) EXPECT_NEAR(r.theta_hat.hazard.jumps()[k], na.jumps()[k], 1e-12);
}

TEST(EmFit, FullInformationReducesToPartialLikelihood) {
  auto sd = fixture::simulated(50, 15);
  Dataset full = fullinfo_dataset(sd.data, sd.truths);
  auto r = em_fit(full, FitConfig{});
  auto pl = partial_lik_fit(full, CovariatePath::observed);
  EXPECT_NEAR(r.theta_hat.beta, pl.beta_pl, 1e-6);
  for (std::size_t k = 0; k < pl.breslow.size(); ++k)
    EXPECT_NEAR(r.theta_hat.hazard(pl.breslow.times()[k]), pl.breslow(pl.breslow.times()[k]), 1e-8);
}

TEST(EmFit, HazardBoundHoldsAndJumpsFinite) {
  auto sd = fixture::simulated(100, 16);
  auto r = em_fit(sd.data, FitConfig{});
  for (double j : r.theta_hat.hazard.jumps()) EXPECT_TRUE(std::isfinite(j));
  double bound = hazard_upper_bound(sd.data, r.atoms, r.theta_hat.beta);
  EXPECT_LE(r.theta_hat.hazard(sd.data.tau), bound * (1 + 1e-10));
}

TEST(EmFit, NoEventsRejected) {
  auto d = fixture::dataset({0.0, 1.0}, 2.0,
                            {fixture::subject(1, 0.5, 0, {0.0}), fixture::subject(2, 2.0, 0, {0.0, 1.0})});
  EXPECT_THROW(em_fit(d, FitConfig{}), validation_error);
}

TEST(EmFit, ConfigValidation) {
  FitConfig c;
  c.max_iter = 0;
  EXPECT_THROW(c.validate(), validation_error);
  c = FitConfig{};
  c.tol_param = 0.0;
  EXPECT_THROW(c.validate(), validation_error);
}

TEST(EmFit, MaxIterExhaustedReportsNotConverged) {
  auto sd = fixture::simulated(80, 17);
  FitConfig c;
  c.max_iter = 2;
  auto r = em_fit(sd.data, c);
  EXPECT_FALSE(r.converged);
  EXPECT_FALSE(r.warnings.empty());
}

}  // namespace
