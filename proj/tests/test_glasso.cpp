#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>
#include <sstream>

#include "flowcast/glasso.hpp"
#include "flowcast/network.hpp"

using namespace flowcast;

namespace {

Eigen::MatrixXd random_spd(long p, std::uint64_t seed, double diag_boost = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd A(p, 2 * p);
  for (long i = 0; i < p; ++i)
    for (long j = 0; j < 2 * p; ++j) A(i, j) = g(rng);
  Eigen::MatrixXd S = A * A.transpose() / static_cast<double>(2 * p);
  S.diagonal().array() += diag_boost;
  return S;
}

// Brute-force outer-product evaluation of the covariance with divisor N.
Eigen::MatrixXd covariance_oracle(const Eigen::MatrixXd& rows) {
  long n = rows.rows(), p = rows.cols();
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(p);
  for (long k = 0; k < n; ++k) mu += rows.row(k).transpose();
  mu /= static_cast<double>(n);
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(p, p);
  for (long k = 0; k < n; ++k) {
    Eigen::VectorXd d = rows.row(k).transpose() - mu;
    S += d * d.transpose();
  }
  return S / static_cast<double>(n);
}

double lasso_objective(const Eigen::MatrixXd& W, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& beta, double rho) {
  return 0.5 * beta.dot(W * beta) - beta.dot(s) + rho * beta.cwiseAbs().sum();
}

// Independent slow solver: FISTA with a Lipschitz step, run far past the
// precision needed, used only as a test oracle.
Eigen::VectorXd fista_oracle(const Eigen::MatrixXd& W, const Eigen::VectorXd& s, double rho,
                             int iters) {
  double L = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(W).eigenvalues().maxCoeff();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(s.size());
  Eigen::VectorXd z = x;
  double t = 1.0;
  for (int it = 0; it < iters; ++it) {
    Eigen::VectorXd grad = W * z - s;
    Eigen::VectorXd step = z - grad / L;
    Eigen::VectorXd xn(s.size());
    for (long k = 0; k < s.size(); ++k) {
      double v = step(k), r = rho / L;
      xn(k) = v > r ? v - r : (v < -r ? v + r : 0.0);
    }
    double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    z = xn + ((t - 1.0) / tn) * (xn - x);
    x = xn;
    t = tn;
  }
  return x;
}

// Subgradient optimality check for the lasso: grad_k + rho*sign(beta_k) = 0
// where beta_k != 0, |grad_k| <= rho where beta_k == 0.
double lasso_kkt_violation(const Eigen::MatrixXd& W, const Eigen::VectorXd& s,
                           const Eigen::VectorXd& beta, double rho) {
  Eigen::VectorXd grad = W * beta - s;
  double worst = 0.0;
  for (long k = 0; k < beta.size(); ++k) {
    if (beta(k) != 0.0)
      worst = std::max(worst, std::fabs(grad(k) + rho * (beta(k) > 0 ? 1.0 : -1.0)));
    else
      worst = std::max(worst, std::max(0.0, std::fabs(grad(k)) - rho));
  }
  return worst;
}

GlassoConfig tight_config(double rho) {
  GlassoConfig cfg;
  cfg.rho = rho;
  cfg.inner_tol = 1e-12;
  cfg.max_inner_iters = 20000;
  cfg.dual_tol = 1e-9;
  cfg.outer_tol = 1e-10;
  cfg.max_outer_iters = 500;
  return cfg;
}

}  // namespace

TEST(EmpiricalCovariance, IdenticalRowsGiveZero) {
  Eigen::MatrixXd rows(3, 2);
  rows << 4.0, 7.0, 4.0, 7.0, 4.0, 7.0;
  CovarianceMatrix cov = empirical_covariance(rows);
  EXPECT_EQ(cov.S.cwiseAbs().maxCoeff(), 0.0);
}

TEST(EmpiricalCovariance, OneDimensionalHandValue) {
  // samples 1 and -1: mean 0, S = (1 + 1)/2 = 1
  Eigen::MatrixXd rows(2, 1);
  rows << 1.0, -1.0;
  CovarianceMatrix cov = empirical_covariance(rows);
  EXPECT_DOUBLE_EQ(cov.S(0, 0), 1.0);
}

TEST(EmpiricalCovariance, MatchesBruteForceOracle) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.0, 2.0);
  Eigen::MatrixXd rows(5, 3);
  for (long i = 0; i < 5; ++i)
    for (long j = 0; j < 3; ++j) rows(i, j) = g(rng);
  CovarianceMatrix cov = empirical_covariance(rows);
  EXPECT_LT((cov.S - covariance_oracle(rows)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EmpiricalCovariance, NeedsTwoRows) {
  Eigen::MatrixXd rows(1, 2);
  rows << 1.0, 2.0;
  EXPECT_THROW(empirical_covariance(rows), std::invalid_argument);
}

TEST(LassoSubproblem, IdentityNoPenaltyReturnsS12) {
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(3, 3);
  Eigen::VectorXd s(3);
  s << 0.4, -1.2, 0.7;
  LassoResult r = lasso_subproblem(W, s, 0.0, 1e-12);
  EXPECT_TRUE(r.converged);
  EXPECT_LT((r.beta - s).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(LassoSubproblem, LargePenaltyKillsAllCoordinates) {
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(4, 4);
  Eigen::VectorXd s(4);
  s << 0.4, -0.9, 0.7, 0.2;
  LassoResult r = lasso_subproblem(W, s, 0.9, 1e-12);
  EXPECT_EQ(r.beta.cwiseAbs().maxCoeff(), 0.0);
  // subgradient oracle confirms beta = 0 is optimal
  EXPECT_LE(lasso_kkt_violation(W, s, r.beta, 0.9), 1e-12);
}

TEST(LassoSubproblem, MatchesSlowOracleOnRandomInstance) {
  Eigen::MatrixXd W = random_spd(4, 77);
  std::mt19937_64 rng(78);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd s(4);
  for (long i = 0; i < 4; ++i) s(i) = g(rng);
  double rho = 0.3;
  LassoResult r = lasso_subproblem(W, s, rho, 1e-13, 100000);
  Eigen::VectorXd oracle = fista_oracle(W, s, rho, 50000);
  EXPECT_NEAR(lasso_objective(W, s, r.beta, rho), lasso_objective(W, s, oracle, rho), 1e-8);
  EXPECT_LE(lasso_kkt_violation(W, s, r.beta, rho), 1e-9);
}

TEST(LassoSubproblem, NonPdIsError) {
  Eigen::MatrixXd W(2, 2);
  W << 1.0, 2.0, 2.0, 1.0;  // indefinite
  Eigen::VectorXd s(2);
  s << 1.0, 1.0;
  EXPECT_THROW(lasso_subproblem(W, s, 0.1), std::invalid_argument);
}

TEST(Glasso, DiagonalLaw) {
  Eigen::MatrixXd S(2, 2);
  S << 2.0, 0.3, 0.3, 3.0;
  CovarianceMatrix cov{S, {{"a", 0}, {"b", 0}}};
  PrecisionEstimate est = glasso(cov, tight_config(0.5));
  EXPECT_EQ(est.W(0, 0), 2.5);
  EXPECT_EQ(est.W(1, 1), 3.5);
  EXPECT_TRUE(est.converged);
}

TEST(Glasso, ZeroPenaltyRecoversInverse) {
  Eigen::MatrixXd S = random_spd(4, 31);
  CovarianceMatrix cov{S, {{"a", 0}, {"b", 0}, {"c", 0}, {"d", 0}}};
  PrecisionEstimate est = glasso(cov, tight_config(0.0));
  EXPECT_TRUE(est.converged);
  EXPECT_LT((est.Theta - S.inverse()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Glasso, LargePenaltyGivesDiagonalTheta) {
  Eigen::MatrixXd S = random_spd(5, 32);
  double rho = S.cwiseAbs().maxCoeff() + 0.1;  // >= max off-diagonal
  CovarianceMatrix cov{S, {}};
  for (int i = 0; i < 5; ++i) cov.variable_names.push_back({"v" + std::to_string(i), 0});
  PrecisionEstimate est = glasso(cov, tight_config(rho));
  EXPECT_TRUE(est.converged);
  for (long i = 0; i < 5; ++i) {
    EXPECT_NEAR(est.Theta(i, i), 1.0 / (S(i, i) + rho), 1e-8);
    for (long j = 0; j < 5; ++j)
      if (i != j) EXPECT_EQ(est.Theta(i, j), 0.0);
  }
  // the thresholded graph is exactly edgeless
  EXPECT_TRUE(extract_graph(est, 5e-4).edges.empty());
}

TEST(Glasso, KktResidualSmallOnRandomInstances) {
  for (std::uint64_t seed : {101, 102, 103}) {
    Eigen::MatrixXd S = random_spd(5, seed);
    CovarianceMatrix cov{S, {}};
    for (int i = 0; i < 5; ++i) cov.variable_names.push_back({"v" + std::to_string(i), 0});
    double mean_off = 0.0;
    for (long i = 0; i < 5; ++i)
      for (long j = 0; j < 5; ++j)
        if (i != j) mean_off += std::fabs(S(i, j));
    mean_off /= 20.0;
    GlassoConfig cfg = tight_config(0.2 * mean_off);
    PrecisionEstimate est = glasso(cov, cfg);
    ASSERT_TRUE(est.converged);
    EXPECT_LT(kkt_residual(cov, est, cfg.rho), 1e-4);
    long p = S.rows();
    EXPECT_LT((est.W * est.Theta - Eigen::MatrixXd::Identity(p, p)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Glasso, KktResidualDetectsConstructedViolation) {
  Eigen::MatrixXd S = random_spd(3, 44);
  CovarianceMatrix cov{S, {{"a", 0}, {"b", 0}, {"c", 0}}};
  PrecisionEstimate fake;
  fake.W = S;                // violates W_ii = S_ii + rho
  fake.Theta = S.inverse();  // nonzero off-diagonals with W = S
  fake.converged = true;
  double rho = 0.25;
  EXPECT_NEAR(kkt_residual(cov, fake, rho), rho, 1e-12);
}

TEST(Glasso, KktResidualZeroPenaltyInverse) {
  Eigen::MatrixXd S = random_spd(4, 45);
  CovarianceMatrix cov{S, {{"a", 0}, {"b", 0}, {"c", 0}, {"d", 0}}};
  PrecisionEstimate est = glasso(cov, tight_config(0.0));
  EXPECT_LT(kkt_residual(cov, est, 0.0), 1e-8);
}

TEST(Glasso, MonotoneSparsityTrend) {
  Eigen::MatrixXd S = random_spd(6, 55, 0.5);
  CovarianceMatrix cov{S, {}};
  for (int i = 0; i < 6; ++i) cov.variable_names.push_back({"v" + std::to_string(i), 0});
  double mean_off = 0.0;
  for (long i = 0; i < 6; ++i)
    for (long j = 0; j < 6; ++j)
      if (i != j) mean_off += std::fabs(S(i, j));
  mean_off /= 30.0;
  std::size_t prev_edges = 0;
  bool first = true;
  for (double factor : {0.05, 0.2, 0.8}) {
    PrecisionEstimate est = glasso(cov, tight_config(factor * mean_off));
    std::size_t edges = extract_graph(est, 5e-4).edges.size();
    if (!first) EXPECT_LE(edges, prev_edges + 6);  // p of slack for near-threshold churn
    prev_edges = edges;
    first = false;
  }
}

TEST(Glasso, PermutationEquivariance) {
  const long p = 5;
  Eigen::MatrixXd S = random_spd(p, 66);
  CovarianceMatrix cov{S, {}};
  for (int i = 0; i < p; ++i) cov.variable_names.push_back({"v" + std::to_string(i), 0});
  GlassoConfig cfg = tight_config(0.05);
  PrecisionEstimate est = glasso(cov, cfg);

  std::vector<int> perm{3, 0, 4, 1, 2};
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(p, p);
  for (long i = 0; i < p; ++i) P(i, perm[i]) = 1.0;
  CovarianceMatrix cov2{P * S * P.transpose(), cov.variable_names};
  PrecisionEstimate est2 = glasso(cov2, cfg);
  EXPECT_LT((est2.Theta - P * est.Theta * P.transpose()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Glasso, ThetaSymmetricByConstruction) {
  Eigen::MatrixXd S = random_spd(6, 67);
  CovarianceMatrix cov{S, {}};
  for (int i = 0; i < 6; ++i) cov.variable_names.push_back({"v" + std::to_string(i), 0});
  PrecisionEstimate est = glasso(cov, tight_config(0.05));
  EXPECT_EQ((est.Theta - est.Theta.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Glasso, InputValidation) {
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 0.5, 0.2, 1.0;  // not symmetric
  CovarianceMatrix cov{bad, {{"a", 0}, {"b", 0}}};
  EXPECT_THROW(glasso(cov, tight_config(0.1)), std::invalid_argument);

  Eigen::MatrixXd singular(2, 2);
  singular << 1.0, 1.0, 1.0, 1.0;
  CovarianceMatrix cov2{singular, {{"a", 0}, {"b", 0}}};
  EXPECT_THROW(glasso(cov2, tight_config(0.0)), std::invalid_argument);
}

TEST(ExtractGraph, ThresholdRules) {
  PrecisionEstimate est;
  est.Theta = Eigen::MatrixXd::Identity(3, 3);
  est.W = est.Theta;
  est.variable_names = {{"a", 0}, {"b", 0}, {"c", 0}};
  EXPECT_TRUE(extract_graph(est, 5e-4).edges.empty());

  est.Theta(0, 1) = est.Theta(1, 0) = 1e-3;
  GraphicalModel g = extract_graph(est, 5e-4);
  ASSERT_EQ(g.edges.size(), 1u);
  EXPECT_EQ(g.edges[0], std::make_pair(0, 1));

  est.Theta(0, 1) = est.Theta(1, 0) = 4.9e-4;  // strictly below the cutoff
  EXPECT_TRUE(extract_graph(est, 5e-4).edges.empty());
  EXPECT_THROW(extract_graph(est, -1.0), std::invalid_argument);
}

namespace {

// Variable universe in the GL pipeline order: per link, lags 0..5.
std::vector<VarRef> six_lag_universe(const RoadNetwork& net) {
  std::vector<VarRef> names;
  for (const auto& l : net.links)
    for (int j = 0; j <= 5; ++j) names.push_back({l.name(), j});
  return names;
}

int node_index(const std::vector<VarRef>& names, const VarRef& v) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == v) return static_cast<int>(i);
  throw std::runtime_error("node not found");
}

}  // namespace

TEST(SelectFeatures, UniverseSizeAndCandidateBound) {
  RoadNetwork net = make_default_network();
  std::vector<VarRef> names = six_lag_universe(net);
  ASSERT_EQ(names.size(), 186u);  // 31 links x 6 variables

  // Fully connect the target to everything; only lagged variables survive.
  PrecisionEstimate est;
  est.Theta = Eigen::MatrixXd::Zero(186, 186);
  est.variable_names = names;
  int target = node_index(names, {"Ba", 0});
  for (int i = 0; i < 186; ++i)
    if (i != target) est.Theta(target, i) = est.Theta(i, target) = 1.0;
  GraphicalModel g = extract_graph(est, 5e-4);
  FeatureSelection sel = select_features(g, "Ba");
  EXPECT_EQ(sel.selected.size(), 155u);  // lagged candidates out of the 156 nodes
  EXPECT_FALSE(sel.fallback_used);
  for (const auto& v : sel.selected) EXPECT_GE(v.lag, 1);
}

TEST(SelectFeatures, NeighborhoodFixtureInStableOrder) {
  RoadNetwork net = make_default_network();
  std::vector<VarRef> names = six_lag_universe(net);
  PrecisionEstimate est;
  est.Theta = Eigen::MatrixXd::Zero(186, 186);
  est.variable_names = names;
  int target = node_index(names, {"Ba", 0});
  std::vector<VarRef> neighbors{{"Ba", 3}, {"Ba", 2}, {"Ba", 1}, {"Eb", 1},
                                {"Fe", 2}, {"Fe", 1}, {"Hl", 1}, {"Ib", 1}};
  for (const auto& v : neighbors) {
    int i = node_index(names, v);
    est.Theta(target, i) = est.Theta(i, target) = 0.01;
  }
  // time-n nodes of other links must be excluded even when connected
  int eb0 = node_index(names, {"Eb", 0});
  est.Theta(target, eb0) = est.Theta(eb0, target) = 0.02;

  GraphicalModel g = extract_graph(est, 5e-4);
  FeatureSelection sel = select_features(g, "Ba");
  std::vector<VarRef> expected{{"Ba", 1}, {"Ba", 2}, {"Ba", 3}, {"Eb", 1},
                               {"Fe", 1}, {"Fe", 2}, {"Hl", 1}, {"Ib", 1}};
  ASSERT_EQ(sel.selected.size(), 8u);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_TRUE(sel.selected[i] == expected[i]);
}

TEST(SelectFeatures, EdgelessGraphFallsBackToOwnLags) {
  RoadNetwork net;
  net.add_junction("B", {"a", "b"});
  std::vector<VarRef> names;
  for (const auto& l : net.links)
    for (int j = 0; j <= 5; ++j) names.push_back({l.name(), j});
  PrecisionEstimate est;
  est.Theta = Eigen::MatrixXd::Zero(12, 12);
  est.variable_names = names;
  GraphicalModel g = extract_graph(est, 5e-4);
  FeatureSelection sel = select_features(g, "Ba");
  EXPECT_TRUE(sel.fallback_used);
  ASSERT_EQ(sel.selected.size(), 5u);
  for (int lag = 1; lag <= 5; ++lag) EXPECT_TRUE(sel.selected[lag - 1] == (VarRef{"Ba", lag}));
  EXPECT_THROW(select_features(g, "Zz"), std::invalid_argument);
}

TEST(Export, DotAndThetaCsvFormats) {
  PrecisionEstimate est;
  est.Theta = Eigen::MatrixXd::Identity(2, 2);
  est.Theta(0, 1) = est.Theta(1, 0) = 0.5;
  est.W = est.Theta;
  est.variable_names = {{"Ba", 0}, {"Ba", 1}};
  GraphicalModel g = extract_graph(est, 1e-3);
  std::ostringstream dot;
  write_dot(g, dot);
  EXPECT_NE(dot.str().find("graph glasso {"), std::string::npos);
  EXPECT_NE(dot.str().find("\"Ba(t)\" -- \"Ba(t-1)\";"), std::string::npos);
  std::ostringstream csv;
  write_theta_csv(est, csv);
  EXPECT_EQ(csv.str().rfind("variable,Ba(t),Ba(t-1)\n", 0), 0u);
}
