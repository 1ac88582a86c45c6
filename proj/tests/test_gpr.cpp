#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "flowcast/gpr.hpp"

using namespace flowcast;

namespace {

KernelParams params_of(std::vector<double> ls, double sf2, double sn2) {
  KernelParams p;
  p.length_scales = Eigen::Map<Eigen::VectorXd>(ls.data(), ls.size());
  p.signal_variance = sf2;
  p.noise_variance = sn2;
  return p;
}

struct RandomProblem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  KernelParams params;
};

RandomProblem random_problem(long d, long n, std::uint64_t seed, double sn2 = 0.05) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.3, 2.0);
  RandomProblem pr;
  pr.X.resize(d, n);
  pr.y.resize(n);
  for (long i = 0; i < d; ++i)
    for (long j = 0; j < n; ++j) pr.X(i, j) = g(rng);
  for (long j = 0; j < n; ++j) pr.y(j) = g(rng);
  std::vector<double> ls(d);
  for (auto& v : ls) v = u(rng);
  pr.params = params_of(ls, u(rng), sn2);
  return pr;
}

// Direct dense evaluation of the posterior: explicit matrix inverse, no
// Cholesky path shared with the implementation.
void dense_posterior(const RandomProblem& pr, const Eigen::MatrixXd& Xstar, bool with_noise,
                     Eigen::VectorXd& mean, Eigen::VectorXd& var) {
  long n = pr.X.cols(), m = Xstar.cols();
  Eigen::MatrixXd Kn(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) Kn(i, j) = se_kernel(pr.X.col(i), pr.X.col(j), pr.params);
  Kn.diagonal().array() += pr.params.noise_variance;
  Eigen::MatrixXd Kinv = Kn.inverse();
  mean.resize(m);
  var.resize(m);
  for (long t = 0; t < m; ++t) {
    Eigen::VectorXd ks(n);
    for (long i = 0; i < n; ++i) ks(i) = se_kernel(pr.X.col(i), Xstar.col(t), pr.params);
    mean(t) = ks.dot(Kinv * pr.y);
    var(t) = pr.params.signal_variance - ks.dot(Kinv * ks);
    if (with_noise) var(t) += pr.params.noise_variance;
  }
}

double dense_lml(const RandomProblem& pr) {
  long n = pr.X.cols();
  Eigen::MatrixXd Kn(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) Kn(i, j) = se_kernel(pr.X.col(i), pr.X.col(j), pr.params);
  Kn.diagonal().array() += pr.params.noise_variance;
  return -0.5 * pr.y.dot(Kn.inverse() * pr.y) - 0.5 * std::log(Kn.determinant()) -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

Eigen::VectorXd fd_gradient(const RandomProblem& pr, double h = 1e-6) {
  Eigen::VectorXd base = pr.params.to_log();
  Eigen::VectorXd grad(base.size());
  for (long k = 0; k < base.size(); ++k) {
    Eigen::VectorXd up = base, dn = base;
    up(k) += h;
    dn(k) -= h;
    GprModel mu = fit(pr.X, pr.y, KernelParams::from_log(up));
    GprModel md = fit(pr.X, pr.y, KernelParams::from_log(dn));
    grad(k) = (log_marginal_likelihood(mu) - log_marginal_likelihood(md)) / (2.0 * h);
  }
  return grad;
}

}  // namespace

TEST(SeKernel, ZeroDistanceGivesSignalVariance) {
  KernelParams p = params_of({1.0, 2.0}, 3.5, 0.0);
  Eigen::VectorXd x(2);
  x << 0.7, -1.2;
  EXPECT_DOUBLE_EQ(se_kernel(x, x, p), 3.5);
}

TEST(SeKernel, SymmetryOnRandomPairs) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  KernelParams p = params_of({0.7, 1.3, 2.1}, 1.7, 0.0);
  for (int t = 0; t < 10; ++t) {
    Eigen::VectorXd a(3), b(3);
    for (int i = 0; i < 3; ++i) {
      a(i) = g(rng);
      b(i) = g(rng);
    }
    EXPECT_DOUBLE_EQ(se_kernel(a, b, p), se_kernel(b, a, p));
  }
}

TEST(SeKernel, HandEvaluatedUnitDistance) {
  KernelParams p = params_of({1.0}, 1.0, 0.0);
  Eigen::VectorXd a(1), b(1);
  a << 0.0;
  b << 1.0;
  EXPECT_NEAR(se_kernel(a, b, p), std::exp(-0.5), 1e-15);
}

TEST(SeKernel, DimensionMismatchIsError) {
  KernelParams p = params_of({1.0}, 1.0, 0.0);
  Eigen::VectorXd a(1), b(2);
  a << 0.0;
  b << 1.0, 2.0;
  EXPECT_THROW(se_kernel(a, b, p), std::invalid_argument);
}

TEST(Fit, SinglePointAlpha) {
  KernelParams p = params_of({1.0}, 2.0, 0.0);
  Eigen::MatrixXd X(1, 1);
  X << 0.3;
  Eigen::VectorXd y(1);
  y << 4.0;
  GprModel m = fit(X, y, p);
  EXPECT_NEAR(m.alpha(0), 4.0 / 2.0, 1e-12);
}

TEST(Fit, CholeskyReconstruction) {
  RandomProblem pr = random_problem(2, 6, 11);
  GprModel m = fit(pr.X, pr.y, pr.params);
  Eigen::MatrixXd Kn = m.K;
  Kn.diagonal().array() += pr.params.noise_variance;
  EXPECT_LT((m.L * m.L.transpose() - Kn).cwiseAbs().maxCoeff(), 1e-10);
  // alpha consistent with the factorization
  EXPECT_LT((Kn * m.alpha - pr.y).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Fit, HugeNoiseDominatesAlpha) {
  RandomProblem pr = random_problem(2, 5, 12, 1e6);
  GprModel m = fit(pr.X, pr.y, pr.params);
  for (long i = 0; i < 5; ++i)
    EXPECT_NEAR(m.alpha(i), pr.y(i) / 1e6, 0.01 * std::max(1e-9, std::fabs(pr.y(i)) / 1e6));
}

TEST(Predict, EmptyTrainingRecoversPrior) {
  KernelParams p = params_of({1.0, 1.0}, 2.5, 0.3);
  GprModel m = fit(Eigen::MatrixXd(2, 0), Eigen::VectorXd(0), p);
  Eigen::MatrixXd Xs(2, 3);
  Xs.setRandom();
  PredictiveDistribution latent = predict(m, Xs, false);
  for (long i = 0; i < 3; ++i) {
    EXPECT_EQ(latent.mean(i), 0.0);
    EXPECT_DOUBLE_EQ(latent.variance(i), 2.5);
  }
  PredictiveDistribution noisy = predict(m, Xs, true);
  EXPECT_DOUBLE_EQ(noisy.variance(0), 2.8);
}

TEST(Predict, NoiseFreeInterpolation) {
  RandomProblem pr = random_problem(1, 5, 13, 0.0);
  GprModel m = fit(pr.X, pr.y, pr.params);
  PredictiveDistribution pd = predict(m, pr.X, false);
  for (long i = 0; i < 5; ++i) {
    EXPECT_NEAR(pd.mean(i), pr.y(i), 1e-8);
    EXPECT_LT(pd.variance(i), 1e-8);
  }
}

TEST(Predict, TwoPointClosedFormOracle) {
  KernelParams p = params_of({0.8}, 1.3, 0.2);
  Eigen::MatrixXd X(1, 2);
  X << 0.0, 1.0;
  Eigen::VectorXd y(2);
  y << 1.0, -2.0;
  Eigen::MatrixXd Xs(1, 1);
  Xs << 0.4;
  GprModel m = fit(X, y, p);
  PredictiveDistribution pd = predict(m, Xs, false);

  // explicit 2x2 inverse
  double k00 = p.signal_variance + p.noise_variance;
  double k01 = se_kernel(X.col(0), X.col(1), p);
  double det = k00 * k00 - k01 * k01;
  double i00 = k00 / det, i01 = -k01 / det;
  double ks0 = se_kernel(X.col(0), Xs.col(0), p);
  double ks1 = se_kernel(X.col(1), Xs.col(0), p);
  double a0 = i00 * y(0) + i01 * y(1);
  double a1 = i01 * y(0) + i00 * y(1);
  double mean = ks0 * a0 + ks1 * a1;
  double var = p.signal_variance - (ks0 * (i00 * ks0 + i01 * ks1) + ks1 * (i01 * ks0 + i00 * ks1));
  EXPECT_NEAR(pd.mean(0), mean, 1e-10);
  EXPECT_NEAR(pd.variance(0), var, 1e-10);
}

TEST(Predict, DimensionMismatchIsError) {
  RandomProblem pr = random_problem(2, 4, 14);
  GprModel m = fit(pr.X, pr.y, pr.params);
  EXPECT_THROW(predict(m, Eigen::MatrixXd(3, 2)), std::invalid_argument);
}

TEST(Predict, MatchesDenseOracle) {
  for (std::uint64_t seed : {21, 22, 23}) {
    RandomProblem pr = random_problem(3, 15, seed);
    GprModel m = fit(pr.X, pr.y, pr.params);
    Eigen::MatrixXd Xs(3, 7);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> g(0.0, 1.0);
    for (long c = 0; c < 7; ++c)
      for (long r = 0; r < 3; ++r) Xs(r, c) = g(rng);
    PredictiveDistribution pd = predict(m, Xs, true);
    Eigen::VectorXd mean, var;
    dense_posterior(pr, Xs, true, mean, var);
    EXPECT_LT((pd.mean - mean).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((pd.variance - var).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Predict, MarginalizationConsistency) {
  RandomProblem pr = random_problem(2, 8, 24);
  GprModel m = fit(pr.X, pr.y, pr.params);
  Eigen::MatrixXd Xs(2, 5);
  Xs.setRandom();
  PredictiveDistribution all = predict(m, Xs);
  PredictiveDistribution sub = predict(m, Xs.leftCols(2));
  EXPECT_DOUBLE_EQ(all.mean(0), sub.mean(0));
  EXPECT_DOUBLE_EQ(all.variance(1), sub.variance(1));
}

TEST(Predict, PosteriorVarianceNeverExceedsPrior) {
  RandomProblem pr = random_problem(2, 10, 25);
  GprModel m = fit(pr.X, pr.y, pr.params);
  Eigen::MatrixXd Xs(2, 50);
  Xs.setRandom();
  Xs *= 3.0;
  PredictiveDistribution pd = predict(m, Xs, true);
  double cap = pr.params.signal_variance + pr.params.noise_variance + 1e-10;
  for (long i = 0; i < 50; ++i) EXPECT_LE(pd.variance(i), cap);
}

TEST(Predict, AddingAPointNeverRaisesLatentVariance) {
  RandomProblem pr = random_problem(1, 6, 26);
  GprModel small = fit(pr.X.leftCols(5), pr.y.head(5), pr.params);
  GprModel big = fit(pr.X, pr.y, pr.params);
  Eigen::MatrixXd Xs(1, 9);
  for (long i = 0; i < 9; ++i) Xs(0, i) = -2.0 + 0.5 * i;
  PredictiveDistribution ps = predict(small, Xs, false);
  PredictiveDistribution pb = predict(big, Xs, false);
  for (long i = 0; i < 9; ++i) EXPECT_LE(pb.variance(i), ps.variance(i) + 1e-8);
}

TEST(Lml, SingleZeroTarget) {
  // K + sn2*I = [[1]], y = [0] -> -0.5*log(2*pi)
  KernelParams p = params_of({1.0}, 1.0, 0.0);
  Eigen::MatrixXd X(1, 1);
  X << 0.0;
  Eigen::VectorXd y(1);
  y << 0.0;
  GprModel m = fit(X, y, p);
  EXPECT_NEAR(log_marginal_likelihood(m), -0.9189385332046727, 1e-12);
}

TEST(Lml, ZeroTargetsLeaveOnlyDeterminantTerms) {
  RandomProblem pr = random_problem(2, 5, 31);
  pr.y.setZero();
  GprModel m = fit(pr.X, pr.y, pr.params);
  EXPECT_NEAR(log_marginal_likelihood(m), dense_lml(pr), 1e-9);
}

TEST(Lml, MatchesDenseOracle) {
  RandomProblem pr = random_problem(3, 5, 32);
  GprModel m = fit(pr.X, pr.y, pr.params);
  EXPECT_NEAR(log_marginal_likelihood(m), dense_lml(pr), 1e-9);
}

TEST(LmlGradient, MatchesCentralFiniteDifferences) {
  RandomProblem pr = random_problem(3, 6, 41);
  GprModel m = fit(pr.X, pr.y, pr.params);
  Eigen::VectorXd g = lml_gradient(m);
  Eigen::VectorXd fd = fd_gradient(pr);
  for (long k = 0; k < g.size(); ++k)
    EXPECT_NEAR(g(k), fd(k), 1e-5 * std::max(1.0, std::fabs(fd(k))));
}

TEST(LmlGradient, NoiseDominantSignMatchesFiniteDifference) {
  RandomProblem pr = random_problem(2, 5, 42, 50.0);  // sn2 far above K entries
  GprModel m = fit(pr.X, pr.y, pr.params);
  long k = pr.params.dims() + 1;
  double analytic = lml_gradient(m)(k);
  double fd = fd_gradient(pr)(k);
  EXPECT_GT(analytic * fd, 0.0);
  EXPECT_NEAR(analytic, fd, 1e-5 * std::max(1.0, std::fabs(fd)));
}

TEST(LmlGradient, DuplicateDimensionsGetEqualGradients) {
  RandomProblem pr = random_problem(2, 6, 43);
  pr.X.row(1) = pr.X.row(0);  // identical input rows
  pr.params.length_scales(1) = pr.params.length_scales(0);
  GprModel m = fit(pr.X, pr.y, pr.params);
  Eigen::VectorXd g = lml_gradient(m);
  EXPECT_NEAR(g(0), g(1), 1e-10);
}

TEST(LmlGradient, SweepOfRandomInstances) {
  std::mt19937_64 rng(44);
  for (int t = 0; t < 8; ++t) {
    long d = 1 + static_cast<long>(rng() % 5);
    long n = 3 + static_cast<long>(rng() % 8);
    RandomProblem pr = random_problem(d, n, rng());
    GprModel m = fit(pr.X, pr.y, pr.params);
    Eigen::VectorXd g = lml_gradient(m);
    Eigen::VectorXd fd = fd_gradient(pr);
    for (long k = 0; k < g.size(); ++k)
      ASSERT_NEAR(g(k), fd(k), 1e-4 * std::max(1.0, std::fabs(fd(k))));
  }
}

TEST(Optimize, ZeroStepsReturnsInit) {
  RandomProblem pr = random_problem(2, 6, 51);
  KernelParams init = KernelParams::defaults(2);
  KernelParams out = optimize_hyperparams(pr.X, pr.y, init, 0, 0.1);
  EXPECT_EQ(out.length_scales, init.length_scales);
  EXPECT_EQ(out.signal_variance, init.signal_variance);
  EXPECT_EQ(out.noise_variance, init.noise_variance);
}

TEST(Optimize, NeverWorseThanInit) {
  RandomProblem pr = random_problem(2, 20, 52);
  KernelParams init = KernelParams::defaults(2);  // l = 1, sf2 = 1, sn2 = 0.1
  KernelParams out = optimize_hyperparams(pr.X, pr.y, init, 60, 0.1);
  double before = log_marginal_likelihood(fit(pr.X, pr.y, init));
  double after = log_marginal_likelihood(fit(pr.X, pr.y, out));
  EXPECT_GE(after, before);
}

TEST(Optimize, RecoversLengthScaleFromGpDraw) {
  // draw y from a known SE GP with l = 0.5, then refit from the defaults
  const long n = 60;
  KernelParams truth = params_of({0.5}, 1.0, 0.01);
  Eigen::MatrixXd X(1, n);
  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (long i = 0; i < n; ++i) X(0, i) = u(rng);
  Eigen::MatrixXd K(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) K(i, j) = se_kernel(X.col(i), X.col(j), truth);
  K.diagonal().array() += truth.noise_variance;
  Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(K).matrixL();
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (long i = 0; i < n; ++i) z(i) = g(rng);
  Eigen::VectorXd y = L * z;

  KernelParams out = optimize_hyperparams(X, y, KernelParams::defaults(1), 200, 0.1);
  EXPECT_GE(out.length_scales(0), 0.25);
  EXPECT_LE(out.length_scales(0), 1.0);
}

TEST(Band, DegenerateAndDirectFormula) {
  PredictiveDistribution pd;
  pd.mean = Eigen::VectorXd::Constant(3, 5.0);
  pd.variance = Eigen::VectorXd::Constant(3, 1.0);
  auto [lo0, hi0] = predictive_band(pd, 0.0);
  EXPECT_EQ(lo0, pd.mean);
  EXPECT_EQ(hi0, pd.mean);
  auto [lo, hi] = predictive_band(pd, 1.96);
  EXPECT_DOUBLE_EQ(hi(0) - pd.mean(0), 1.96);
  EXPECT_DOUBLE_EQ(pd.mean(0) - lo(0), 1.96);
  EXPECT_THROW(predictive_band(pd, -1.0), std::invalid_argument);
}

TEST(Band, MonteCarloCoverage) {
  // smooth signal + gaussian noise; ML-fitted bands should cover ~95%
  const long n_train = 120, n_test = 250;
  std::mt19937_64 rng(54);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::normal_distribution<double> g(0.0, 0.1);
  Eigen::MatrixXd X(1, n_train), Xs(1, n_test);
  Eigen::VectorXd y(n_train), ys(n_test);
  for (long i = 0; i < n_train; ++i) {
    X(0, i) = u(rng);
    y(i) = std::sin(2.0 * X(0, i)) + g(rng);
  }
  for (long i = 0; i < n_test; ++i) {
    Xs(0, i) = u(rng);
    ys(i) = std::sin(2.0 * Xs(0, i)) + g(rng);
  }
  KernelParams hp = optimize_hyperparams(X, y, KernelParams::defaults(1), 120, 0.1);
  GprModel m = fit(X, y, hp);
  PredictiveDistribution pd = predict(m, Xs, true);
  auto [lo, hi] = predictive_band(pd, 1.96);
  long inside = 0;
  for (long i = 0; i < n_test; ++i)
    if (ys(i) >= lo(i) && ys(i) <= hi(i)) ++inside;
  double coverage = static_cast<double>(inside) / n_test;
  EXPECT_GE(coverage, 0.90);
  EXPECT_LE(coverage, 0.99);
}

TEST(Serialization, RoundTripWithDataHash) {
  RandomProblem pr = random_problem(2, 8, 61);
  GprModel m = fit(pr.X, pr.y, pr.params);
  nlohmann::ordered_json j = gpr_to_json(m);
  GprModel m2 = gpr_from_json(j, pr.X, pr.y);
  EXPECT_NEAR(m2.params.length_scales(0), m.params.length_scales(0), 1e-12);
  EXPECT_NEAR(log_marginal_likelihood(m2), log_marginal_likelihood(m), 1e-10);
  Eigen::VectorXd bad_y = pr.y;
  bad_y(0) += 1.0;
  EXPECT_THROW(gpr_from_json(j, pr.X, bad_y), std::runtime_error);
}
