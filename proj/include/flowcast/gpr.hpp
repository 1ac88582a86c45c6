#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/util.hpp"

namespace flowcast {

// Squared-exponential ARD kernel parameters. The length scales are the
// diagonal of P in k = sf2 * exp(-(xp-xq)' P^{-1} (xp-xq) / 2); they are
// optimized in log-space to stay positive.
struct KernelParams {
  Eigen::VectorXd length_scales;
  double signal_variance = 1.0;
  double noise_variance = 0.1;

  long dims() const { return length_scales.size(); }

  static KernelParams defaults(long d) {
    KernelParams p;
    p.length_scales = Eigen::VectorXd::Ones(d);
    p.signal_variance = 1.0;
    p.noise_variance = 0.1;
    return p;
  }

  void validate() const {
    if (length_scales.size() == 0 || (length_scales.array() <= 0.0).any())
      throw std::invalid_argument("KernelParams: length scales must be positive");
    if (signal_variance <= 0.0)
      throw std::invalid_argument("KernelParams: signal variance must be positive");
    if (noise_variance < 0.0)
      throw std::invalid_argument("KernelParams: noise variance must be nonnegative");
  }

  Eigen::VectorXd to_log() const {
    Eigen::VectorXd v(dims() + 2);
    v.head(dims()) = length_scales.array().log();
    v(dims()) = std::log(signal_variance);
    v(dims() + 1) = std::log(noise_variance);
    return v;
  }

  static KernelParams from_log(const Eigen::VectorXd& v) {
    KernelParams p;
    long d = v.size() - 2;
    p.length_scales = v.head(d).array().exp();
    p.signal_variance = std::exp(v(d));
    p.noise_variance = std::exp(v(d + 1));
    return p;
  }
};

inline double se_kernel(const Eigen::VectorXd& xp, const Eigen::VectorXd& xq,
                        const KernelParams& params) {
  if (xp.size() != xq.size() || xp.size() != params.dims())
    throw std::invalid_argument("se_kernel: dimension mismatch");
  double q = ((xp - xq).array().square() / params.length_scales.array()).sum();
  return params.signal_variance * std::exp(-0.5 * q);
}

namespace detail {

// Kernel matrix K(A, B) for column-sample matrices A (D x n), B (D x m).
inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                     const KernelParams& params) {
  Eigen::VectorXd inv_l = params.length_scales.cwiseInverse();
  Eigen::MatrixXd As = inv_l.cwiseSqrt().asDiagonal() * A;
  Eigen::MatrixXd Bs = inv_l.cwiseSqrt().asDiagonal() * B;
  Eigen::VectorXd qa = As.colwise().squaredNorm();
  Eigen::VectorXd qb = Bs.colwise().squaredNorm();
  Eigen::MatrixXd d2 = -2.0 * (As.transpose() * Bs);
  d2.colwise() += qa;
  d2.rowwise() += qb.transpose();
  return params.signal_variance * (-0.5 * d2.array().max(0.0)).exp();
}

}  // namespace detail

// Exact GP regression state: training data, kernel parameters, the lower
// Cholesky factor L of K + sn2*I, and alpha = (K + sn2*I)^{-1} y. The mean
// function is fixed at zero.
struct GprModel {
  Eigen::MatrixXd X;  // D x n
  Eigen::VectorXd y;
  KernelParams params;
  Eigen::MatrixXd K;  // noiseless kernel matrix, cached for gradients
  Eigen::MatrixXd L;
  Eigen::VectorXd alpha;
  double jitter_used = 0.0;

  long n() const { return X.cols(); }
  long dims() const { return X.rows(); }
};

// Factorizes K + sn2*I with an escalating jitter ladder: 1e-10*trace(K)/n,
// times 10 per retry, capped at 1e-4*trace(K)/n.
inline GprModel fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                    const KernelParams& params) {
  params.validate();
  if (X.rows() != params.dims()) throw std::invalid_argument("fit: dimension mismatch");
  if (X.cols() != y.size()) throw std::invalid_argument("fit: sample count mismatch");
  GprModel m;
  m.X = X;
  m.y = y;
  m.params = params;
  long n = X.cols();
  if (n == 0) return m;  // prior-only model
  m.K = detail::kernel_matrix(X, X, params);
  double base = m.K.trace() / static_cast<double>(n);
  double jitter = 0.0;
  for (;;) {
    Eigen::MatrixXd A = m.K;
    A.diagonal().array() += params.noise_variance + jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success) {
      m.L = llt.matrixL();
      m.alpha = llt.solve(y);
      m.jitter_used = jitter;
      return m;
    }
    if (jitter == 0.0)
      jitter = 1e-10 * base;
    else if (jitter < 1e-4 * base)
      jitter = std::min(jitter * 10.0, 1e-4 * base);
    else
      throw std::runtime_error("gpr fit: factorization failed after max jitter");
  }
}

struct PredictiveDistribution {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  bool includes_noise = true;
};

inline PredictiveDistribution predict(const GprModel& model, const Eigen::MatrixXd& Xstar,
                                      bool include_noise = true) {
  if (Xstar.rows() != model.params.dims())
    throw std::invalid_argument("predict: dimension mismatch");
  long m = Xstar.cols();
  PredictiveDistribution out;
  out.includes_noise = include_noise;
  if (model.n() == 0) {  // prior recovery
    out.mean = Eigen::VectorXd::Zero(m);
    double v = model.params.signal_variance + (include_noise ? model.params.noise_variance : 0.0);
    out.variance = Eigen::VectorXd::Constant(m, v);
    return out;
  }
  Eigen::MatrixXd Ks = detail::kernel_matrix(model.X, Xstar, model.params);  // n x m
  out.mean = Ks.transpose() * model.alpha;
  Eigen::MatrixXd v = model.L.triangularView<Eigen::Lower>().solve(Ks);
  out.variance = (model.params.signal_variance - v.colwise().squaredNorm().array())
                     .max(0.0)
                     .matrix()
                     .transpose();
  if (include_noise) out.variance.array() += model.params.noise_variance;
  return out;
}

// log p(y|X) = -1/2 y'(K+sn2 I)^{-1} y - 1/2 log|K+sn2 I| - n/2 log 2pi,
// with the log determinant read off the cached factor.
inline double log_marginal_likelihood(const GprModel& model) {
  long n = model.n();
  if (n == 0) return 0.0;
  double log_det = 2.0 * model.L.diagonal().array().log().sum();
  return -0.5 * model.y.dot(model.alpha) - 0.5 * log_det -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

// Gradient of the log marginal likelihood in log-parameter space, ordered
// (log l_1 .. log l_D, log sf2, log sn2). Uses the trace identity
// d/dtheta = 1/2 tr((alpha alpha' - Kn^{-1}) dKn/dtheta).
inline Eigen::VectorXd lml_gradient(const GprModel& model) {
  long n = model.n();
  long d = model.params.dims();
  if (n == 0) return Eigen::VectorXd::Zero(d + 2);
  Eigen::MatrixXd kinv = Eigen::MatrixXd::Identity(n, n);
  model.L.triangularView<Eigen::Lower>().solveInPlace(kinv);
  model.L.transpose().triangularView<Eigen::Upper>().solveInPlace(kinv);
  Eigen::MatrixXd A = model.alpha * model.alpha.transpose() - kinv;

  Eigen::VectorXd grad(d + 2);
  for (long k = 0; k < d; ++k) {
    // dK/dlog l_k = K .* D2_k / (2 l_k) with D2_k the squared distances in dim k
    Eigen::VectorXd xk = model.X.row(k);
    Eigen::MatrixXd diff = xk.replicate(1, n) - xk.transpose().replicate(n, 1);
    Eigen::MatrixXd g = model.K.array() * diff.array().square() / (2.0 * model.params.length_scales(k));
    grad(k) = 0.5 * (A.array() * g.array()).sum();
  }
  grad(d) = 0.5 * (A.array() * model.K.array()).sum();  // dK/dlog sf2 = K
  grad(d + 1) = 0.5 * A.trace() * model.params.noise_variance;
  return grad;
}

// Gradient ascent on the log marginal likelihood in log-space, with step
// halving whenever a step fails to increase it. Returns the best observed
// parameters, so the result is never worse than the initial point.
inline KernelParams optimize_hyperparams(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                         const KernelParams& init, int steps = 200,
                                         double learning_rate = 0.1) {
  init.validate();
  if (init.noise_variance <= 0.0)
    throw std::invalid_argument("optimize_hyperparams: noise variance must be positive");
  if (steps <= 0) return init;

  GprModel model = fit(X, y, init);
  double cur_lml = log_marginal_likelihood(model);
  Eigen::VectorXd cur = init.to_log();
  Eigen::VectorXd best = cur;
  double best_lml = cur_lml;

  for (int step = 0; step < steps; ++step) {
    Eigen::VectorXd g = lml_gradient(model);
    double s = learning_rate;
    bool accepted = false;
    for (int halving = 0; halving < 30; ++halving) {
      Eigen::VectorXd cand = (cur + s * g).cwiseMax(-20.0).cwiseMin(20.0);
      try {
        GprModel trial = fit(X, y, KernelParams::from_log(cand));
        double lml = log_marginal_likelihood(trial);
        if (std::isfinite(lml) && lml > cur_lml) {
          cur = cand;
          cur_lml = lml;
          model = std::move(trial);
          accepted = true;
          break;
        }
      } catch (const std::runtime_error&) {
        // factorization failure counts as a failed step
      }
      s *= 0.5;
    }
    if (!accepted) break;
    if (cur_lml > best_lml) {
      best_lml = cur_lml;
      best = cur;
    }
  }
  return KernelParams::from_log(best);
}

// mean +/- z * sqrt(variance); pass a distribution with observation noise
// included to get bands that should cover future observations.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> predictive_band(
    const PredictiveDistribution& dist, double z) {
  if (z < 0.0) throw std::invalid_argument("predictive_band: z must be nonnegative");
  Eigen::VectorXd half = z * dist.variance.array().sqrt();
  return {dist.mean - half, dist.mean + half};
}

inline std::uint64_t gpr_data_hash(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  std::string bytes;
  bytes.resize((X.size() + y.size()) * sizeof(double));
  std::memcpy(bytes.data(), X.data(), X.size() * sizeof(double));
  std::memcpy(bytes.data() + X.size() * sizeof(double), y.data(), y.size() * sizeof(double));
  return fnv1a64(bytes);
}

// Serialized form keeps log-params plus a hash of the training data; the
// factorization is recomputed on load.
inline nlohmann::ordered_json gpr_to_json(const GprModel& model) {
  nlohmann::ordered_json j;
  Eigen::VectorXd ll = model.params.length_scales.array().log();
  j["log_length_scales"] = std::vector<double>(ll.data(), ll.data() + ll.size());
  j["log_signal_variance"] = std::log(model.params.signal_variance);
  j["log_noise_variance"] = std::log(model.params.noise_variance);
  j["data_hash"] = gpr_data_hash(model.X, model.y);
  j["n"] = model.n();
  return j;
}

inline GprModel gpr_from_json(const nlohmann::json& j, const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& y) {
  if (j.at("data_hash").get<std::uint64_t>() != gpr_data_hash(X, y))
    throw std::runtime_error("gpr_from_json: training data does not match stored hash");
  KernelParams p;
  auto lls = j.at("log_length_scales").get<std::vector<double>>();
  p.length_scales = Eigen::Map<Eigen::VectorXd>(lls.data(), lls.size()).array().exp();
  p.signal_variance = std::exp(j.at("log_signal_variance").get<double>());
  p.noise_variance = std::exp(j.at("log_noise_variance").get<double>());
  return fit(X, y, p);
}

}  // namespace flowcast
