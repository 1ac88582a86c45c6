#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/dataset.hpp"

namespace flowcast {

struct MlpTopology {
  int n_in = 0;
  int n_hidden = 0;
  int n_out = 0;

  long n_params() const {
    return static_cast<long>(n_hidden) * n_in + n_hidden +
           static_cast<long>(n_out) * n_hidden + n_out;
  }
};

// Hidden-unit sizing rule n = sqrt(n_i + n_0) + a, rounded half-up, with the
// architecture constant a in 1..10.
inline int hidden_units(int n_i, int n_0, int a) {
  if (n_i < 1 || n_0 < 1) throw std::invalid_argument("hidden_units: layer sizes must be >= 1");
  if (a < 1 || a > 10) throw std::invalid_argument("hidden_units: a must be in 1..10");
  int n = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n_i + n_0)) + a + 0.5));
  return std::max(n, 1);
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// Three-layer perceptron: sigmoid hidden layer, linear output layer.
// Flattened parameter ordering: W1 row-major, b1, W2 row-major, b2.
struct Mlp {
  MlpTopology topology;
  Eigen::MatrixXd W1;  // n_hidden x n_in
  Eigen::VectorXd b1;  // n_hidden
  Eigen::MatrixXd W2;  // n_out x n_hidden
  Eigen::VectorXd b2;  // n_out

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
    if (x.size() != topology.n_in) throw std::invalid_argument("forward: dimension mismatch");
    Eigen::VectorXd h = (W1 * x + b1).unaryExpr([](double z) { return sigmoid(z); });
    return W2 * h + b2;
  }

  // Rows are samples.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const {
    if (X.cols() != topology.n_in)
      throw std::invalid_argument("forward_batch: dimension mismatch");
    Eigen::MatrixXd H = ((X * W1.transpose()).rowwise() + b1.transpose())
                            .unaryExpr([](double z) { return sigmoid(z); });
    return (H * W2.transpose()).rowwise() + b2.transpose();
  }

  Eigen::VectorXd flatten() const {
    Eigen::VectorXd p(topology.n_params());
    long at = 0;
    for (int r = 0; r < topology.n_hidden; ++r)
      for (int c = 0; c < topology.n_in; ++c) p(at++) = W1(r, c);
    for (int r = 0; r < topology.n_hidden; ++r) p(at++) = b1(r);
    for (int r = 0; r < topology.n_out; ++r)
      for (int c = 0; c < topology.n_hidden; ++c) p(at++) = W2(r, c);
    for (int r = 0; r < topology.n_out; ++r) p(at++) = b2(r);
    return p;
  }

  void unflatten(const Eigen::VectorXd& p) {
    if (p.size() != topology.n_params()) throw std::invalid_argument("unflatten: size mismatch");
    long at = 0;
    for (int r = 0; r < topology.n_hidden; ++r)
      for (int c = 0; c < topology.n_in; ++c) W1(r, c) = p(at++);
    for (int r = 0; r < topology.n_hidden; ++r) b1(r) = p(at++);
    for (int r = 0; r < topology.n_out; ++r)
      for (int c = 0; c < topology.n_hidden; ++c) W2(r, c) = p(at++);
    for (int r = 0; r < topology.n_out; ++r) b2(r) = p(at++);
  }
};

// Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline Mlp init_mlp(const MlpTopology& topo, std::uint64_t seed) {
  if (topo.n_in < 1 || topo.n_hidden < 1 || topo.n_out < 1)
    throw std::invalid_argument("init_mlp: all layer sizes must be >= 1");
  Mlp net;
  net.topology = topo;
  net.W1.resize(topo.n_hidden, topo.n_in);
  net.b1.resize(topo.n_hidden);
  net.W2.resize(topo.n_out, topo.n_hidden);
  net.b2.resize(topo.n_out);
  std::mt19937_64 rng(seed);
  double r1 = 1.0 / std::sqrt(static_cast<double>(topo.n_in));
  double r2 = 1.0 / std::sqrt(static_cast<double>(topo.n_hidden));
  std::uniform_real_distribution<double> u1(-r1, r1), u2(-r2, r2);
  for (int r = 0; r < topo.n_hidden; ++r)
    for (int c = 0; c < topo.n_in; ++c) net.W1(r, c) = u1(rng);
  for (int r = 0; r < topo.n_hidden; ++r) net.b1(r) = u1(rng);
  for (int r = 0; r < topo.n_out; ++r)
    for (int c = 0; c < topo.n_hidden; ++c) net.W2(r, c) = u2(rng);
  for (int r = 0; r < topo.n_out; ++r) net.b2(r) = u2(rng);
  return net;
}

// Analytic Jacobian of the residuals (prediction - target) with respect to
// the flattened parameters. Row layout: sample-major, then output index.
inline Eigen::MatrixXd jacobian(const Mlp& net, const Eigen::MatrixXd& X) {
  const auto& t = net.topology;
  if (X.cols() != t.n_in) throw std::invalid_argument("jacobian: dimension mismatch");
  const long n = X.rows();
  const long P = t.n_params();
  const long off_b1 = static_cast<long>(t.n_hidden) * t.n_in;
  const long off_W2 = off_b1 + t.n_hidden;
  const long off_b2 = off_W2 + static_cast<long>(t.n_out) * t.n_hidden;

  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n * t.n_out, P);
  for (long s = 0; s < n; ++s) {
    Eigen::VectorXd x = X.row(s);
    Eigen::VectorXd a = (net.W1 * x + net.b1).unaryExpr([](double z) { return sigmoid(z); });
    Eigen::VectorXd g = a.array() * (1.0 - a.array());  // sigmoid'
    for (int o = 0; o < t.n_out; ++o) {
      long row = s * t.n_out + o;
      for (int h = 0; h < t.n_hidden; ++h) {
        double w2g = net.W2(o, h) * g(h);
        long base = static_cast<long>(h) * t.n_in;
        for (int i = 0; i < t.n_in; ++i) J(row, base + i) = w2g * x(i);
        J(row, off_b1 + h) = w2g;
        J(row, off_W2 + static_cast<long>(o) * t.n_hidden + h) = a(h);
      }
      J(row, off_b2 + o) = 1.0;
    }
  }
  return J;
}

struct TrainConfig {
  int max_epochs = 300;
  double lm_lambda_init = 1e-3;
  double lm_lambda_up = 10.0;
  double lm_lambda_down = 10.0;
  double lm_lambda_max = 1e10;
  double grad_tol = 1e-7;
  double val_fraction = 0.15;  // chronological tail carved from the training rows
  int patience = 10;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Mlp net;
  std::vector<double> history;  // SSE of the initial net and each accepted epoch
  int epochs = 0;
  std::string stop_reason;
};

namespace detail {

inline double sse_of(const Mlp& net, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  return (net.forward_batch(X) - Y).squaredNorm();
}

// Normal equations J'J and J'r for the LM step without materializing the
// residual Jacobian. Row (s, o) of J factors into a hidden-layer part
// (g .* W2_o) (x) [x; 1] and an output-layer part e_o (x) [a; 1], so the
// whole Gram matrix assembles from three small GEMMs:
//   Q  = Z'Z  with Z(s,(h,i~)) = g_h(s) * x~_i(s)
//   T  = Z'A~ and Gm = A~'A~ with A~ = [a, 1]
// giving (J'J)_HH = (W2'W2)_{hh'} * Q, (J'J)_HO = W2(o,h) * T, and
// (J'J)_OO = I_{n_out} (x) Gm. Matches jacobian() up to roundoff.
inline void lm_normal_equations(const Mlp& net, const Eigen::MatrixXd& X,
                                const Eigen::MatrixXd& R, Eigen::MatrixXd& JtJ,
                                Eigen::VectorXd& Jtr) {
  const auto& t = net.topology;
  const long M = X.rows();
  const long ni = t.n_in, nh = t.n_hidden, no = t.n_out;
  const long off_b1 = nh * ni;
  const long off_W2 = off_b1 + nh;
  const long off_b2 = off_W2 + no * nh;
  const long P = t.n_params();
  const long K = nh * (ni + 1);

  Eigen::MatrixXd A = ((X * net.W1.transpose()).rowwise() + net.b1.transpose())
                          .unaryExpr([](double z) { return sigmoid(z); });
  Eigen::MatrixXd G = A.array() * (1.0 - A.array());

  Eigen::MatrixXd Z(M, K);
  for (long h = 0; h < nh; ++h) {
    for (long i = 0; i < ni; ++i)
      Z.col(h * (ni + 1) + i) = G.col(h).array() * X.col(i).array();
    Z.col(h * (ni + 1) + ni) = G.col(h);
  }
  Eigen::MatrixXd At(M, nh + 1);
  At.leftCols(nh) = A;
  At.col(nh).setOnes();

  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(K, K);
  Q.selfadjointView<Eigen::Lower>().rankUpdate(Z.transpose());
  Q.triangularView<Eigen::StrictlyUpper>() = Q.transpose();
  Eigen::MatrixXd T = Z.transpose() * At;
  Eigen::MatrixXd Gm = At.transpose() * At;
  Eigen::MatrixXd B = net.W2.transpose() * net.W2;

  auto idx_h = [&](long h, long i) { return i < ni ? h * ni + i : off_b1 + h; };
  auto idx_o = [&](long o, long h) { return h < nh ? off_W2 + o * nh + h : off_b2 + o; };

  JtJ.setZero(P, P);
  for (long h = 0; h < nh; ++h)
    for (long i = 0; i <= ni; ++i) {
      long row = idx_h(h, i);
      for (long h2 = 0; h2 < nh; ++h2) {
        double b = B(h, h2);
        if (b == 0.0) continue;
        for (long i2 = 0; i2 <= ni; ++i2)
          JtJ(row, idx_h(h2, i2)) = b * Q(h * (ni + 1) + i, h2 * (ni + 1) + i2);
      }
      for (long o = 0; o < no; ++o) {
        double w = net.W2(o, h);
        for (long h2 = 0; h2 <= nh; ++h2) {
          double v = w * T(h * (ni + 1) + i, h2);
          JtJ(row, idx_o(o, h2)) = v;
          JtJ(idx_o(o, h2), row) = v;
        }
      }
    }
  for (long o = 0; o < no; ++o)
    for (long h = 0; h <= nh; ++h)
      for (long h2 = 0; h2 <= nh; ++h2) JtJ(idx_o(o, h), idx_o(o, h2)) = Gm(h, h2);

  Jtr.setZero(P);
  Eigen::MatrixXd WR = R * net.W2;  // WR(s,h) = sum_o R(s,o) W2(o,h)
  for (long h = 0; h < nh; ++h) {
    Eigen::VectorXd coef = G.col(h).array() * WR.col(h).array();
    for (long i = 0; i < ni; ++i) Jtr(h * ni + i) = coef.dot(X.col(i));
    Jtr(off_b1 + h) = coef.sum();
  }
  Eigen::MatrixXd P2 = At.transpose() * R;  // (nh+1) x n_out
  for (long o = 0; o < no; ++o) {
    for (long h = 0; h < nh; ++h) Jtr(off_W2 + o * nh + h) = P2(h, o);
    Jtr(off_b2 + o) = P2(nh, o);
  }
}

}  // namespace detail

/**
 * Levenberg-Marquardt training on the sum of squared errors over all output
 * columns. Each epoch solves (J'J + lambda I) delta = -J'r and accepts the
 * step only if the SSE strictly decreases (lambda /= down on accept,
 * lambda *= up and retry on reject). Stops on the gradient tolerance, the
 * epoch cap, lambda overflow, or validation patience; with a validation set
 * the returned net is the one with the best validation SSE seen.
 */
inline TrainResult train_lm(Mlp net, const SupervisedDataset& train, const TrainConfig& cfg,
                            const SupervisedDataset* val = nullptr) {
  const auto& t = net.topology;
  if (train.n_in() != t.n_in || train.n_out() != t.n_out)
    throw std::invalid_argument("train_lm: dataset shape does not match topology");
  if (train.rows() < 1) throw std::invalid_argument("train_lm: empty training set");
  if (cfg.lm_lambda_up <= 1.0 || cfg.lm_lambda_down <= 1.0)
    throw std::invalid_argument("train_lm: lambda factors must exceed 1");
  if (cfg.grad_tol <= 0.0 || cfg.lm_lambda_init <= 0.0)
    throw std::invalid_argument("train_lm: tolerances must be positive");

  Eigen::MatrixXd Xtr = train.inputs, Ytr = train.targets;
  Eigen::MatrixXd Xval, Yval;
  bool use_val = false;
  if (val) {
    Xval = val->inputs;
    Yval = val->targets;
    use_val = Xval.rows() > 0;
  } else if (cfg.val_fraction > 0.0 && train.rows() >= 4) {
    long v = std::lround(cfg.val_fraction * static_cast<double>(train.rows()));
    v = std::min(std::max<long>(v, 1), train.rows() - 1);
    Xval = train.inputs.bottomRows(v);
    Yval = train.targets.bottomRows(v);
    Xtr = train.inputs.topRows(train.rows() - v);
    Ytr = train.targets.topRows(train.rows() - v);
    use_val = true;
  }

  const long P = t.n_params();
  Eigen::VectorXd p = net.flatten();
  double sse = detail::sse_of(net, Xtr, Ytr);
  if (!std::isfinite(sse)) throw std::runtime_error("train_lm: non-finite initial loss");

  TrainResult out;
  out.history.push_back(sse);
  double lambda = cfg.lm_lambda_init;
  double best_val = use_val ? detail::sse_of(net, Xval, Yval) : 0.0;
  Eigen::VectorXd best_p = p;
  int epochs_since_best = 0;
  out.stop_reason = "max_epochs";

  Eigen::MatrixXd JtJ(P, P);
  Eigen::VectorXd grad(P);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Eigen::MatrixXd r = net.forward_batch(Xtr) - Ytr;
    detail::lm_normal_equations(net, Xtr, r, JtJ, grad);
    if (!grad.allFinite()) throw std::runtime_error("train_lm: non-finite gradient");
    if (grad.cwiseAbs().maxCoeff() < cfg.grad_tol) {
      out.stop_reason = "grad_tol";
      break;
    }

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd A = JtJ;
      A.diagonal().array() += lambda;
      Eigen::VectorXd delta = Eigen::LDLT<Eigen::MatrixXd>(A).solve(-grad);
      Mlp cand = net;
      cand.unflatten(p + delta);
      double cand_sse = detail::sse_of(cand, Xtr, Ytr);
      if (std::isfinite(cand_sse) && cand_sse < sse) {
        p += delta;
        net = std::move(cand);
        sse = cand_sse;
        lambda /= cfg.lm_lambda_down;
        accepted = true;
      } else {
        lambda *= cfg.lm_lambda_up;
        if (lambda > cfg.lm_lambda_max) break;
      }
    }
    if (!accepted) {
      out.stop_reason = "lambda_overflow";
      break;
    }
    out.history.push_back(sse);
    ++out.epochs;

    if (use_val) {
      double vs = detail::sse_of(net, Xval, Yval);
      if (vs < best_val) {
        best_val = vs;
        best_p = p;
        epochs_since_best = 0;
      } else if (++epochs_since_best >= cfg.patience) {
        out.stop_reason = "patience";
        break;
      }
    }
  }

  if (use_val) net.unflatten(best_p);
  out.net = std::move(net);
  return out;
}

struct ArchCandidate {
  int a = 0;
  int n_hidden = 0;
  double val_rmse = 0.0;
};

struct ArchSearchResult {
  int best_a = 0;
  Mlp net;
  std::vector<ArchCandidate> candidates;
};

// Strictly-lower comparison over ascending a implements the tie-break
// toward the smaller constant.
inline int pick_best_arch(const std::vector<ArchCandidate>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("pick_best_arch: no candidates");
  int best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (candidates[i].val_rmse < candidates[best].val_rmse) best = static_cast<int>(i);
  return best;
}

namespace detail {

inline double main_task_rmse(const Mlp& net, const SupervisedDataset& ds) {
  Eigen::MatrixXd pred = net.forward_batch(ds.inputs);
  double acc = 0.0;
  for (int c : ds.main_target_columns)
    acc += (pred.col(c) - ds.targets.col(c)).squaredNorm();
  return std::sqrt(acc / (static_cast<double>(ds.rows()) * ds.main_target_columns.size()));
}

}  // namespace detail

// Trains one net per a in 1..10 (same seed for every candidate) and keeps
// the lowest validation RMSE on the main-task columns.
inline ArchSearchResult select_architecture(const SupervisedDataset& train,
                                            const SupervisedDataset& val,
                                            const TrainConfig& cfg) {
  if (val.rows() < 1) throw std::invalid_argument("select_architecture: empty validation set");
  ArchSearchResult out;
  std::vector<Mlp> nets;
  for (int a = 1; a <= 10; ++a) {
    MlpTopology topo{static_cast<int>(train.n_in()),
                     hidden_units(static_cast<int>(train.n_in()), static_cast<int>(train.n_out()), a),
                     static_cast<int>(train.n_out())};
    TrainResult tr = train_lm(init_mlp(topo, cfg.seed), train, cfg, &val);
    double rmse = detail::main_task_rmse(tr.net, val);
    out.candidates.push_back({a, topo.n_hidden, rmse});
    nets.push_back(std::move(tr.net));
  }
  int best = pick_best_arch(out.candidates);
  out.best_a = out.candidates[best].a;
  out.net = std::move(nets[best]);
  return out;
}

inline nlohmann::ordered_json mlp_to_json(const Mlp& net, const std::string& scaler_ref = "") {
  nlohmann::ordered_json j;
  j["n_in"] = net.topology.n_in;
  j["n_hidden"] = net.topology.n_hidden;
  j["n_out"] = net.topology.n_out;
  j["parameter_order"] = "W1-row-major,b1,W2-row-major,b2";
  j["scaler"] = scaler_ref;  // reference to the scaling the net was trained under
  Eigen::VectorXd p = net.flatten();
  j["weights"] = std::vector<double>(p.data(), p.data() + p.size());
  return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  MlpTopology topo{j.at("n_in").get<int>(), j.at("n_hidden").get<int>(), j.at("n_out").get<int>()};
  Mlp net = init_mlp(topo, 0);
  auto w = j.at("weights").get<std::vector<double>>();
  net.unflatten(Eigen::Map<Eigen::VectorXd>(w.data(), w.size()));
  return net;
}

}  // namespace flowcast
