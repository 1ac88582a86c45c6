#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowcast/dataset.hpp"

namespace flowcast {

struct CovarianceMatrix {
  Eigen::MatrixXd S;
  std::vector<VarRef> variable_names;

  long p() const { return S.rows(); }
};

// Empirical covariance with divisor N (not N-1).
inline CovarianceMatrix empirical_covariance(const Eigen::MatrixXd& rows,
                                             std::vector<VarRef> names = {}) {
  if (rows.rows() < 2) throw std::invalid_argument("empirical_covariance: needs >= 2 rows");
  CovarianceMatrix cov;
  Eigen::RowVectorXd mu = rows.colwise().mean();
  Eigen::MatrixXd centered = rows.rowwise() - mu;
  cov.S = (centered.transpose() * centered) / static_cast<double>(rows.rows());
  cov.S = ((cov.S + cov.S.transpose()) * 0.5).eval();  // kill roundoff asymmetry
  if (names.empty()) {
    for (long i = 0; i < rows.cols(); ++i) names.push_back({"v" + std::to_string(i), 0});
  }
  if (static_cast<long>(names.size()) != rows.cols())
    throw std::invalid_argument("empirical_covariance: name count mismatch");
  cov.variable_names = std::move(names);
  return cov;
}

struct GlassoConfig {
  double rho = 0.1;
  double outer_tol = 0.0;  // mean abs change of off-diag W; <=0 -> 1e-4 * mean|offdiag(S)|
  int max_outer_iters = 200;
  double inner_tol = 1e-9;  // max coordinate change in the lasso subproblem
  int max_inner_iters = 1000;
  double zero_threshold = 5e-4;
  double dual_tol = 1e-7;  // target for ||W*Theta - I||_max before declaring convergence
};

struct PrecisionEstimate {
  Eigen::MatrixXd W;      // estimated covariance (dual variable)
  Eigen::MatrixXd Theta;  // estimated inverse covariance
  std::vector<VarRef> variable_names;
  int iterations_used = 0;
  bool converged = false;
};

namespace detail {

inline double soft_threshold(double x, double r) {
  if (x > r) return x - r;
  if (x < -r) return x + r;
  return 0.0;
}

// Cyclic coordinate descent on
//   min_beta 1/2 beta' W11 beta - beta' s12 + rho ||beta||_1
// over the coordinates of `beta` excluding `skip`. `W` is the full p x p
// matrix; row/column `skip` is masked out. On exit `product` (when given)
// holds W11 * beta, which the BCD sweep writes back as w12. Returns the
// number of passes, or -1 if the pass cap was reached before the max
// coordinate change fell below tol.
inline int lasso_cd(const Eigen::MatrixXd& W, const Eigen::VectorXd& s12_full, long skip,
                    double rho, double tol, int max_passes, Eigen::VectorXd& beta,
                    Eigen::VectorXd* product = nullptr) {
  const long p = W.rows();
  beta(skip) = 0.0;
  Eigen::VectorXd r = W * beta;  // r_k = sum_m W(k,m) beta_m, beta_skip = 0
  int result = -1;
  for (int pass = 1; pass <= max_passes; ++pass) {
    double max_delta = 0.0;
    for (long k = 0; k < p; ++k) {
      if (k == skip) continue;
      double c = s12_full(k) - (r(k) - W(k, k) * beta(k));
      double nb = soft_threshold(c, rho) / W(k, k);
      double delta = nb - beta(k);
      if (delta != 0.0) {
        beta(k) = nb;
        r.noalias() += W.col(k) * delta;
        max_delta = std::max(max_delta, std::fabs(delta));
      }
    }
    if (max_delta < tol) {
      result = pass;
      break;
    }
  }
  if (product) *product = r;
  return result;
}

}  // namespace detail

struct LassoResult {
  Eigen::VectorXd beta;
  bool converged = false;
  int passes = 0;
};

// Lasso subproblem min 1/2 ||W11^{1/2} beta - b||^2 + rho ||beta||_1 with
// b = W11^{-1/2} s12 (equivalently 1/2 b'W11 b - b's12 + rho||b||_1), solved
// by cyclic coordinate descent with soft-thresholding.
inline LassoResult lasso_subproblem(const Eigen::MatrixXd& W11, const Eigen::VectorXd& s12,
                                    double rho, double tol = 1e-10, int max_passes = 10000,
                                    const Eigen::VectorXd* warm_start = nullptr) {
  const long d = W11.rows();
  if (W11.cols() != d || s12.size() != d)
    throw std::invalid_argument("lasso_subproblem: shape mismatch");
  if (rho < 0.0) throw std::invalid_argument("lasso_subproblem: negative rho");
  if (Eigen::LLT<Eigen::MatrixXd>(W11).info() != Eigen::Success)
    throw std::invalid_argument("lasso_subproblem: W11 not positive definite");

  // Embed in a (d+1)-sized problem with a masked last coordinate so the
  // same kernel serves both the public entry point and the BCD sweep.
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(d + 1, d + 1);
  W.topLeftCorner(d, d) = W11;
  Eigen::VectorXd s = Eigen::VectorXd::Zero(d + 1);
  s.head(d) = s12;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
  if (warm_start) beta.head(d) = *warm_start;
  int passes = detail::lasso_cd(W, s, d, rho, tol, max_passes, beta);
  LassoResult res;
  res.beta = beta.head(d);
  res.converged = passes > 0;
  res.passes = passes > 0 ? passes : max_passes;
  return res;
}

namespace detail {

// Recover Theta column-by-column from (beta, w12, w22):
//   theta_jj = 1 / (w_jj - w12' beta),  theta_:j = -beta * theta_jj.
inline Eigen::MatrixXd recover_theta(const Eigen::MatrixXd& W, const Eigen::MatrixXd& B) {
  const long p = W.rows();
  Eigen::MatrixXd theta(p, p);
  for (long j = 0; j < p; ++j) {
    double dot = 0.0;
    for (long k = 0; k < p; ++k)
      if (k != j) dot += W(k, j) * B(k, j);
    double t22 = 1.0 / (W(j, j) - dot);
    theta(j, j) = t22;
    for (long k = 0; k < p; ++k)
      if (k != j) theta(k, j) = -B(k, j) * t22;
  }
  // Symmetrize, keeping entries that soft-thresholding zeroed exactly zero.
  for (long i = 0; i < p; ++i) {
    for (long j = i + 1; j < p; ++j) {
      if (theta(i, j) == 0.0 || theta(j, i) == 0.0) {
        theta(i, j) = theta(j, i) = 0.0;
      } else {
        double v = 0.5 * (theta(i, j) + theta(j, i));
        theta(i, j) = theta(j, i) = v;
      }
    }
  }
  return theta;
}

}  // namespace detail

/**
 * Graphical lasso via block coordinate descent over the columns of the
 * covariance estimate W:
 *
 *   1. W = S + rho*I; the diagonal never changes afterwards.
 *   2. For each column j, solve the lasso subproblem on (W11, s12, rho).
 *   3. Write back w12 = W11 * beta.
 *   4. Sweep until the mean absolute off-diagonal change of W falls below
 *      outer_tol and ||W*Theta - I||_max falls below dual_tol.
 *   5. Theta is recovered per column from (beta, w12, w22); no full inverse.
 */
inline PrecisionEstimate glasso(const CovarianceMatrix& cov, const GlassoConfig& cfg) {
  const Eigen::MatrixXd& S = cov.S;
  const long p = S.rows();
  if (p < 2) throw std::invalid_argument("glasso: p must be >= 2");
  if (cfg.rho < 0.0) throw std::invalid_argument("glasso: negative rho");
  if (cfg.inner_tol <= 0.0 || cfg.dual_tol <= 0.0)
    throw std::invalid_argument("glasso: tolerances must be positive");
  double smax = S.cwiseAbs().maxCoeff();
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, smax))
    throw std::invalid_argument("glasso: S not symmetric");
  if (cfg.rho == 0.0 && Eigen::LLT<Eigen::MatrixXd>(S).info() != Eigen::Success)
    throw std::invalid_argument("glasso: rho = 0 requires positive definite S");

  double mean_offdiag = 0.0;
  for (long i = 0; i < p; ++i)
    for (long j = 0; j < p; ++j)
      if (i != j) mean_offdiag += std::fabs(S(i, j));
  mean_offdiag /= static_cast<double>(p * (p - 1));
  double outer_tol = cfg.outer_tol > 0.0
                         ? cfg.outer_tol
                         : std::max(1e-4 * mean_offdiag, 1e-14 * std::max(1.0, smax));

  PrecisionEstimate est;
  est.variable_names = cov.variable_names;
  est.W = S;
  est.W.diagonal().array() += cfg.rho;
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(p, p);  // warm-started betas per column

  Eigen::VectorXd beta(p), s12(p), w12(p);
  bool done = false;
  int sweep = 0;
  while (sweep < cfg.max_outer_iters && !done) {
    ++sweep;
    double change = 0.0;
    for (long j = 0; j < p; ++j) {
      s12 = S.col(j);
      beta = B.col(j);
      detail::lasso_cd(est.W, s12, j, cfg.rho, cfg.inner_tol, cfg.max_inner_iters, beta, &w12);
      B.col(j) = beta;
      // w12 = W11 * beta, written into both the row and column.
      for (long k = 0; k < p; ++k) {
        if (k == j) continue;
        change += std::fabs(w12(k) - est.W(k, j));
        est.W(k, j) = est.W(j, k) = w12(k);
      }
    }
    double mean_change = change / static_cast<double>(p * (p - 1));
    if (mean_change < outer_tol) {
      est.Theta = detail::recover_theta(est.W, B);
      double dual = (est.W * est.Theta - Eigen::MatrixXd::Identity(p, p)).cwiseAbs().maxCoeff();
      if (dual < cfg.dual_tol) done = true;
    }
  }
  if (est.Theta.size() == 0) est.Theta = detail::recover_theta(est.W, B);
  est.iterations_used = sweep;
  est.converged = done;
  return est;
}

// Maximum violation of the penalized-likelihood stationarity conditions:
// diag must satisfy W_ii = S_ii + rho; off-diagonals |W_ij - S_ij| <= rho,
// with equality at rho*sign(Theta_ij) wherever Theta_ij != 0.
inline double kkt_residual(const CovarianceMatrix& cov, const PrecisionEstimate& est, double rho) {
  const Eigen::MatrixXd& S = cov.S;
  const long p = S.rows();
  double breach = 0.0;
  for (long i = 0; i < p; ++i) breach = std::max(breach, std::fabs(est.W(i, i) - S(i, i) - rho));
  double theta_max = est.Theta.cwiseAbs().maxCoeff();
  double zero_tol = 1e-10 * std::max(1.0, theta_max);
  for (long i = 0; i < p; ++i) {
    for (long j = i + 1; j < p; ++j) {
      double dev = est.W(i, j) - S(i, j);
      breach = std::max(breach, std::fabs(dev) - rho);
      if (std::fabs(est.Theta(i, j)) > zero_tol)
        breach = std::max(breach, std::fabs(dev - rho * (est.Theta(i, j) > 0 ? 1.0 : -1.0)));
    }
  }
  return breach;
}

struct GraphicalModel {
  std::vector<VarRef> nodes;
  std::vector<std::pair<int, int>> edges;  // i < j, lexicographically sorted
  std::vector<std::vector<int>> adjacency;

  bool has_edge(int i, int j) const {
    if (i > j) std::swap(i, j);
    return std::binary_search(edges.begin(), edges.end(), std::make_pair(i, j));
  }
};

// Edge (i, j) present iff |Theta_ij| >= threshold for i != j.
inline GraphicalModel extract_graph(const PrecisionEstimate& est, double threshold) {
  if (threshold < 0.0) throw std::invalid_argument("extract_graph: negative threshold");
  GraphicalModel g;
  g.nodes = est.variable_names;
  const long p = est.Theta.rows();
  g.adjacency.resize(p);
  for (long i = 0; i < p; ++i) {
    for (long j = i + 1; j < p; ++j) {
      if (std::fabs(est.Theta(i, j)) >= threshold) {
        g.edges.push_back({static_cast<int>(i), static_cast<int>(j)});
        g.adjacency[i].push_back(static_cast<int>(j));
        g.adjacency[j].push_back(static_cast<int>(i));
      }
    }
  }
  return g;
}

struct FeatureSelection {
  std::vector<VarRef> selected;
  bool fallback_used = false;  // empty neighborhood, target's own lags substituted
};

// Neighbors of the target's time-n node, restricted to lagged (historical)
// variables of any link; other links' time-n nodes never qualify. An empty
// neighborhood falls back to the target link's full lag window.
inline FeatureSelection select_features(const GraphicalModel& graph,
                                        const std::string& target_link, int max_lag = 5) {
  long target = -1;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    if (graph.nodes[i].link == target_link && graph.nodes[i].lag == 0) {
      target = static_cast<long>(i);
      break;
    }
  }
  if (target < 0) throw std::invalid_argument("select_features: target not in graph: " + target_link);
  FeatureSelection sel;
  for (int nb : graph.adjacency[target]) {
    const VarRef& v = graph.nodes[nb];
    if (v.lag >= 1 && v.lag <= max_lag) sel.selected.push_back(v);
  }
  std::sort(sel.selected.begin(), sel.selected.end());
  if (sel.selected.empty()) {
    for (int lag = 1; lag <= max_lag; ++lag) sel.selected.push_back({target_link, lag});
    sel.fallback_used = true;
  }
  return sel;
}

// DOT export; node ordering follows the variable order, edges are sorted.
inline void write_dot(const GraphicalModel& graph, std::ostream& out) {
  out << "graph glasso {\n";
  for (const auto& n : graph.nodes) out << "  \"" << n.label() << "\";\n";
  for (const auto& [i, j] : graph.edges)
    out << "  \"" << graph.nodes[i].label() << "\" -- \"" << graph.nodes[j].label() << "\";\n";
  out << "}\n";
}

inline void write_theta_csv(const PrecisionEstimate& est, std::ostream& out) {
  out << "variable";
  for (const auto& n : est.variable_names) out << "," << n.label();
  out << "\n";
  char buf[64];
  for (long i = 0; i < est.Theta.rows(); ++i) {
    out << est.variable_names[i].label();
    for (long j = 0; j < est.Theta.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.10g", est.Theta(i, j));
      out << "," << buf;
    }
    out << "\n";
  }
}

}  // namespace flowcast
