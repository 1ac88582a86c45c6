#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace flowcast {

namespace detail {

// Continued-fraction evaluation for the regularized incomplete beta
// function (Lentz's method).
inline double beta_cont_frac(double a, double b, double x) {
  constexpr double kTiny = 1e-30;
  constexpr double kEps = 1e-14;
  constexpr int kMaxIter = 500;
  double qab = a + b;
  double qap = a + 1.0;
  double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw std::invalid_argument("incomplete_beta: x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  double log_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                  b * std::log1p(-x);
  double bt = std::exp(log_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::beta_cont_frac(a, b, x) / a;
  return 1.0 - bt * detail::beta_cont_frac(b, a, 1.0 - x) / b;
}

// Two-tailed p-value of a Student-t statistic with df degrees of freedom:
// p = I_{df/(df+t^2)}(df/2, 1/2).
inline double student_t_two_tailed_p(double t, double df) {
  if (df <= 0) throw std::invalid_argument("student_t_two_tailed_p: df must be positive");
  if (std::isinf(t)) return 0.0;
  if (t == 0.0) return 1.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

inline double rmse(const std::vector<double>& actual, const std::vector<double>& predicted) {
  if (actual.size() != predicted.size()) throw std::invalid_argument("rmse: length mismatch");
  if (actual.empty()) throw std::invalid_argument("rmse: empty series");
  double acc = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    double d = actual[i] - predicted[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(actual.size()));
}

struct MareResult {
  double value = 0.0;  // fraction, not percent
  int excluded = 0;    // samples skipped because actual == 0
};

inline MareResult mare(const std::vector<double>& actual, const std::vector<double>& predicted) {
  if (actual.size() != predicted.size()) throw std::invalid_argument("mare: length mismatch");
  if (actual.empty()) throw std::invalid_argument("mare: empty series");
  double acc = 0.0;
  int used = 0;
  int excluded = 0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] == 0.0) {
      ++excluded;
      continue;
    }
    acc += std::fabs(actual[i] - predicted[i]) / actual[i];
    ++used;
  }
  if (used == 0) throw std::invalid_argument("mare: all actuals zero");
  return {acc / used, excluded};
}

struct TTestResult {
  double t = 0.0;
  long df = 0;
  double p = 1.0;
  bool zero_variance = false;  // nonzero mean difference with zero spread
  bool all_zero = false;       // every paired difference is exactly zero
};

// Two-tailed paired t-test on elementwise differences a[i] - b[i].
inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_ttest: length mismatch");
  std::size_t n = a.size();
  if (n < 2) throw std::invalid_argument("paired_ttest: needs at least 2 pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = (a[i] - b[i]) - mean;
    ss += d * d;
  }
  double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult r;
  r.df = static_cast<long>(n) - 1;
  if (sd == 0.0) {
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
      r.all_zero = true;
    } else {
      r.t = mean > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
      r.zero_variance = true;
    }
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_tailed_p(r.t, static_cast<double>(r.df));
  return r;
}

}  // namespace flowcast
