#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowcast/flow_series.hpp"
#include "flowcast/network.hpp"

namespace flowcast {

enum class TaskKind { STL, MTL };

// A lagged input variable: series value of `link` at t(n - lag).
struct VarRef {
  std::string link;
  int lag = 0;  // 0 denotes the time-n value itself (graphical-model nodes)

  bool operator==(const VarRef& o) const { return link == o.link && lag == o.lag; }
  bool operator<(const VarRef& o) const { return link != o.link ? link < o.link : lag < o.lag; }

  // "Ba(t)" for lag 0, "Ba(t-3)" otherwise
  std::string label() const {
    return lag == 0 ? link + "(t)" : link + "(t-" + std::to_string(lag) + ")";
  }
};

// A target variable: series value of `link` at t(n + offset).
struct TargetRef {
  std::string link;
  int offset = 0;  // -1, 0, +1

  std::string label() const {
    if (offset == 0) return link + "(t)";
    if (offset < 0) return link + "(t-" + std::to_string(-offset) + ")";
    return link + "(t+" + std::to_string(offset) + ")";
  }
};

struct SupervisedDataset {
  Eigen::MatrixXd inputs;   // n_samples x n_in
  Eigen::MatrixXd targets;  // n_samples x n_out
  std::vector<VarRef> input_names;
  std::vector<TargetRef> target_names;
  std::vector<int> main_target_columns;
  long first_target_index = 0;  // FlowSeries index of t(n) for row 0; rows are consecutive

  long rows() const { return inputs.rows(); }
  long n_in() const { return inputs.cols(); }
  long n_out() const { return targets.cols(); }
  long target_index(long row) const { return first_target_index + row; }
};

namespace detail {

inline SupervisedDataset build_windowed(const FlowSeries& series,
                                        const std::vector<LinkId>& links, int lag, TaskKind task) {
  if (lag < 1) throw std::invalid_argument("dataset: lag must be >= 1");
  long len = static_cast<long>(series.length());
  long first_n = lag;
  long last_n = (task == TaskKind::MTL) ? len - 2 : len - 1;  // MTL rows need t(n+1)
  long n_rows = last_n - first_n + 1;
  if (n_rows <= 0) throw std::invalid_argument("dataset: series too short for lag window");

  SupervisedDataset ds;
  ds.first_target_index = series.start_index + first_n;
  long k = static_cast<long>(links.size());
  ds.inputs.resize(n_rows, k * lag);
  ds.targets.resize(n_rows, task == TaskKind::MTL ? 3 * k : k);
  for (long li = 0; li < k; ++li) {
    for (int j = lag; j >= 1; --j)  // oldest lag first: t(n-5) ... t(n-1)
      ds.input_names.push_back({links[li].name(), j});
    if (task == TaskKind::MTL) {
      ds.target_names.push_back({links[li].name(), -1});
      ds.target_names.push_back({links[li].name(), 0});
      ds.target_names.push_back({links[li].name(), +1});
      ds.main_target_columns.push_back(static_cast<int>(3 * li + 1));
    } else {
      ds.target_names.push_back({links[li].name(), 0});
      ds.main_target_columns.push_back(static_cast<int>(li));
    }
  }
  for (long li = 0; li < k; ++li) {
    const auto& v = series.of(links[li].name());
    for (long r = 0; r < n_rows; ++r) {
      long n = first_n + r;
      for (int j = 0; j < lag; ++j) ds.inputs(r, li * lag + j) = v[n - lag + j];
      if (task == TaskKind::MTL) {
        ds.targets(r, 3 * li + 0) = v[n - 1];
        ds.targets(r, 3 * li + 1) = v[n];
        ds.targets(r, 3 * li + 2) = v[n + 1];
      } else {
        ds.targets(r, li) = v[n];
      }
    }
  }
  return ds;
}

}  // namespace detail

// Single-link windows: inputs t(n-lag)..t(n-1); STL target t(n), MTL
// targets t(n-1), t(n), t(n+1) with t(n) as the main task.
inline SupervisedDataset build_single_link_dataset(const FlowSeries& series, const LinkId& link,
                                                   int lag = 5, TaskKind task = TaskKind::STL) {
  return detail::build_windowed(series, {link}, lag, task);
}

// Multi-link windows over one junction: k links give k*lag inputs; STL has
// one t(n) target per link, MTL three targets per link.
inline SupervisedDataset build_multi_link_dataset(const FlowSeries& series, const RoadNetwork& net,
                                                  const std::string& junction, int lag = 5,
                                                  TaskKind task = TaskKind::STL) {
  return detail::build_windowed(series, net.links_of(junction), lag, task);
}

// Dataset over an explicit list of lagged variables (graphical-lasso
// selections), predicting t(n) of the target link. The row window is the
// fixed `window` (default 5) regardless of the largest selected lag, so a
// selection of exactly the target's own lags reproduces the STL dataset.
inline SupervisedDataset build_gl_dataset(const FlowSeries& series,
                                          const std::vector<VarRef>& selected,
                                          const std::string& target_link, int window = 5) {
  if (selected.empty()) throw std::invalid_argument("build_gl_dataset: empty selection");
  for (const auto& v : selected)
    if (v.lag < 1 || v.lag > window)
      throw std::invalid_argument("build_gl_dataset: lag out of range for " + v.label());
  long len = static_cast<long>(series.length());
  long n_rows = len - window;
  if (n_rows <= 0) throw std::invalid_argument("build_gl_dataset: series too short");

  SupervisedDataset ds;
  ds.first_target_index = series.start_index + window;
  ds.inputs.resize(n_rows, static_cast<long>(selected.size()));
  ds.targets.resize(n_rows, 1);
  ds.input_names = selected;
  ds.target_names.push_back({target_link, 0});
  ds.main_target_columns.push_back(0);
  const auto& tv = series.of(target_link);
  for (long c = 0; c < static_cast<long>(selected.size()); ++c) {
    const auto& v = series.of(selected[c].link);
    for (long r = 0; r < n_rows; ++r) ds.inputs(r, c) = v[window + r - selected[c].lag];
  }
  for (long r = 0; r < n_rows; ++r) ds.targets(r, 0) = tv[window + r];
  return ds;
}

// Chronological prefix split, no shuffling.
inline std::pair<SupervisedDataset, SupervisedDataset> split(const SupervisedDataset& ds,
                                                             long train_rows) {
  if (train_rows <= 0 || train_rows >= ds.rows())
    throw std::invalid_argument("split: train_rows out of range");
  SupervisedDataset train, test;
  train.inputs = ds.inputs.topRows(train_rows);
  train.targets = ds.targets.topRows(train_rows);
  test.inputs = ds.inputs.bottomRows(ds.rows() - train_rows);
  test.targets = ds.targets.bottomRows(ds.rows() - train_rows);
  train.input_names = test.input_names = ds.input_names;
  train.target_names = test.target_names = ds.target_names;
  train.main_target_columns = test.main_target_columns = ds.main_target_columns;
  train.first_target_index = ds.first_target_index;
  test.first_target_index = ds.first_target_index + train_rows;
  return {std::move(train), std::move(test)};
}

// Per-column affine scaling fit on training rows only. MinMax maps each
// training column to [0,1]; ZScore to zero mean, unit variance. Zero-range
// columns map to 0 and invert back to their constant.
struct Scaler {
  enum class Mode { MinMax, ZScore };

  struct Column {
    double shift = 0.0;  // min (MinMax) or mean (ZScore)
    double scale = 1.0;  // max-min or std; 0 marks a degenerate column
  };

  Mode mode = Mode::MinMax;
  std::vector<Column> in_cols, out_cols;
  bool fitted = false;

  static std::vector<Column> fit_columns(const Eigen::MatrixXd& m, Mode mode) {
    std::vector<Column> cols(m.cols());
    for (long c = 0; c < m.cols(); ++c) {
      if (mode == Mode::MinMax) {
        double lo = m.col(c).minCoeff(), hi = m.col(c).maxCoeff();
        cols[c] = {lo, hi - lo};
      } else {
        double mean = m.col(c).mean();
        double var = (m.col(c).array() - mean).square().sum() / std::max<long>(1, m.rows());
        cols[c] = {mean, std::sqrt(var)};
      }
    }
    return cols;
  }

  static void transform(Eigen::MatrixXd& m, const std::vector<Column>& cols) {
    if (static_cast<std::size_t>(m.cols()) != cols.size())
      throw std::invalid_argument("scaler: column count mismatch");
    for (long c = 0; c < m.cols(); ++c) {
      if (cols[c].scale == 0.0)
        m.col(c).setZero();
      else
        m.col(c) = (m.col(c).array() - cols[c].shift) / cols[c].scale;
    }
  }

  static void invert(Eigen::MatrixXd& m, const std::vector<Column>& cols) {
    if (static_cast<std::size_t>(m.cols()) != cols.size())
      throw std::invalid_argument("scaler: column count mismatch");
    for (long c = 0; c < m.cols(); ++c) m.col(c) = m.col(c).array() * cols[c].scale + cols[c].shift;
  }

  Eigen::MatrixXd apply_inputs(Eigen::MatrixXd m) const {
    require_fitted();
    transform(m, in_cols);
    return m;
  }

  Eigen::MatrixXd apply_targets(Eigen::MatrixXd m) const {
    require_fitted();
    transform(m, out_cols);
    return m;
  }

  SupervisedDataset apply(SupervisedDataset ds) const {
    ds.inputs = apply_inputs(std::move(ds.inputs));
    ds.targets = apply_targets(std::move(ds.targets));
    return ds;
  }

  // Predictions arrive with one column per target column (or a subset given
  // by column indices); restores original units.
  Eigen::MatrixXd invert_targets(Eigen::MatrixXd preds) const {
    require_fitted();
    invert(preds, out_cols);
    return preds;
  }

  Eigen::MatrixXd invert_target_columns(Eigen::MatrixXd preds,
                                        const std::vector<int>& columns) const {
    require_fitted();
    if (static_cast<std::size_t>(preds.cols()) != columns.size())
      throw std::invalid_argument("scaler: column count mismatch");
    for (long c = 0; c < preds.cols(); ++c) {
      const auto& col = out_cols.at(columns[c]);
      preds.col(c) = preds.col(c).array() * col.scale + col.shift;
    }
    return preds;
  }

  void require_fitted() const {
    if (!fitted) throw std::logic_error("scaler used before fit");
  }
};

inline Scaler fit_scaler(const SupervisedDataset& train,
                         Scaler::Mode mode = Scaler::Mode::MinMax) {
  Scaler s;
  s.mode = mode;
  s.in_cols = Scaler::fit_columns(train.inputs, mode);
  s.out_cols = Scaler::fit_columns(train.targets, mode);
  s.fitted = true;
  return s;
}

inline SupervisedDataset apply(const Scaler& scaler, SupervisedDataset ds) {
  return scaler.apply(std::move(ds));
}

inline Eigen::MatrixXd invert_targets(const Scaler& scaler, Eigen::MatrixXd predictions) {
  return scaler.invert_targets(std::move(predictions));
}

}  // namespace flowcast
