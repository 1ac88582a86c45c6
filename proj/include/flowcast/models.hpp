#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/dataset.hpp"
#include "flowcast/flow_series.hpp"
#include "flowcast/glasso.hpp"
#include "flowcast/gpr.hpp"
#include "flowcast/network.hpp"
#include "flowcast/nn.hpp"
#include "flowcast/parallel.hpp"
#include "flowcast/util.hpp"

namespace flowcast {

enum class Approach { SSTL, SMTL, MSTL, MMTL, GPR, GL_NN, HIST_AVG };

inline const std::vector<Approach>& all_approaches() {
  static const std::vector<Approach> v{Approach::SSTL, Approach::SMTL, Approach::MSTL,
                                       Approach::MMTL, Approach::GPR,  Approach::GL_NN,
                                       Approach::HIST_AVG};
  return v;
}

inline std::string approach_name(Approach a) {
  switch (a) {
    case Approach::SSTL: return "SSTL";
    case Approach::SMTL: return "SMTL";
    case Approach::MSTL: return "MSTL";
    case Approach::MMTL: return "MMTL";
    case Approach::GPR: return "GPR";
    case Approach::GL_NN: return "GL_NN";
    case Approach::HIST_AVG: return "Hist_Avg";
  }
  throw std::logic_error("approach_name: bad tag");
}

inline Approach parse_approach(const std::string& s) {
  for (Approach a : all_approaches())
    if (approach_name(a) == s) return a;
  // tolerate common casings of the baseline tag
  if (s == "HIST_AVG" || s == "hist_avg") return Approach::HIST_AVG;
  throw std::invalid_argument("unknown approach: " + s);
}

struct LinkForecast {
  std::vector<double> actual;
  std::vector<double> predicted;
  std::vector<double> variance;  // GPR only; empty otherwise
};

struct ForecastResult {
  Approach approach = Approach::SSTL;
  long test_start_index = 0;
  std::vector<std::string> link_order;
  std::map<std::string, LinkForecast> links;
  nlohmann::ordered_json metadata;
};

struct GprOptions {
  int opt_window = 512;   // most recent training rows used for hyperparameter search
  int opt_steps = 100;
  double learning_rate = 0.1;
  int fit_window = 1024;  // most recent training rows kept in the final model
};

struct RunOptions {
  std::uint64_t seed = 42;
  int jobs = 0;  // 0 -> hardware concurrency
  int lag = 5;
  long train_samples = 2112;
  TrainConfig nn;
  GlassoConfig glasso_cfg;
  GprOptions gpr;
  std::vector<double> rho_grid;  // nonempty -> pick rho by GL_NN validation RMSE
  bool capture_graph = false;    // stash the GL graph as DOT text in the metadata

  int effective_jobs() const { return jobs > 0 ? jobs : default_jobs(); }
};

// Lagged variable universe for the graphical model: lag 0..lag per link
// over the training rows only, columns standardized to unit variance before
// the covariance estimate.
inline CovarianceMatrix build_gl_covariance(const FlowSeries& series, const RoadNetwork& net,
                                            int lag, long train_samples) {
  const long n_rows = train_samples - lag;
  const long n_links = static_cast<long>(net.links.size());
  if (n_rows < 2) throw std::invalid_argument("build_gl_covariance: too few training rows");
  if (n_links < 1) throw std::invalid_argument("build_gl_covariance: empty network");
  std::vector<VarRef> names;
  Eigen::MatrixXd M(n_rows, n_links * (lag + 1));
  for (long li = 0; li < n_links; ++li) {
    const auto& v = series.of(net.links[li].name());
    if (static_cast<long>(v.size()) < train_samples)
      throw std::invalid_argument("build_gl_covariance: series shorter than train_samples");
    for (int j = 0; j <= lag; ++j) {
      long col = li * (lag + 1) + j;
      names.push_back({net.links[li].name(), j});
      for (long r = 0; r < n_rows; ++r) M(r, col) = v[lag + r - j];
    }
  }
  for (long c = 0; c < M.cols(); ++c) {
    double mean = M.col(c).mean();
    double sd = std::sqrt((M.col(c).array() - mean).square().sum() / n_rows);
    if (sd > 0.0) M.col(c) /= sd;
  }
  return empirical_covariance(M, names);
}

namespace detail {

inline void check_run_preconditions(const FlowSeries& series, const RunOptions& opts) {
  if (opts.lag < 1) throw std::invalid_argument("run: lag must be >= 1");
  if (opts.train_samples <= opts.lag + 1)
    throw std::invalid_argument("run: train_samples too small for the lag window");
  if (static_cast<long>(series.length()) <= opts.train_samples)
    throw std::invalid_argument("run: series has no test samples beyond train_samples");
}

// Carve a chronological validation tail off a (scaled) training dataset.
inline std::pair<SupervisedDataset, SupervisedDataset> carve_validation(
    const SupervisedDataset& train, double val_fraction) {
  long v = std::lround(val_fraction * static_cast<double>(train.rows()));
  v = std::min(std::max<long>(v, 1), train.rows() - 1);
  return split(train, train.rows() - v);
}

struct NnGroupOutput {
  std::vector<std::string> links;
  std::vector<std::vector<double>> predicted;  // per link, original units
  std::vector<std::vector<double>> actual;
  nlohmann::ordered_json meta;
};

// Shared train/predict path for the four NN approaches: build the windowed
// dataset for a link group, train with the architecture search, and predict
// the test range from STL-shaped input windows so every approach is scored
// on the identical test targets.
inline NnGroupOutput run_nn_group(const FlowSeries& series, const std::vector<LinkId>& links,
                                  TaskKind task, const RunOptions& opts,
                                  const std::string& task_name) {
  const int lag = opts.lag;
  SupervisedDataset ds_all = detail::build_windowed(series, links, lag, task);
  long train_rows = opts.train_samples - lag - (task == TaskKind::MTL ? 1 : 0);
  if (train_rows < 4)
    throw std::invalid_argument(task_name + ": too few training rows");
  auto [train_all, train_rest] = split(ds_all, train_rows);

  Scaler scaler = fit_scaler(train_all);
  SupervisedDataset strain = scaler.apply(std::move(train_all));
  auto [head, vtail] = carve_validation(strain, opts.nn.val_fraction);

  TrainConfig cfg = opts.nn;
  cfg.seed = task_seed(opts.seed, task_name);
  ArchSearchResult arch = select_architecture(head, vtail, cfg);

  // Test side: STL windows give inputs plus main-task actuals for every
  // test target index, including the last sample MTL rows cannot cover.
  SupervisedDataset stl_test;
  if (task == TaskKind::STL) {
    stl_test = std::move(train_rest);
  } else {
    SupervisedDataset ds_stl = detail::build_windowed(series, links, lag, TaskKind::STL);
    stl_test = split(ds_stl, opts.train_samples - lag).second;
  }

  Eigen::MatrixXd pred_all = arch.net.forward_batch(scaler.apply_inputs(stl_test.inputs));
  const auto& main_cols = ds_all.main_target_columns;
  Eigen::MatrixXd main_pred(pred_all.rows(), static_cast<long>(main_cols.size()));
  for (std::size_t i = 0; i < main_cols.size(); ++i) main_pred.col(i) = pred_all.col(main_cols[i]);
  main_pred = scaler.invert_target_columns(std::move(main_pred), main_cols);

  NnGroupOutput out;
  out.meta["a"] = arch.best_a;
  out.meta["n_hidden"] = arch.candidates[arch.best_a - 1].n_hidden;
  {
    nlohmann::ordered_json cand = nlohmann::ordered_json::array();
    for (const auto& c : arch.candidates)
      cand.push_back({{"a", c.a}, {"val_rmse", c.val_rmse}});
    out.meta["candidates"] = std::move(cand);
  }
  for (std::size_t i = 0; i < links.size(); ++i) {
    out.links.push_back(links[i].name());
    Eigen::VectorXd p = main_pred.col(i);
    Eigen::VectorXd a = stl_test.targets.col(stl_test.main_target_columns[i]);
    out.predicted.emplace_back(p.data(), p.data() + p.size());
    out.actual.emplace_back(a.data(), a.data() + a.size());
  }
  return out;
}

inline nlohmann::ordered_json nn_config_json(const TrainConfig& c) {
  return {{"max_epochs", c.max_epochs},   {"lambda_init", c.lm_lambda_init},
          {"lambda_up", c.lm_lambda_up},  {"lambda_down", c.lm_lambda_down},
          {"grad_tol", c.grad_tol},       {"val_fraction", c.val_fraction},
          {"patience", c.patience}};
}

}  // namespace detail

// Historical-average baseline: the prediction for a test sample is the mean
// of all training samples sharing its time-of-day slot.
inline ForecastResult run_hist_avg(const FlowSeries& series, const RoadNetwork& net,
                                   const RunOptions& opts) {
  detail::check_run_preconditions(series, opts);
  if (opts.train_samples < kSamplesPerDay)
    throw std::invalid_argument("run_hist_avg: training range must cover a full day");
  ForecastResult res;
  res.approach = Approach::HIST_AVG;
  res.test_start_index = series.start_index + opts.train_samples;
  const long len = static_cast<long>(series.length());
  for (const auto& link : net.links) {
    const auto& v = series.of(link.name());
    std::vector<double> sum(kSamplesPerDay, 0.0);
    std::vector<long> count(kSamplesPerDay, 0);
    for (long i = 0; i < opts.train_samples; ++i) {
      int slot = static_cast<int>((series.start_index + i) % kSamplesPerDay);
      sum[slot] += v[i];
      ++count[slot];
    }
    LinkForecast f;
    for (long i = opts.train_samples; i < len; ++i) {
      int slot = static_cast<int>((series.start_index + i) % kSamplesPerDay);
      if (count[slot] == 0)
        throw std::runtime_error("run_hist_avg: no training samples for slot " +
                                 std::to_string(slot));
      f.predicted.push_back(sum[slot] / static_cast<double>(count[slot]));
      f.actual.push_back(v[i]);
    }
    res.link_order.push_back(link.name());
    res.links.emplace(link.name(), std::move(f));
  }
  res.metadata["definition"] = "time-of-day slot mean over training samples";
  res.metadata["seed"] = opts.seed;
  res.metadata["train_samples"] = opts.train_samples;
  return res;
}

namespace detail {

struct GlRunOutcome {
  ForecastResult result;
  double mean_val_rmse = 0.0;  // scaled units; used by the rho grid search
};

inline GlRunOutcome run_gl_nn_once(const FlowSeries& series, const RoadNetwork& net,
                                   const RunOptions& opts, double rho) {
  const int lag = opts.lag;
  const long n_rows = opts.train_samples - lag;  // rows n in [lag, train_samples)
  const long n_links = static_cast<long>(net.links.size());
  if (n_links < 2) throw std::invalid_argument("run_gl_nn: needs at least 2 links");

  CovarianceMatrix cov = build_gl_covariance(series, net, lag, opts.train_samples);
  GlassoConfig gcfg = opts.glasso_cfg;
  gcfg.rho = rho;
  PrecisionEstimate est = glasso(cov, gcfg);
  GraphicalModel graph = extract_graph(est, gcfg.zero_threshold);

  ForecastResult res;
  res.approach = Approach::GL_NN;
  res.test_start_index = series.start_index + opts.train_samples;

  struct PerLink {
    LinkForecast forecast;
    nlohmann::ordered_json meta;
    double val_rmse = 0.0;
  };
  std::vector<PerLink> outs(n_links);
  parallel_for(static_cast<std::size_t>(n_links), opts.effective_jobs(), [&](std::size_t li) {
    const std::string link = net.links[li].name();
    try {
      FeatureSelection sel = select_features(graph, link, lag);
      SupervisedDataset ds = build_gl_dataset(series, sel.selected, link, lag);
      auto [train_all, test] = split(ds, n_rows);
      Scaler scaler = fit_scaler(train_all);
      SupervisedDataset strain = scaler.apply(std::move(train_all));
      auto [head, vtail] = carve_validation(strain, opts.nn.val_fraction);
      TrainConfig cfg = opts.nn;
      cfg.seed = task_seed(opts.seed, "GL_NN/" + link);
      ArchSearchResult arch = select_architecture(head, vtail, cfg);
      Eigen::MatrixXd pred = arch.net.forward_batch(scaler.apply_inputs(test.inputs));
      pred = scaler.invert_targets(std::move(pred));

      PerLink& o = outs[li];
      o.forecast.predicted.assign(pred.col(0).data(), pred.col(0).data() + pred.rows());
      Eigen::VectorXd act = test.targets.col(0);
      o.forecast.actual.assign(act.data(), act.data() + act.size());
      nlohmann::ordered_json feats = nlohmann::ordered_json::array();
      for (const auto& f : sel.selected) feats.push_back(f.label());
      o.meta["selected"] = std::move(feats);
      o.meta["n_inputs"] = sel.selected.size();
      o.meta["fallback"] = sel.fallback_used;
      o.meta["a"] = arch.best_a;
      o.val_rmse = arch.candidates[arch.best_a - 1].val_rmse;
    } catch (const std::exception& e) {
      throw std::runtime_error("GL_NN link " + link + ": " + e.what());
    }
  });

  double sum_val = 0.0;
  nlohmann::ordered_json per_link_meta;
  for (long li = 0; li < n_links; ++li) {
    const std::string link = net.links[li].name();
    res.link_order.push_back(link);
    res.links.emplace(link, std::move(outs[li].forecast));
    per_link_meta[link] = std::move(outs[li].meta);
    sum_val += outs[li].val_rmse;
  }
  res.metadata["seed"] = opts.seed;
  res.metadata["rho"] = rho;
  res.metadata["zero_threshold"] = gcfg.zero_threshold;
  res.metadata["standardization"] = "unit-variance columns before covariance";
  res.metadata["glasso_iterations"] = est.iterations_used;
  res.metadata["glasso_converged"] = est.converged;
  res.metadata["graph_edges"] = graph.edges.size();
  res.metadata["nn"] = nn_config_json(opts.nn);
  res.metadata["links"] = std::move(per_link_meta);
  if (!est.converged) res.metadata["warnings"] = {"glasso did not converge; best iterate used"};
  if (opts.capture_graph) {
    std::ostringstream dot;
    write_dot(graph, dot);
    res.metadata["graph_dot"] = dot.str();
  }
  return {std::move(res), sum_val / static_cast<double>(n_links)};
}

}  // namespace detail

// GL_NN pipeline: one network-wide graphical lasso on the lagged variable
// universe (training rows only), per-link neighborhood feature selection,
// then an STL net per link on the selected inputs.
inline ForecastResult run_gl_nn(const FlowSeries& series, const RoadNetwork& net,
                                const RunOptions& opts) {
  detail::check_run_preconditions(series, opts);
  if (opts.rho_grid.empty())
    return detail::run_gl_nn_once(series, net, opts, opts.glasso_cfg.rho).result;

  // rho grid: keep the run whose downstream nets validate best.
  std::vector<detail::GlRunOutcome> runs;
  for (double rho : opts.rho_grid) runs.push_back(detail::run_gl_nn_once(series, net, opts, rho));
  std::size_t best = 0;
  for (std::size_t i = 1; i < runs.size(); ++i)
    if (runs[i].mean_val_rmse < runs[best].mean_val_rmse) best = i;
  nlohmann::ordered_json grid = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < runs.size(); ++i)
    grid.push_back({{"rho", opts.rho_grid[i]}, {"mean_val_rmse", runs[i].mean_val_rmse}});
  runs[best].result.metadata["rho_grid"] = std::move(grid);
  return std::move(runs[best].result);
}

inline ForecastResult run_approach(Approach approach, const FlowSeries& series,
                                   const RoadNetwork& net, const RunOptions& opts) {
  detail::check_run_preconditions(series, opts);
  for (const auto& l : net.links)
    if (!series.has(l.name()))
      throw std::invalid_argument("run: series missing link " + l.name());

  if (approach == Approach::HIST_AVG) return run_hist_avg(series, net, opts);
  if (approach == Approach::GL_NN) return run_gl_nn(series, net, opts);

  ForecastResult res;
  res.approach = approach;
  res.test_start_index = series.start_index + opts.train_samples;
  res.metadata["seed"] = opts.seed;
  res.metadata["lag"] = opts.lag;
  res.metadata["train_samples"] = opts.train_samples;

  if (approach == Approach::GPR) {
    const long n_links = static_cast<long>(net.links.size());
    std::vector<LinkForecast> fc(n_links);
    std::vector<nlohmann::ordered_json> meta(n_links);
    parallel_for(static_cast<std::size_t>(n_links), opts.effective_jobs(), [&](std::size_t li) {
      const std::string link = net.links[li].name();
      try {
        SupervisedDataset ds =
            build_single_link_dataset(series, net.links[li], opts.lag, TaskKind::STL);
        auto [train_all, test] = split(ds, opts.train_samples - opts.lag);
        Scaler scaler = fit_scaler(train_all);
        SupervisedDataset strain = scaler.apply(std::move(train_all));

        long n_opt = std::min<long>(opts.gpr.opt_window, strain.rows());
        Eigen::MatrixXd Xopt = strain.inputs.bottomRows(n_opt).transpose();
        Eigen::VectorXd yopt = strain.targets.bottomRows(n_opt).col(0);
        KernelParams params = optimize_hyperparams(Xopt, yopt, KernelParams::defaults(opts.lag),
                                                   opts.gpr.opt_steps, opts.gpr.learning_rate);
        long n_fit = std::min<long>(opts.gpr.fit_window, strain.rows());
        GprModel model = fit(strain.inputs.bottomRows(n_fit).transpose(),
                             strain.targets.bottomRows(n_fit).col(0), params);
        PredictiveDistribution pd =
            predict(model, scaler.apply_inputs(test.inputs).transpose(), true);

        double scale = scaler.out_cols[0].scale, shift = scaler.out_cols[0].shift;
        LinkForecast& f = fc[li];
        for (long i = 0; i < pd.mean.size(); ++i) {
          f.predicted.push_back(pd.mean(i) * scale + shift);
          f.variance.push_back(pd.variance(i) * scale * scale);
          f.actual.push_back(test.targets(i, 0));
        }
        Eigen::VectorXd ll = params.length_scales.array().log();
        meta[li] = {{"log_length_scales", std::vector<double>(ll.data(), ll.data() + ll.size())},
                    {"signal_variance", params.signal_variance},
                    {"noise_variance", params.noise_variance},
                    {"opt_window", n_opt},
                    {"fit_window", n_fit}};
      } catch (const std::exception& e) {
        throw std::runtime_error("GPR link " + link + ": " + e.what());
      }
    });
    nlohmann::ordered_json per_link;
    for (long li = 0; li < n_links; ++li) {
      const std::string link = net.links[li].name();
      res.link_order.push_back(link);
      res.links.emplace(link, std::move(fc[li]));
      per_link[link] = std::move(meta[li]);
    }
    res.metadata["gpr"] = {{"opt_steps", opts.gpr.opt_steps},
                           {"learning_rate", opts.gpr.learning_rate}};
    res.metadata["links"] = std::move(per_link);
    return res;
  }

  // The four NN approaches share the grouped runner.
  bool multi = approach == Approach::MSTL || approach == Approach::MMTL;
  TaskKind task = (approach == Approach::SMTL || approach == Approach::MMTL) ? TaskKind::MTL
                                                                             : TaskKind::STL;
  struct Task {
    std::string name;
    std::vector<LinkId> links;
  };
  std::vector<Task> tasks;
  if (multi) {
    for (const auto& j : net.junctions)
      tasks.push_back({approach_name(approach) + "/" + j, net.links_of(j)});
  } else {
    for (const auto& l : net.links)
      tasks.push_back({approach_name(approach) + "/" + l.name(), {l}});
  }

  std::vector<detail::NnGroupOutput> outs(tasks.size());
  parallel_for(tasks.size(), opts.effective_jobs(), [&](std::size_t ti) {
    try {
      outs[ti] = detail::run_nn_group(series, tasks[ti].links, task, opts, tasks[ti].name);
    } catch (const std::exception& e) {
      throw std::runtime_error(tasks[ti].name + ": " + e.what());
    }
  });

  nlohmann::ordered_json groups;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    auto& o = outs[ti];
    for (std::size_t i = 0; i < o.links.size(); ++i) {
      LinkForecast f;
      f.predicted = std::move(o.predicted[i]);
      f.actual = std::move(o.actual[i]);
      res.link_order.push_back(o.links[i]);
      res.links.emplace(o.links[i], std::move(f));
    }
    groups[tasks[ti].name] = std::move(o.meta);
  }
  res.metadata["nn"] = detail::nn_config_json(opts.nn);
  res.metadata["groups"] = std::move(groups);
  return res;
}

// ---- serialization ----

inline nlohmann::ordered_json forecast_to_json(const ForecastResult& res) {
  nlohmann::ordered_json j;
  j["approach"] = approach_name(res.approach);
  j["test_start_index"] = res.test_start_index;
  nlohmann::ordered_json links;
  for (const auto& name : res.link_order) {
    const LinkForecast& f = res.links.at(name);
    nlohmann::ordered_json lf;
    lf["actual"] = f.actual;
    lf["predicted"] = f.predicted;
    if (!f.variance.empty()) lf["variance"] = f.variance;
    links[name] = std::move(lf);
  }
  j["links"] = std::move(links);
  j["metadata"] = res.metadata;
  return j;
}

inline ForecastResult forecast_from_json(const nlohmann::ordered_json& j) {
  ForecastResult res;
  res.approach = parse_approach(j.at("approach").get<std::string>());
  res.test_start_index = j.at("test_start_index").get<long>();
  for (const auto& [name, lf] : j.at("links").items()) {
    LinkForecast f;
    f.actual = lf.at("actual").get<std::vector<double>>();
    f.predicted = lf.at("predicted").get<std::vector<double>>();
    if (lf.contains("variance")) f.variance = lf.at("variance").get<std::vector<double>>();
    if (f.actual.size() != f.predicted.size())
      throw std::runtime_error("forecast_from_json: actual/predicted length mismatch");
    res.link_order.push_back(name);
    res.links.emplace(name, std::move(f));
  }
  if (j.contains("metadata")) res.metadata = j.at("metadata");
  return res;
}

inline void save_forecast(const ForecastResult& res, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write result file: " + path);
  out << forecast_to_json(res).dump(2) << "\n";
}

inline ForecastResult load_forecast(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open result file: " + path);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(in);
  return forecast_from_json(j);
}

// Per-link prediction CSV: index,actual,predicted[,variance]
inline void write_forecast_csv(const ForecastResult& res, const std::string& link,
                               std::ostream& out) {
  const LinkForecast& f = res.links.at(link);
  bool with_var = !f.variance.empty();
  out << (with_var ? "index,actual,predicted,variance\n" : "index,actual,predicted\n");
  char buf[192];
  for (std::size_t i = 0; i < f.actual.size(); ++i) {
    long idx = res.test_start_index + static_cast<long>(i);
    if (with_var)
      std::snprintf(buf, sizeof(buf), "%ld,%.10g,%.10g,%.10g\n", idx, f.actual[i],
                    f.predicted[i], f.variance[i]);
    else
      std::snprintf(buf, sizeof(buf), "%ld,%.10g,%.10g\n", idx, f.actual[i], f.predicted[i]);
    out << buf;
  }
}

// Band CSV: index,actual,mean,lower,upper with mean +/- z*sqrt(variance).
inline void write_band_csv(const ForecastResult& res, const std::string& link, double z,
                           std::ostream& out) {
  const LinkForecast& f = res.links.at(link);
  if (f.variance.empty())
    throw std::invalid_argument("write_band_csv: result has no variance for " + link);
  out << "index,actual,mean,lower,upper\n";
  char buf[256];
  for (std::size_t i = 0; i < f.actual.size(); ++i) {
    long idx = res.test_start_index + static_cast<long>(i);
    double half = z * std::sqrt(std::max(f.variance[i], 0.0));
    std::snprintf(buf, sizeof(buf), "%ld,%.10g,%.10g,%.10g,%.10g\n", idx, f.actual[i],
                  f.predicted[i], f.predicted[i] - half, f.predicted[i] + half);
    out << buf;
  }
}

}  // namespace flowcast
