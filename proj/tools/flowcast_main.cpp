// flowcast command-line tool: synthetic corpus generation, model runs,
// evaluation reports, and graphical-lasso graph export.
//
// Exit codes: 0 success, 1 completed with warnings (e.g. a solver flagged
// non-convergence), 2 usage or validation error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowcast/flowcast.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct GenConfig {
  std::string out_dir;
  std::string config_path;
  std::string topology_path;  // optional custom topology
  std::vector<int> links_per_junction;
  flowcast::SyntheticConfig syn;
};

struct RunConfig {
  std::string flows_path;
  std::string topology_path;
  std::string out_dir = ".";
  std::vector<std::string> approaches{"all"};
  double band_z = 0.0;
  bool emit_graph = false;
  bool emit_csv = false;
  flowcast::RunOptions opts;
};

struct EvalConfig {
  std::vector<std::string> results;
  std::string out_dir = ".";
};

struct GraphConfig {
  std::string flows_path;
  std::string topology_path;
  std::string out_dir = ".";
  int lag = 5;
  long train_samples = 2112;
  flowcast::GlassoConfig glasso_cfg;
};

void apply_key_value_config(const std::string& path, GenConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open generator config: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = flowcast::trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("generator config line " + std::to_string(lineno) +
                               ": expected key=value");
    std::string key = flowcast::trim(s.substr(0, eq));
    std::string val = flowcast::trim(s.substr(eq + 1));
    if (key == "days")
      cfg.syn.days = std::stoi(val);
    else if (key == "seed")
      cfg.syn.seed = std::stoull(val);
    else if (key == "coupling")
      cfg.syn.coupling = std::stod(val);
    else if (key == "noise_std")
      cfg.syn.noise_std = std::stod(val);
    else if (key == "noise_ar")
      cfg.syn.noise_ar = std::stod(val);
    else if (key == "base_mean")
      cfg.syn.base_mean = std::stod(val);
    else if (key == "links_per_junction") {
      cfg.links_per_junction.clear();
      for (const auto& tok : flowcast::split_on(val, ','))
        cfg.links_per_junction.push_back(std::stoi(flowcast::trim(tok)));
    } else {
      throw std::runtime_error("generator config line " + std::to_string(lineno) +
                               ": unknown key '" + key + "'");
    }
  }
}

int cmd_gen(const GenConfig& cfg_in) {
  GenConfig cfg = cfg_in;
  if (!cfg.config_path.empty()) apply_key_value_config(cfg.config_path, cfg);
  if (cfg.syn.days < 1) {
    std::cerr << "gen: days must be >= 1\n";
    return 2;
  }

  flowcast::RoadNetwork net;
  if (!cfg.topology_path.empty())
    net = flowcast::load_topology(cfg.topology_path);
  else if (!cfg.links_per_junction.empty())
    net = flowcast::make_network_from_profile(cfg.links_per_junction);
  else
    net = flowcast::make_default_network();

  flowcast::FlowSeries series = flowcast::generate_synthetic(net, cfg.syn);

  fs::create_directories(cfg.out_dir);
  flowcast::save_flows(series, (fs::path(cfg.out_dir) / "flows.csv").string());
  flowcast::save_topology(net, (fs::path(cfg.out_dir) / "topology.txt").string());

  // adjacent-link correlation table (one row per unordered pair)
  {
    std::ofstream out(fs::path(cfg.out_dir) / "correlations.csv");
    out << "junction,link_a,link_b,correlation\n";
    for (const auto& e : flowcast::adjacent_correlations(series, net)) {
      out << e.junction << "," << e.link_a << "," << e.link_b << ",";
      if (e.defined)
        out << flowcast::format_sig(e.r, 6);
      else
        out << "undefined";
      out << "\n";
    }
  }

  ordered_json manifest;
  manifest["days"] = cfg.syn.days;
  manifest["seed"] = cfg.syn.seed;
  manifest["coupling"] = cfg.syn.coupling;
  manifest["noise_std"] = cfg.syn.noise_std;
  manifest["noise_ar"] = cfg.syn.noise_ar;
  manifest["base_mean"] = cfg.syn.base_mean;
  manifest["links"] = net.links.size();
  manifest["junctions"] = net.junctions.size();
  manifest["samples_per_link"] = series.length();
  manifest["files"] = {{"flows", "flows.csv"}, {"topology", "topology.txt"}};
  std::ofstream mout(fs::path(cfg.out_dir) / "manifest.json");
  if (!mout) {
    std::cerr << "gen: cannot write manifest\n";
    return 2;
  }
  mout << manifest.dump(2) << "\n";
  std::cout << "gen: " << net.links.size() << " links, " << series.length()
            << " samples/link -> " << cfg.out_dir << "\n";
  return 0;
}

std::vector<flowcast::Approach> resolve_approaches(const std::vector<std::string>& specs) {
  std::vector<flowcast::Approach> out;
  auto add = [&](flowcast::Approach a) {
    if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  };
  for (const auto& spec : specs) {
    for (const auto& tok : flowcast::split_on(spec, ',')) {
      std::string t = flowcast::trim(tok);
      if (t.empty()) continue;
      if (t == "all") {
        for (auto a : flowcast::all_approaches()) add(a);
      } else {
        add(flowcast::parse_approach(t));
      }
    }
  }
  if (out.empty()) throw std::invalid_argument("no approaches requested");
  return out;
}

int cmd_run(const RunConfig& cfg) {
  if (!fs::exists(cfg.flows_path)) {
    std::cerr << "run: flows file not found: " << cfg.flows_path << "\n";
    return 2;
  }
  if (!fs::exists(cfg.topology_path)) {
    std::cerr << "run: topology file not found: " << cfg.topology_path << "\n";
    return 2;
  }
  auto approaches = resolve_approaches(cfg.approaches);
  flowcast::RoadNetwork net = flowcast::load_topology(cfg.topology_path);
  flowcast::FlowSeries series = flowcast::load_flows(cfg.flows_path);

  flowcast::RunOptions opts = cfg.opts;
  opts.capture_graph = cfg.emit_graph;
  fs::create_directories(cfg.out_dir);

  ordered_json manifest;
  manifest["flows"] = cfg.flows_path;
  manifest["topology"] = cfg.topology_path;
  manifest["seed"] = opts.seed;
  manifest["lag"] = opts.lag;
  manifest["train_samples"] = opts.train_samples;
  manifest["rho"] = opts.glasso_cfg.rho;
  manifest["zero_threshold"] = opts.glasso_cfg.zero_threshold;
  {
    ordered_json names = ordered_json::array();
    for (auto a : approaches) names.push_back(flowcast::approach_name(a));
    manifest["approaches"] = std::move(names);
  }

  bool warnings = false;
  for (auto approach : approaches) {
    std::string name = flowcast::approach_name(approach);
    std::cout << "run: " << name << "..." << std::flush;
    flowcast::ForecastResult res = flowcast::run_approach(approach, series, net, opts);

    if (approach == flowcast::Approach::GL_NN && cfg.emit_graph) {
      if (res.metadata.contains("graph_dot")) {
        std::ofstream dot(fs::path(cfg.out_dir) / "glasso_graph.dot");
        dot << res.metadata["graph_dot"].get<std::string>();
        res.metadata.erase("graph_dot");
      }
      ordered_json sel;
      for (const auto& link : res.link_order)
        sel[link] = res.metadata["links"][link]["selected"];
      std::ofstream sout(fs::path(cfg.out_dir) / "gl_selection.json");
      sout << sel.dump(2) << "\n";
    }
    if (res.metadata.contains("warnings")) warnings = true;

    flowcast::save_forecast(res, (fs::path(cfg.out_dir) / ("result_" + name + ".json")).string());
    if (cfg.emit_csv) {
      fs::path dir = fs::path(cfg.out_dir) / "csv" / name;
      fs::create_directories(dir);
      for (const auto& link : res.link_order) {
        std::ofstream out(dir / (link + ".csv"));
        flowcast::write_forecast_csv(res, link, out);
      }
    }
    if (approach == flowcast::Approach::GPR && cfg.band_z > 0.0) {
      fs::path dir = fs::path(cfg.out_dir) / "bands";
      fs::create_directories(dir);
      for (const auto& link : res.link_order) {
        std::ofstream out(dir / (link + ".csv"));
        flowcast::write_band_csv(res, link, cfg.band_z, out);
      }
    }
    std::cout << " done\n";
  }
  std::ofstream mout(fs::path(cfg.out_dir) / "run_manifest.json");
  mout << manifest.dump(2) << "\n";
  if (warnings) {
    std::cerr << "run: completed with warnings (see result metadata)\n";
    return 1;
  }
  return 0;
}

int cmd_eval(const EvalConfig& cfg) {
  std::vector<std::string> files;
  for (const auto& r : cfg.results) {
    if (fs::is_directory(r)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(r)) {
        std::string name = e.path().filename().string();
        if (name.rfind("result_", 0) == 0 && e.path().extension() == ".json")
          found.push_back(e.path().string());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(r)) {
      files.push_back(r);
    } else {
      std::cerr << "eval: no such file or directory: " << r << "\n";
      return 2;
    }
  }
  if (files.empty()) {
    std::cerr << "eval: no result files found\n";
    return 2;
  }

  std::vector<flowcast::ForecastResult> results;
  for (const auto& f : files) results.push_back(flowcast::load_forecast(f));

  // Validate consistent link sets up front so the offending file is named.
  std::vector<std::string> ref = results.front().link_order;
  std::sort(ref.begin(), ref.end());
  for (std::size_t i = 1; i < results.size(); ++i) {
    std::vector<std::string> ls = results[i].link_order;
    std::sort(ls.begin(), ls.end());
    if (ls != ref) {
      std::cerr << "eval: link set of " << files[i] << " does not match " << files[0] << "\n";
      return 2;
    }
    if (results[i].test_start_index != results.front().test_start_index) {
      std::cerr << "eval: test range of " << files[i] << " does not match " << files[0] << "\n";
      return 2;
    }
  }
  if (results.size() == 1)
    std::cerr << "eval: single result; t-test matrix will be empty\n";

  flowcast::ComparisonReport rep = flowcast::summarize(results);
  flowcast::write_report_files(rep, cfg.out_dir);
  std::cout << "eval: " << results.size() << " approaches over " << rep.links.size()
            << " links -> " << cfg.out_dir << "\n";
  return 0;
}

int cmd_graph(const GraphConfig& cfg) {
  if (!fs::exists(cfg.flows_path)) {
    std::cerr << "graph: flows file not found: " << cfg.flows_path << "\n";
    return 2;
  }
  if (!fs::exists(cfg.topology_path)) {
    std::cerr << "graph: topology file not found: " << cfg.topology_path << "\n";
    return 2;
  }
  flowcast::RoadNetwork net = flowcast::load_topology(cfg.topology_path);
  flowcast::FlowSeries series = flowcast::load_flows(cfg.flows_path);
  long train = std::min<long>(cfg.train_samples, static_cast<long>(series.length()));
  flowcast::CovarianceMatrix cov = flowcast::build_gl_covariance(series, net, cfg.lag, train);
  flowcast::PrecisionEstimate est = flowcast::glasso(cov, cfg.glasso_cfg);
  flowcast::GraphicalModel graph = flowcast::extract_graph(est, cfg.glasso_cfg.zero_threshold);

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "graph.dot");
    flowcast::write_dot(graph, out);
  }
  {
    std::ofstream out(fs::path(cfg.out_dir) / "theta.csv");
    flowcast::write_theta_csv(est, out);
  }
  ordered_json meta;
  meta["rho"] = cfg.glasso_cfg.rho;
  meta["zero_threshold"] = cfg.glasso_cfg.zero_threshold;
  meta["variables"] = graph.nodes.size();
  meta["edges"] = graph.edges.size();
  meta["iterations"] = est.iterations_used;
  meta["converged"] = est.converged;
  std::ofstream mout(fs::path(cfg.out_dir) / "graph_meta.json");
  mout << meta.dump(2) << "\n";
  std::cout << "graph: " << graph.nodes.size() << " variables, " << graph.edges.size()
            << " edges -> " << cfg.out_dir << "\n";
  return est.converged ? 0 : 1;
}

void add_nn_gpr_flags(CLI::App* cmd, flowcast::RunOptions& opts) {
  cmd->add_option("--nn-max-epochs", opts.nn.max_epochs, "LM epoch cap")->capture_default_str();
  cmd->add_option("--nn-patience", opts.nn.patience, "validation patience (accepted epochs)")
      ->capture_default_str();
  cmd->add_option("--gpr-opt-steps", opts.gpr.opt_steps, "GPR hyperparameter ascent steps")
      ->capture_default_str();
  cmd->add_option("--gpr-opt-window", opts.gpr.opt_window,
                  "training rows used for GPR hyperparameter search")
      ->capture_default_str();
  cmd->add_option("--gpr-fit-window", opts.gpr.fit_window,
                  "training rows kept in the final GPR model")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowcast: network-scale short-term traffic flow forecasting"};
  app.require_subcommand(1);

  GenConfig gen;
  CLI::App* cgen = app.add_subcommand("gen", "generate a synthetic flow corpus");
  cgen->add_option("--out", gen.out_dir, "output directory")->required();
  cgen->add_option("--days", gen.syn.days, "days of data (96 samples/day)")
      ->capture_default_str();
  cgen->add_option("--seed", gen.syn.seed, "generator seed")->capture_default_str();
  cgen->add_option("--coupling", gen.syn.coupling, "upstream coupling in [0,1]")
      ->capture_default_str();
  cgen->add_option("--noise-std", gen.syn.noise_std, "stationary noise s.d. (vehs/h)")
      ->capture_default_str();
  cgen->add_option("--noise-ar", gen.syn.noise_ar, "AR(1) noise persistence in [0,1)")
      ->capture_default_str();
  cgen->add_option("--base-mean", gen.syn.base_mean, "mean level of base profiles")
      ->capture_default_str();
  cgen->add_option("--config", gen.config_path, "key=value generator config file");
  cgen->add_option("--topology", gen.topology_path, "generate over an existing topology file");
  cgen->add_option("--links-per-junction", gen.links_per_junction,
                   "junction size profile, e.g. 3 4 4 2");

  RunConfig run;
  CLI::App* crun = app.add_subcommand("run", "train and forecast the requested approaches");
  crun->add_option("--flows", run.flows_path, "flow CSV")->required();
  crun->add_option("--topology", run.topology_path, "topology file")->required();
  crun->add_option("--out", run.out_dir, "output directory")->capture_default_str();
  crun->add_option("--approach", run.approaches,
                   "approach tags (SSTL SMTL MSTL MMTL GPR GL_NN Hist_Avg) or 'all'");
  crun->add_option("--seed", run.opts.seed, "base seed")->capture_default_str();
  crun->add_option("--jobs", run.opts.jobs, "worker threads (0 = hardware)")
      ->capture_default_str();
  crun->add_option("--lag", run.opts.lag, "input lags per link")->capture_default_str();
  crun->add_option("--train-samples", run.opts.train_samples, "training prefix length")
      ->capture_default_str();
  crun->add_option("--rho", run.opts.glasso_cfg.rho, "graphical lasso penalty")
      ->capture_default_str();
  crun->add_option("--rho-grid", run.opts.rho_grid,
                   "candidate penalties; picks the best GL_NN validation RMSE");
  crun->add_option("--zero-threshold", run.opts.glasso_cfg.zero_threshold,
                   "precision entries below this are treated as zero")
      ->capture_default_str();
  crun->add_option("--band-z", run.band_z, "emit GPR band CSVs at this z");
  crun->add_flag("--emit-graph", run.emit_graph, "write the GL graph (DOT) and selections");
  crun->add_flag("--emit-csv", run.emit_csv, "write per-link prediction CSVs");
  add_nn_gpr_flags(crun, run.opts);

  EvalConfig eval_cfg;
  CLI::App* ceval = app.add_subcommand("eval", "summarize result files into report tables");
  ceval->add_option("--results", eval_cfg.results, "result files or directories")->required();
  ceval->add_option("--out", eval_cfg.out_dir, "output directory")->capture_default_str();

  GraphConfig graph_cfg;
  CLI::App* cgraph = app.add_subcommand("graph", "graphical lasso graph and Theta export");
  cgraph->add_option("--flows", graph_cfg.flows_path, "flow CSV")->required();
  cgraph->add_option("--topology", graph_cfg.topology_path, "topology file")->required();
  cgraph->add_option("--out", graph_cfg.out_dir, "output directory")->capture_default_str();
  cgraph->add_option("--lag", graph_cfg.lag, "lags per link in the variable universe")
      ->capture_default_str();
  cgraph->add_option("--train-samples", graph_cfg.train_samples, "rows used for the covariance")
      ->capture_default_str();
  cgraph->add_option("--rho", graph_cfg.glasso_cfg.rho, "graphical lasso penalty")
      ->capture_default_str();
  cgraph->add_option("--zero-threshold", graph_cfg.glasso_cfg.zero_threshold,
                     "edge threshold on |Theta|")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cgen->parsed()) return cmd_gen(gen);
    if (crun->parsed()) return cmd_run(run);
    if (ceval->parsed()) return cmd_eval(eval_cfg);
    if (cgraph->parsed()) return cmd_graph(graph_cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
