#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowcast/eval.hpp"
#include "flowcast/models.hpp"
#include "flowcast/util.hpp"

namespace flowcast {

struct MetricRow {
  std::string link;
  Approach approach = Approach::SSTL;
  double rmse = 0.0;
  double mare = 0.0;  // fraction; tables print percent
  int mare_excluded = 0;
};

struct PairTTest {
  Approach a = Approach::SSTL;
  Approach b = Approach::SSTL;
  TTestResult test;
};

struct ComparisonReport {
  long test_start_index = 0;
  std::vector<std::string> links;
  std::vector<Approach> approaches;  // canonical order, restricted to supplied results
  std::vector<MetricRow> rows;       // link-major, then approach
  std::vector<std::pair<Approach, double>> rmse_sums;
  std::vector<PairTTest> ttests;  // upper triangle in approach order
  std::vector<std::pair<Approach, int>> wins_vs_baseline;  // present when Hist_Avg supplied
  nlohmann::ordered_json metadata;

  const MetricRow& row(const std::string& link, Approach a) const {
    for (const auto& r : rows)
      if (r.link == link && r.approach == a) return r;
    throw std::invalid_argument("report: no row for " + link + "/" + approach_name(a));
  }

  double rmse_sum(Approach a) const {
    for (const auto& [app, v] : rmse_sums)
      if (app == a) return v;
    throw std::invalid_argument("report: no rmse sum for " + approach_name(a));
  }
};

// Per-link metric tables, network-wide RMSE sums, the pairwise t-test
// matrix over per-link RMSE vectors, and win counts against the baseline.
inline ComparisonReport summarize(const std::vector<ForecastResult>& results) {
  if (results.empty()) throw std::invalid_argument("summarize: no results");
  ComparisonReport rep;
  rep.test_start_index = results.front().test_start_index;
  rep.links = results.front().link_order;
  std::vector<std::string> sorted_links = rep.links;
  std::sort(sorted_links.begin(), sorted_links.end());

  std::map<Approach, const ForecastResult*> by_approach;
  for (const auto& r : results) {
    if (!by_approach.emplace(r.approach, &r).second)
      throw std::invalid_argument("summarize: duplicate approach " + approach_name(r.approach));
    if (r.test_start_index != rep.test_start_index)
      throw std::invalid_argument("summarize: mismatched test ranges (" +
                                  approach_name(r.approach) + ")");
    std::vector<std::string> ls = r.link_order;
    std::sort(ls.begin(), ls.end());
    if (ls != sorted_links)
      throw std::invalid_argument("summarize: inconsistent link sets (" +
                                  approach_name(r.approach) + ")");
  }
  for (Approach a : all_approaches())
    if (by_approach.count(a)) rep.approaches.push_back(a);

  std::map<Approach, std::vector<double>> rmse_vec;
  for (const auto& link : rep.links) {
    for (Approach a : rep.approaches) {
      const LinkForecast& f = by_approach.at(a)->links.at(link);
      MetricRow row;
      row.link = link;
      row.approach = a;
      row.rmse = rmse(f.actual, f.predicted);
      MareResult mr = mare(f.actual, f.predicted);
      row.mare = mr.value;
      row.mare_excluded = mr.excluded;
      rmse_vec[a].push_back(row.rmse);
      rep.rows.push_back(std::move(row));
    }
  }
  for (Approach a : rep.approaches) {
    double sum = 0.0;
    for (double v : rmse_vec[a]) sum += v;
    rep.rmse_sums.push_back({a, sum});
  }
  if (rep.links.size() >= 2) {
    for (std::size_t i = 0; i < rep.approaches.size(); ++i) {
      for (std::size_t j = i + 1; j < rep.approaches.size(); ++j) {
        PairTTest t;
        t.a = rep.approaches[i];
        t.b = rep.approaches[j];
        t.test = paired_ttest(rmse_vec[t.a], rmse_vec[t.b]);
        rep.ttests.push_back(t);
      }
    }
  }
  if (by_approach.count(Approach::HIST_AVG)) {
    const auto& base = rmse_vec[Approach::HIST_AVG];
    for (Approach a : rep.approaches) {
      int wins = 0;
      for (std::size_t i = 0; i < base.size(); ++i)
        if (rmse_vec[a][i] < base[i]) ++wins;  // strictly better
      rep.wins_vs_baseline.push_back({a, wins});
    }
  }

  rep.metadata["ttest_basis"] = "per-link RMSE";
  rep.metadata["mare_zero_actual_policy"] = "excluded from the mean; counts reported";
  nlohmann::ordered_json runs;
  for (Approach a : rep.approaches) runs[approach_name(a)] = by_approach.at(a)->metadata;
  rep.metadata["runs"] = std::move(runs);
  return rep;
}

namespace detail {

inline void write_metric_table(const ComparisonReport& rep, bool mare_percent,
                               std::ostream& out) {
  out << "link";
  for (Approach a : rep.approaches) out << "," << approach_name(a);
  out << "\n";
  for (const auto& link : rep.links) {
    out << link;
    for (Approach a : rep.approaches) {
      const MetricRow& r = rep.row(link, a);
      out << "," << format_sig(mare_percent ? r.mare * 100.0 : r.rmse, 6);
    }
    out << "\n";
  }
}

}  // namespace detail

inline void write_mare_table_csv(const ComparisonReport& rep, std::ostream& out) {
  detail::write_metric_table(rep, true, out);
}

inline void write_rmse_table_csv(const ComparisonReport& rep, std::ostream& out) {
  detail::write_metric_table(rep, false, out);
}

inline void write_rmse_sums_csv(const ComparisonReport& rep, std::ostream& out) {
  out << "approach,rmse_sum\n";
  for (const auto& [a, v] : rep.rmse_sums)
    out << approach_name(a) << "," << format_sig(v, 6) << "\n";
}

inline void write_ttest_matrix_csv(const ComparisonReport& rep, std::ostream& out) {
  out << "approach";
  for (Approach a : rep.approaches) out << "," << approach_name(a);
  out << "\n";
  for (std::size_t i = 0; i < rep.approaches.size(); ++i) {
    out << approach_name(rep.approaches[i]);
    for (std::size_t j = 0; j < rep.approaches.size(); ++j) {
      out << ",";
      if (j <= i) continue;
      for (const auto& t : rep.ttests)
        if (t.a == rep.approaches[i] && t.b == rep.approaches[j]) out << format_sig(t.test.p, 6);
    }
    out << "\n";
  }
}

inline nlohmann::ordered_json report_to_json(const ComparisonReport& rep) {
  nlohmann::ordered_json j;
  j["test_start_index"] = rep.test_start_index;
  j["links"] = rep.links;
  nlohmann::ordered_json apps = nlohmann::ordered_json::array();
  for (Approach a : rep.approaches) apps.push_back(approach_name(a));
  j["approaches"] = std::move(apps);
  nlohmann::ordered_json rmse_t, mare_t, excl_t;
  for (const auto& link : rep.links) {
    nlohmann::ordered_json lr, lm, le;
    for (Approach a : rep.approaches) {
      const MetricRow& r = rep.row(link, a);
      lr[approach_name(a)] = round_sig(r.rmse, 6);
      lm[approach_name(a)] = round_sig(r.mare, 6);
      le[approach_name(a)] = r.mare_excluded;
    }
    rmse_t[link] = std::move(lr);
    mare_t[link] = std::move(lm);
    excl_t[link] = std::move(le);
  }
  j["rmse"] = std::move(rmse_t);
  j["mare"] = std::move(mare_t);
  j["mare_excluded"] = std::move(excl_t);
  nlohmann::ordered_json sums;
  for (const auto& [a, v] : rep.rmse_sums) sums[approach_name(a)] = round_sig(v, 6);
  j["rmse_sums"] = std::move(sums);
  nlohmann::ordered_json tt = nlohmann::ordered_json::array();
  for (const auto& t : rep.ttests) {
    nlohmann::ordered_json e;
    e["a"] = approach_name(t.a);
    e["b"] = approach_name(t.b);
    e["t"] = std::isfinite(t.test.t) ? round_sig(t.test.t, 6)
                                     : (t.test.t > 0 ? 1e308 : -1e308);
    e["df"] = t.test.df;
    e["p"] = round_sig(t.test.p, 6);
    if (t.test.zero_variance) e["zero_variance"] = true;
    if (t.test.all_zero) e["all_zero"] = true;
    tt.push_back(std::move(e));
  }
  j["ttests"] = std::move(tt);
  if (!rep.wins_vs_baseline.empty()) {
    nlohmann::ordered_json wins;
    for (const auto& [a, n] : rep.wins_vs_baseline) wins[approach_name(a)] = n;
    j["wins_vs_hist_avg"] = std::move(wins);
  }
  j["metadata"] = rep.metadata;
  return j;
}

// Writes mare_table.csv, rmse_table.csv, rmse_sums.csv, ttest_matrix.csv,
// and report.json into `dir`.
inline void write_report_files(const ComparisonReport& rep, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream out(fs::path(dir) / name);
    if (!out) throw std::runtime_error("cannot write report file: " + name);
    return out;
  };
  {
    auto out = open("mare_table.csv");
    write_mare_table_csv(rep, out);
  }
  {
    auto out = open("rmse_table.csv");
    write_rmse_table_csv(rep, out);
  }
  {
    auto out = open("rmse_sums.csv");
    write_rmse_sums_csv(rep, out);
  }
  {
    auto out = open("ttest_matrix.csv");
    write_ttest_matrix_csv(rep, out);
  }
  {
    auto out = open("report.json");
    out << report_to_json(rep).dump(2) << "\n";
  }
}

}  // namespace flowcast
