#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowcast/network.hpp"
#include "flowcast/util.hpp"

namespace flowcast {

constexpr int kSamplesPerDay = 96;  // 15-minute intervals

// Aligned per-link flow-rate series (vehicles/hour).
struct FlowSeries {
  int interval_minutes = 15;
  long start_index = 0;
  std::vector<std::string> link_order;
  std::map<std::string, std::vector<double>> values;

  std::size_t length() const {
    return link_order.empty() ? 0 : values.at(link_order.front()).size();
  }

  bool has(const std::string& link) const { return values.count(link) != 0; }

  const std::vector<double>& of(const std::string& link) const {
    auto it = values.find(link);
    if (it == values.end()) throw std::invalid_argument("no series for link: " + link);
    return it->second;
  }

  void add(const std::string& link, std::vector<double> series) {
    if (values.count(link)) throw std::invalid_argument("duplicate series for link: " + link);
    link_order.push_back(link);
    values.emplace(link, std::move(series));
  }
};

// CSV format: header `sample_index,link_id,flow`, one row per cell. Every
// link must cover the same contiguous index range; gaps, ragged lengths,
// duplicates, and negative flows are errors.
inline FlowSeries parse_flows(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("flows: empty file");
  if (trim(line) != "sample_index,link_id,flow")
    throw std::runtime_error("flows: expected header 'sample_index,link_id,flow'");
  std::map<std::string, std::vector<std::pair<long, double>>> rows;
  std::vector<std::string> order;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty()) continue;
    auto cells = split_on(s, ',');
    if (cells.size() != 3)
      throw std::runtime_error("flows line " + std::to_string(lineno) + ": expected 3 fields");
    long idx;
    double flow;
    try {
      idx = std::stol(cells[0]);
      flow = std::stod(cells[2]);
    } catch (const std::exception&) {
      throw std::runtime_error("flows line " + std::to_string(lineno) + ": parse failure");
    }
    if (!std::isfinite(flow))
      throw std::runtime_error("flows line " + std::to_string(lineno) + ": non-finite flow");
    if (flow < 0.0)
      throw std::runtime_error("flows line " + std::to_string(lineno) + ": negative flow");
    std::string link = trim(cells[1]);
    if (link.empty())
      throw std::runtime_error("flows line " + std::to_string(lineno) + ": empty link id");
    if (!rows.count(link)) order.push_back(link);
    rows[link].push_back({idx, flow});
  }
  if (rows.empty()) throw std::runtime_error("flows: no data rows");

  FlowSeries out;
  std::size_t len = rows.begin()->second.size();
  long start = 0;
  bool first = true;
  for (auto& [link, cells] : rows) {
    if (cells.size() != len) throw std::runtime_error("flows: ragged series (link " + link + ")");
    std::sort(cells.begin(), cells.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    long s0 = cells.front().first;
    if (first) {
      start = s0;
      first = false;
    } else if (s0 != start) {
      throw std::runtime_error("flows: misaligned start index (link " + link + ")");
    }
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (cells[i].first != s0 + static_cast<long>(i))
        throw std::runtime_error("flows: missing or duplicate sample (link " + link +
                                 ", index " + std::to_string(s0 + static_cast<long>(i)) + ")");
  }
  out.start_index = start;
  for (const auto& link : order) {
    std::vector<double> v;
    v.reserve(len);
    for (const auto& [idx, flow] : rows[link]) v.push_back(flow);
    out.add(link, std::move(v));
  }
  return out;
}

inline FlowSeries load_flows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open flows file: " + path);
  return parse_flows(in);
}

inline void write_flows(const FlowSeries& series, std::ostream& out) {
  out << "sample_index,link_id,flow\n";
  char buf[64];
  for (const auto& link : series.link_order) {
    const auto& v = series.of(link);
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.10g", v[i]);
      out << (series.start_index + static_cast<long>(i)) << "," << link << "," << buf << "\n";
    }
  }
}

inline void save_flows(const FlowSeries& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write flows file: " + path);
  write_flows(series, out);
}

struct SyntheticConfig {
  int days = 25;
  std::uint64_t seed = 42;
  double coupling = 0.4;    // weight on mean upstream flow at lag 1, in [0,1]
  double noise_std = 40.0;  // stationary noise s.d. (vehicles/hour)
  double noise_ar = 0.8;    // AR(1) persistence of the noise, in [0,1)
  double base_mean = 500.0; // center of the daily base profiles
};

namespace detail {

struct BaseProfile {
  double mean, amp1, amp2, phase1, phase2;

  double at(int slot) const {
    double theta = 2.0 * std::numbers::pi * slot / kSamplesPerDay;
    double v = mean + amp1 * std::sin(theta - phase1) + amp2 * std::sin(2.0 * theta - phase2);
    return std::max(v, 0.0);
  }
};

inline BaseProfile make_profile(const LinkId& link, const SyntheticConfig& cfg) {
  // Junction-level phase so adjacent links share their daily shape.
  std::mt19937_64 jrng(cfg.seed ^ fnv1a64("junction/" + link.junction));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double jphase = u01(jrng) * 2.0 * std::numbers::pi;
  std::mt19937_64 rng(cfg.seed ^ fnv1a64("base/" + link.name()));
  BaseProfile p;
  p.mean = cfg.base_mean * (0.8 + 0.4 * u01(rng));
  p.amp1 = p.mean * (0.35 + 0.2 * u01(rng));
  p.amp2 = p.mean * (0.15 + 0.15 * u01(rng));
  p.phase1 = jphase + 0.4 * (u01(rng) - 0.5);
  p.phase2 = 2.0 * jphase + 0.6 * (u01(rng) - 0.5);
  return p;
}

}  // namespace detail

// Synthetic corpus: per link, a daily two-harmonic base profile plus
// `coupling` times the mean of its upstream links' flows at lag 1 plus
// AR(1) Gaussian noise, clipped at zero. Fully determined by the seed.
inline FlowSeries generate_synthetic(const RoadNetwork& net, const SyntheticConfig& cfg) {
  if (net.links.empty()) throw std::invalid_argument("generate_synthetic: empty network");
  if (cfg.days < 1) throw std::invalid_argument("generate_synthetic: days must be >= 1");
  if (cfg.coupling < 0.0 || cfg.coupling > 1.0)
    throw std::invalid_argument("generate_synthetic: coupling outside [0,1]");
  if (cfg.noise_std < 0.0) throw std::invalid_argument("generate_synthetic: negative noise_std");
  if (cfg.noise_ar < 0.0 || cfg.noise_ar >= 1.0)
    throw std::invalid_argument("generate_synthetic: noise_ar outside [0,1)");

  const std::size_t n_links = net.links.size();
  const std::size_t len = static_cast<std::size_t>(cfg.days) * kSamplesPerDay;

  std::vector<detail::BaseProfile> profiles;
  profiles.reserve(n_links);
  for (const auto& l : net.links) profiles.push_back(detail::make_profile(l, cfg));

  // Pre-generate per-link AR(1) noise from link-keyed streams so the result
  // does not depend on the order links are visited.
  std::vector<std::vector<double>> noise(n_links);
  for (std::size_t li = 0; li < n_links; ++li) {
    std::mt19937_64 rng(cfg.seed ^ fnv1a64("noise/" + net.links[li].name()));
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto& e = noise[li];
    e.resize(len);
    if (len == 0) continue;
    double innov_std = cfg.noise_std * std::sqrt(1.0 - cfg.noise_ar * cfg.noise_ar);
    e[0] = cfg.noise_std * gauss(rng);
    for (std::size_t t = 1; t < len; ++t)
      e[t] = cfg.noise_ar * e[t - 1] + innov_std * gauss(rng);
  }

  std::vector<std::vector<std::size_t>> upstream(n_links);
  std::map<std::string, std::size_t> index;
  for (std::size_t li = 0; li < n_links; ++li) index[net.links[li].name()] = li;
  for (const auto& [from, dsts] : net.downstream)
    for (const auto& d : dsts) upstream[index.at(d)].push_back(index.at(from));

  std::vector<std::vector<double>> flows(n_links, std::vector<double>(len, 0.0));
  for (std::size_t t = 0; t < len; ++t) {
    int slot = static_cast<int>(t % kSamplesPerDay);
    for (std::size_t li = 0; li < n_links; ++li) {
      double v = profiles[li].at(slot);
      if (cfg.coupling > 0.0 && !upstream[li].empty()) {
        double up = 0.0;
        for (std::size_t ui : upstream[li]) {
          // seed the recursion at t=0 with the upstream base value
          up += (t == 0) ? profiles[ui].at(kSamplesPerDay - 1) : flows[ui][t - 1];
        }
        v += cfg.coupling * up / static_cast<double>(upstream[li].size());
      }
      v += noise[li][t];
      flows[li][t] = std::max(v, 0.0);
    }
  }

  FlowSeries out;
  for (std::size_t li = 0; li < n_links; ++li) out.add(net.links[li].name(), std::move(flows[li]));
  return out;
}

inline FlowSeries generate_synthetic(const RoadNetwork& net, int days, std::uint64_t seed,
                                     double coupling, double noise_std) {
  SyntheticConfig cfg;
  cfg.days = days;
  cfg.seed = seed;
  cfg.coupling = coupling;
  cfg.noise_std = noise_std;
  return generate_synthetic(net, cfg);
}

struct CorrelationEntry {
  std::string junction;
  std::string link_a;
  std::string link_b;
  double r = 0.0;
  bool defined = true;  // false when either series has zero variance
};

// Pearson correlation for every unordered pair of links sharing a junction.
inline std::vector<CorrelationEntry> adjacent_correlations(const FlowSeries& series,
                                                           const RoadNetwork& net) {
  if (series.length() < 2) throw std::invalid_argument("adjacent_correlations: series too short");
  std::vector<CorrelationEntry> out;
  for (const auto& j : net.junctions) {
    const auto& mem = net.links_of(j);
    for (std::size_t a = 0; a < mem.size(); ++a) {
      for (std::size_t b = a + 1; b < mem.size(); ++b) {
        const auto& x = series.of(mem[a].name());
        const auto& y = series.of(mem[b].name());
        std::size_t n = x.size();
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          mx += x[i];
          my += y[i];
        }
        mx /= n;
        my /= n;
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sxy += (x[i] - mx) * (y[i] - my);
          sxx += (x[i] - mx) * (x[i] - mx);
          syy += (y[i] - my) * (y[i] - my);
        }
        CorrelationEntry e{j, mem[a].name(), mem[b].name(), 0.0, true};
        if (sxx == 0.0 || syy == 0.0) {
          e.defined = false;
          e.r = std::numeric_limits<double>::quiet_NaN();
        } else {
          e.r = sxy / std::sqrt(sxx * syy);
          e.r = std::clamp(e.r, -1.0, 1.0);
        }
        out.push_back(e);
      }
    }
  }
  return out;
}

}  // namespace flowcast
