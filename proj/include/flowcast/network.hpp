#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowcast/util.hpp"

namespace flowcast {

// A directed road segment, named by junction label plus a slot letter
// ("Ba" = junction B, link a).
struct LinkId {
  std::string junction;
  std::string slot;

  std::string name() const { return junction + slot; }
  bool operator==(const LinkId& o) const { return junction == o.junction && slot == o.slot; }
  bool operator<(const LinkId& o) const {
    return junction != o.junction ? junction < o.junction : slot < o.slot;
  }
};

struct RoadNetwork {
  std::vector<std::string> junctions;                        // insertion order
  std::vector<LinkId> links;                                 // global link order
  std::map<std::string, std::vector<LinkId>> membership;     // junction -> its links
  std::map<std::string, std::vector<std::string>> downstream;  // link name -> link names

  bool has_link(const std::string& name) const {
    return std::any_of(links.begin(), links.end(),
                       [&](const LinkId& l) { return l.name() == name; });
  }

  const LinkId& link(const std::string& name) const {
    for (const auto& l : links)
      if (l.name() == name) return l;
    throw std::invalid_argument("unknown link: " + name);
  }

  const std::vector<LinkId>& links_of(const std::string& junction) const {
    auto it = membership.find(junction);
    if (it == membership.end()) throw std::invalid_argument("unknown junction: " + junction);
    return it->second;
  }

  // Inverse of the downstream map: links feeding into `name`.
  std::vector<std::string> upstream_of(const std::string& name) const {
    std::vector<std::string> up;
    for (const auto& [src, dsts] : downstream)
      for (const auto& d : dsts)
        if (d == name) up.push_back(src);
    return up;
  }

  void add_junction(const std::string& junction, const std::vector<std::string>& slot_names) {
    if (slot_names.empty()) throw std::invalid_argument("junction with no links: " + junction);
    if (membership.count(junction)) throw std::invalid_argument("duplicate junction: " + junction);
    junctions.push_back(junction);
    auto& mem = membership[junction];
    for (const auto& s : slot_names) {
      LinkId id{junction, s};
      if (has_link(id.name())) throw std::invalid_argument("duplicate link: " + id.name());
      links.push_back(id);
      mem.push_back(id);
    }
  }

  void add_downstream(const std::string& from, const std::vector<std::string>& to) {
    if (!has_link(from)) throw std::invalid_argument("downstream from unknown link: " + from);
    for (const auto& t : to)
      if (!has_link(t)) throw std::invalid_argument("downstream to unknown link: " + t);
    auto& d = downstream[from];
    d.insert(d.end(), to.begin(), to.end());
  }
};

// Topology text format: one line per junction `J: a b c` (slots named
// relative to the junction, or full link names), then optional downstream
// edges `Ba -> Eb Fe`. '#' starts a comment.
inline RoadNetwork parse_topology(std::istream& in) {
  RoadNetwork net;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s == "->") continue;
    auto arrow = s.find("->");
    if (arrow != std::string::npos) {
      std::string from = trim(s.substr(0, arrow));
      auto to = split_ws(s.substr(arrow + 2));
      if (from.empty() || to.empty())
        throw std::runtime_error("topology line " + std::to_string(lineno) + ": bad edge");
      net.add_downstream(from, to);
      continue;
    }
    auto colon = s.find(':');
    if (colon == std::string::npos)
      throw std::runtime_error("topology line " + std::to_string(lineno) + ": expected ':'");
    std::string junction = trim(s.substr(0, colon));
    auto names = split_ws(s.substr(colon + 1));
    if (junction.empty() || names.empty())
      throw std::runtime_error("topology line " + std::to_string(lineno) + ": bad junction");
    // accept either bare slots ("a b c") or full names ("Ba Bb Bc")
    std::vector<std::string> slots;
    for (auto& n : names) {
      if (n.rfind(junction, 0) == 0 && n.size() > junction.size())
        slots.push_back(n.substr(junction.size()));
      else
        slots.push_back(n);
    }
    net.add_junction(junction, slots);
  }
  return net;
}

inline RoadNetwork load_topology(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open topology file: " + path);
  return parse_topology(in);
}

inline void write_topology(const RoadNetwork& net, std::ostream& out) {
  for (const auto& j : net.junctions) {
    out << j << ":";
    for (const auto& l : net.links_of(j)) out << " " << l.name();
    out << "\n";
  }
  if (!net.downstream.empty()) {
    out << "->\n";
    for (const auto& [from, to] : net.downstream) {
      out << from << " ->";
      for (const auto& t : to) out << " " << t;
      out << "\n";
    }
  }
}

inline void save_topology(const RoadNetwork& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write topology file: " + path);
  write_topology(net, out);
}

namespace detail {

// Each link feeds the next link of its own junction; the first link of
// each junction also feeds the first link of the next junction, and the
// second feeds backwards across junctions, so generated data carries both
// adjacent-link and network-wide dependencies.
inline void wire_ring_downstream(RoadNetwork& net) {
  const auto& js = net.junctions;
  for (std::size_t ji = 0; ji < js.size(); ++ji) {
    const auto& mem = net.links_of(js[ji]);
    for (std::size_t k = 0; k < mem.size(); ++k) {
      std::vector<std::string> to;
      if (mem.size() > 1) to.push_back(mem[(k + 1) % mem.size()].name());
      if (k == 0 && js.size() > 1) {
        const auto& next_mem = net.links_of(js[(ji + 1) % js.size()]);
        to.push_back(next_mem[0].name());
      }
      if (k == 1 && js.size() > 1) {
        const auto& prev_mem = net.links_of(js[(ji + js.size() - 1) % js.size()]);
        to.push_back(prev_mem[prev_mem.size() - 1].name());
      }
      if (!to.empty()) net.add_downstream(mem[k].name(), to);
    }
  }
}

}  // namespace detail

// Default demo network: 10 junctions, 31 links.
inline RoadNetwork make_default_network() {
  RoadNetwork net;
  net.add_junction("B", {"a", "b", "c"});
  net.add_junction("C", {"e", "f", "g", "h"});
  net.add_junction("D", {"a", "b", "c", "d"});
  net.add_junction("E", {"b", "d"});
  net.add_junction("F", {"e", "f", "g", "h"});
  net.add_junction("G", {"b", "d"});
  net.add_junction("H", {"i", "k", "l"});
  net.add_junction("I", {"a", "b", "d"});
  net.add_junction("J", {"h", "f"});
  net.add_junction("K", {"a", "b", "c", "d"});
  detail::wire_ring_downstream(net);
  return net;
}

// Network from a links-per-junction profile: junctions A, B, C, ... with
// slots a, b, c, ... and the same ring wiring as the default network.
inline RoadNetwork make_network_from_profile(const std::vector<int>& links_per_junction) {
  if (links_per_junction.empty())
    throw std::invalid_argument("make_network_from_profile: empty profile");
  RoadNetwork net;
  for (std::size_t j = 0; j < links_per_junction.size(); ++j) {
    if (links_per_junction[j] < 1)
      throw std::invalid_argument("make_network_from_profile: junction needs >= 1 link");
    std::string jname;
    std::size_t v = j;
    do {
      jname.insert(jname.begin(), static_cast<char>('A' + v % 26));
      v /= 26;
    } while (v > 0);
    std::vector<std::string> slots;
    for (int k = 0; k < links_per_junction[j]; ++k)
      slots.push_back(std::string(1, static_cast<char>('a' + k % 26)) +
                      (k >= 26 ? std::to_string(k / 26) : ""));
    net.add_junction(jname, slots);
  }
  detail::wire_ring_downstream(net);
  return net;
}

}  // namespace flowcast
