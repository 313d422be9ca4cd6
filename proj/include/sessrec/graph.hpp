#pragma once

// Per-user behavior graph over the items of one instance (history sessions
// plus the current prefix). Directed transitions are counted per adjacent
// pair inside each session, never across session boundaries, then
// row-normalized into outgoing and incoming adjacency matrices.

#include <cstdint>
#include <ostream>
#include <unordered_map>
#include <vector>

#include "sessrec/dataset.hpp"
#include "sessrec/errors.hpp"

namespace sessrec {

struct BehaviorGraph {
  std::vector<std::int32_t> nodes;  // item indices, order of first appearance
  std::unordered_map<std::int32_t, std::int32_t> node_of;
  std::int64_t n = 0;

  // n*n row-major. adj_out[i][j]: normalized count of i -> j transitions;
  // adj_in[i][j]: share of node i's incoming transitions arriving from j.
  // Nodes with no outgoing (incoming) transitions keep an all-zero row.
  std::vector<double> adj_out, adj_in;
  std::vector<double> counts;  // raw i -> j transition counts

  std::vector<std::vector<std::int32_t>> hist_node_seqs;  // per history session
  std::vector<std::int32_t> cur_node_seq;                 // current prefix

  double out(std::int64_t i, std::int64_t j) const { return adj_out[static_cast<std::size_t>(i * n + j)]; }
  double in(std::int64_t i, std::int64_t j) const { return adj_in[static_cast<std::size_t>(i * n + j)]; }
  double count(std::int64_t i, std::int64_t j) const { return counts[static_cast<std::size_t>(i * n + j)]; }

  // One line per edge with any weight: `i j w_out w_in` (node positions).
  void write_edge_list(std::ostream& os) const {
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        if (out(i, j) != 0.0 || in(i, j) != 0.0)
          os << i << ' ' << j << ' ' << out(i, j) << ' ' << in(i, j) << '\n';
  }
};

inline BehaviorGraph build_graph(const std::vector<Session>& history, const Session& current) {
  BehaviorGraph g;
  auto add_node = [&](std::int32_t item) {
    auto [it, inserted] = g.node_of.try_emplace(item, static_cast<std::int32_t>(g.nodes.size()));
    if (inserted) g.nodes.push_back(item);
    return it->second;
  };
  for (const auto& s : history) {
    std::vector<std::int32_t> seq;
    seq.reserve(s.size());
    for (auto item : s) seq.push_back(add_node(item));
    g.hist_node_seqs.push_back(std::move(seq));
  }
  for (auto item : current) g.cur_node_seq.push_back(add_node(item));

  g.n = static_cast<std::int64_t>(g.nodes.size());
  if (g.n == 0) throw ContractError("build_graph: no items in history or current prefix");

  g.counts.assign(static_cast<std::size_t>(g.n * g.n), 0.0);
  auto count_pairs = [&](const std::vector<std::int32_t>& seq) {
    for (std::size_t k = 0; k + 1 < seq.size(); ++k)
      g.counts[static_cast<std::size_t>(seq[k]) * static_cast<std::size_t>(g.n) +
               static_cast<std::size_t>(seq[k + 1])] += 1.0;
  };
  for (const auto& seq : g.hist_node_seqs) count_pairs(seq);
  count_pairs(g.cur_node_seq);

  g.adj_out.assign(g.counts.size(), 0.0);
  g.adj_in.assign(g.counts.size(), 0.0);
  for (std::int64_t i = 0; i < g.n; ++i) {
    double out_total = 0.0, in_total = 0.0;
    for (std::int64_t j = 0; j < g.n; ++j) {
      out_total += g.count(i, j);
      in_total += g.count(j, i);
    }
    for (std::int64_t j = 0; j < g.n; ++j) {
      if (out_total > 0.0)
        g.adj_out[static_cast<std::size_t>(i * g.n + j)] = g.count(i, j) / out_total;
      if (in_total > 0.0)
        g.adj_in[static_cast<std::size_t>(i * g.n + j)] = g.count(j, i) / in_total;
    }
  }
  return g;
}

inline BehaviorGraph build_graph(const TrainingInstance& inst) {
  return build_graph(inst.history, inst.prefix);
}

}  // namespace sessrec
