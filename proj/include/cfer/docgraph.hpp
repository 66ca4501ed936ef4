// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdlib>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cfer/corpus.hpp"
#include "cfer/error.hpp"

namespace cfer {

enum class EdgeKind : int {
  SyntacticDependency = 0,
  AdjacentWord = 1,
  SelfLoop = 2,
  AdjacentSentence = 3,
  CoreferentialMention = 4,
};

inline constexpr std::size_t kEdgeKindCount = 5;

inline constexpr std::array<EdgeKind, kEdgeKindCount> kAllEdgeKinds{
    EdgeKind::SyntacticDependency, EdgeKind::AdjacentWord, EdgeKind::SelfLoop, EdgeKind::AdjacentSentence,
    EdgeKind::CoreferentialMention};

inline const char *edge_kind_name(EdgeKind k) {
  switch (k) {
  case EdgeKind::SyntacticDependency: return "SyntacticDependency";
  case EdgeKind::AdjacentWord: return "AdjacentWord";
  case EdgeKind::SelfLoop: return "SelfLoop";
  case EdgeKind::AdjacentSentence: return "AdjacentSentence";
  case EdgeKind::CoreferentialMention: return "CoreferentialMention";
  }
  return "?";
}

/// Undirected labeled edge, stored with u <= v.
struct Edge {
  int u = 0;
  int v = 0;
  EdgeKind kind = EdgeKind::SelfLoop;

  static Edge make(int a, int b, EdgeKind k) { return a <= b ? Edge{a, b, k} : Edge{b, a, k}; }

  auto operator<=>(const Edge &) const = default;
};

/// Word-level document graph. Nodes are flat token indices in document order.
struct DocGraph {
  int node_count = 0;
  std::vector<Edge> edges;                    // sorted, no duplicate (u, v, kind)
  std::vector<std::vector<int>> adjacency;    // union over kinds, sorted, self included
  std::vector<int> sentence_roots;            // flat id of each sentence's first root
  std::map<std::pair<int, int>, int> mention_anchor; // (entity, mention) -> first word
  std::vector<int> sentence_offsets;
  std::vector<std::string> warnings;

  bool has_edge(int a, int b, EdgeKind k) const {
    return std::binary_search(edges.begin(), edges.end(), Edge::make(a, b, k));
  }

  std::size_t count(EdgeKind k) const {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [k](const Edge &e) { return e.kind == k; }));
  }
};

/// Flat id of a mention's first word.
inline int mention_anchor(const std::vector<int> &sentence_offsets, const Mention &m) {
  return sentence_offsets[m.sent_id] + m.span_start;
}

/// Builds the five edge categories over a validated document:
/// dependency arcs within each sentence, document-linear adjacent words
/// (crossing sentence boundaries), one self-loop per word, root-to-root links
/// between consecutive sentences, and links between the first words of every
/// two mentions of the same entity.
inline DocGraph build_graph(const Document &doc) {
  DocGraph g;
  g.sentence_offsets = doc.sentence_offsets();
  g.node_count = static_cast<int>(doc.token_count());
  std::vector<Edge> edges;

  for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
    const Sentence &sent = doc.sentences[s];
    const int off = g.sentence_offsets[s];
    std::optional<int> root;
    int roots = 0;
    for (std::size_t j = 0; j < sent.dep_heads.size(); ++j) {
      const int h = sent.dep_heads[j];
      if (h < 0) {
        ++roots;
        if (!root) root = off + static_cast<int>(j);
      } else {
        edges.push_back(Edge::make(off + static_cast<int>(j), off + h, EdgeKind::SyntacticDependency));
      }
    }
    if (roots > 1)
      g.warnings.push_back("sentence " + std::to_string(s) + " has " + std::to_string(roots) +
                           " roots; using the first as sentence root");
    g.sentence_roots.push_back(root.value_or(off));
  }
  for (int t = 0; t + 1 < g.node_count; ++t) edges.push_back(Edge::make(t, t + 1, EdgeKind::AdjacentWord));
  for (int t = 0; t < g.node_count; ++t) edges.push_back(Edge::make(t, t, EdgeKind::SelfLoop));
  for (std::size_t s = 0; s + 1 < g.sentence_roots.size(); ++s)
    edges.push_back(Edge::make(g.sentence_roots[s], g.sentence_roots[s + 1], EdgeKind::AdjacentSentence));

  for (std::size_t e = 0; e < doc.entities.size(); ++e) {
    const auto &ms = doc.entities[e].mentions;
    for (std::size_t m = 0; m < ms.size(); ++m)
      g.mention_anchor[{static_cast<int>(e), static_cast<int>(m)}] = mention_anchor(g.sentence_offsets, ms[m]);
    for (std::size_t a = 0; a < ms.size(); ++a)
      for (std::size_t b = a + 1; b < ms.size(); ++b)
        edges.push_back(Edge::make(g.mention_anchor[{static_cast<int>(e), static_cast<int>(a)}],
                                   g.mention_anchor[{static_cast<int>(e), static_cast<int>(b)}],
                                   EdgeKind::CoreferentialMention));
  }

  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  g.edges = std::move(edges);

  g.adjacency.assign(g.node_count, {});
  for (const Edge &e : g.edges) {
    g.adjacency[e.u].push_back(e.v);
    if (e.u != e.v) g.adjacency[e.v].push_back(e.u);
  }
  for (auto &nb : g.adjacency) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  return g;
}

/// Adjacency restricted to the edges used for path extraction.
struct PathGraph {
  std::vector<std::vector<int>> adjacency;
};

/// Keeps only syntactic-dependency and adjacent-sentence edges.
inline PathGraph path_subgraph(const DocGraph &g) {
  PathGraph p;
  p.adjacency.assign(g.node_count, {});
  for (const Edge &e : g.edges) {
    if (e.kind != EdgeKind::SyntacticDependency && e.kind != EdgeKind::AdjacentSentence) continue;
    if (e.u == e.v) continue;
    p.adjacency[e.u].push_back(e.v);
    p.adjacency[e.v].push_back(e.u);
  }
  for (auto &nb : p.adjacency) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  return p;
}

struct Path {
  std::vector<int> nodes;

  std::size_t length() const { return nodes.size(); }
  bool operator==(const Path &) const = default;
};

/// Minimum-hop path by breadth-first search. Neighbors are expanded in
/// ascending id and the first discovered parent is kept, which yields the
/// lexicographically smallest of the shortest paths.
inline Path shortest_path(const PathGraph &sub, int src, int dst) {
  const int n = static_cast<int>(sub.adjacency.size());
  if (src < 0 || src >= n || dst < 0 || dst >= n)
    throw NoPathError("shortest_path: node out of range (" + std::to_string(src) + " -> " + std::to_string(dst) + ")");
  if (src == dst) return Path{{src}};
  std::vector<int> parent(n, -1);
  std::vector<char> seen(n, 0);
  std::deque<int> queue{src};
  seen[src] = 1;
  while (!queue.empty() && !seen[dst]) {
    const int cur = queue.front();
    queue.pop_front();
    for (int nb : sub.adjacency[cur]) {
      if (seen[nb]) continue;
      seen[nb] = 1;
      parent[nb] = cur;
      queue.push_back(nb);
    }
  }
  if (!seen[dst])
    throw NoPathError("no path between nodes " + std::to_string(src) + " and " + std::to_string(dst) +
                      " in the dependency/adjacent-sentence subgraph (malformed dependency input?)");
  Path p;
  for (int cur = dst; cur != -1; cur = parent[cur]) p.nodes.push_back(cur);
  std::reverse(p.nodes.begin(), p.nodes.end());
  return p;
}

/// Shortest paths between every mention anchor of e1 and every mention anchor
/// of e2, in (head mention, tail mention) order. With a cap, the `cap`
/// shortest paths are kept (ties by that order), still listed in that order.
inline std::vector<Path> mention_paths(const Document &doc, const DocGraph &graph, const PathGraph &sub, int e1, int e2,
                                       std::optional<std::size_t> cap = std::nullopt) {
  if (e1 == e2) throw ValidationError("mention_paths: head and tail must differ");
  std::vector<Path> paths;
  const auto &m1 = doc.entities.at(e1).mentions;
  const auto &m2 = doc.entities.at(e2).mentions;
  for (std::size_t a = 0; a < m1.size(); ++a)
    for (std::size_t b = 0; b < m2.size(); ++b)
      paths.push_back(shortest_path(sub, graph.mention_anchor.at({e1, static_cast<int>(a)}),
                                    graph.mention_anchor.at({e2, static_cast<int>(b)})));
  if (cap && paths.size() > *cap) {
    std::vector<std::size_t> order(paths.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return paths[x].length() < paths[y].length(); });
    order.resize(*cap);
    std::sort(order.begin(), order.end());
    std::vector<Path> kept;
    for (std::size_t i : order) kept.push_back(std::move(paths[i]));
    paths = std::move(kept);
  }
  return paths;
}

inline std::vector<Path> mention_paths(const Document &doc, const DocGraph &graph, int e1, int e2,
                                       std::optional<std::size_t> cap = std::nullopt) {
  return mention_paths(doc, graph, path_subgraph(graph), e1, e2, cap);
}

/// Minimum |sentence id difference| over all mention pairs of two entities.
inline int sentence_distance(const Document &doc, int e1, int e2) {
  int best = std::numeric_limits<int>::max();
  for (const auto &a : doc.entities.at(e1).mentions)
    for (const auto &b : doc.entities.at(e2).mentions) best = std::min(best, std::abs(a.sent_id - b.sent_id));
  return best;
}

struct GraphStats {
  std::array<long long, kEdgeKindCount> edge_counts{};
  std::map<int, std::map<std::size_t, long long>> path_lengths; // distance -> path length -> count
  long long unreachable = 0;
  std::size_t documents = 0;

  bool operator==(const GraphStats &) const = default;
};

/// Aggregates edge counts per kind and, for every unordered entity pair, the
/// lengths of its mention paths keyed by the pair's sentence distance.
inline GraphStats graph_stats(const std::vector<Document> &docs) {
  GraphStats st;
  for (const auto &doc : docs) {
    ++st.documents;
    const DocGraph g = build_graph(doc);
    for (const Edge &e : g.edges) ++st.edge_counts[static_cast<std::size_t>(e.kind)];
    const PathGraph sub = path_subgraph(g);
    const int p = static_cast<int>(doc.entities.size());
    for (int i = 0; i < p; ++i)
      for (int j = i + 1; j < p; ++j) {
        const int dist = sentence_distance(doc, i, j);
        for (std::size_t a = 0; a < doc.entities[i].mentions.size(); ++a)
          for (std::size_t b = 0; b < doc.entities[j].mentions.size(); ++b) {
            try {
              Path path = shortest_path(sub, g.mention_anchor.at({i, static_cast<int>(a)}),
                                        g.mention_anchor.at({j, static_cast<int>(b)}));
              ++st.path_lengths[dist][path.length()];
            } catch (const NoPathError &) {
              ++st.unreachable;
            }
          }
      }
  }
  return st;
}

/// Tab-separated rendering of a GraphStats report.
inline void write_graph_stats(std::ostream &os, const GraphStats &st) {
  os << "section\tkey\tvalue\n";
  os << "documents\tall\t" << st.documents << '\n';
  for (EdgeKind k : kAllEdgeKinds)
    os << "edges\t" << edge_kind_name(k) << '\t' << st.edge_counts[static_cast<std::size_t>(k)] << '\n';
  for (const auto &[dist, hist] : st.path_lengths)
    for (const auto &[len, count] : hist)
      os << "path_length\tdistance=" << dist << ",length=" << len << '\t' << count << '\n';
  os << "unreachable\tmention_pairs\t" << st.unreachable << '\n';
}

} // namespace cfer
