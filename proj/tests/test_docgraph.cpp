// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <sstream>

#include "cfer/docgraph.hpp"
#include "oracles.hpp"

using namespace cfer;

namespace {

/// "Alice founded Acme ." / "She left ." with Alice and She coreferent.
Document fixture() {
  Document d;
  d.doc_id = "fx";
  d.sentences = {{{"Alice", "founded", "Acme", "."}, {1, -1, 1, 1}}, {{"She", "left", "."}, {1, -1, 1}}};
  d.entities = {{0, {{0, 0, 1, "Alice"}, {1, 0, 1, "She"}}, "PER"}, {1, {{0, 2, 3, "Acme"}}, "ORG"}};
  return d;
}

std::set<oracle::LabeledEdge> edge_set(const DocGraph &g) {
  std::set<oracle::LabeledEdge> s;
  for (const Edge &e : g.edges) s.insert({e.u, e.v, static_cast<int>(e.kind)});
  return s;
}

} // namespace

TEST_CASE("fixture document has hand-counted edges") {
  DocGraph g = build_graph(fixture());
  REQUIRE(g.node_count == 7);
  REQUIRE(g.count(EdgeKind::SyntacticDependency) == 5); // 3 + 2 arcs
  REQUIRE(g.count(EdgeKind::AdjacentWord) == 6);
  REQUIRE(g.count(EdgeKind::SelfLoop) == 7);
  REQUIRE(g.count(EdgeKind::AdjacentSentence) == 1);
  REQUIRE(g.count(EdgeKind::CoreferentialMention) == 1);
  REQUIRE(g.has_edge(1, 5, EdgeKind::AdjacentSentence));
  REQUIRE(g.has_edge(4, 0, EdgeKind::CoreferentialMention));
  REQUIRE(g.has_edge(3, 4, EdgeKind::AdjacentWord));
  REQUIRE_FALSE(g.has_edge(3, 4, EdgeKind::SyntacticDependency));
  REQUIRE(g.sentence_roots == std::vector<int>{1, 5});
  REQUIRE(g.adjacency[0] == std::vector<int>{0, 1, 4});
}

TEST_CASE("edge set equals the rule-by-rule enumerator") {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    Document d = oracle::random_document(rng);
    REQUIRE(edge_set(build_graph(d)) == oracle::enumerate_edges(d));
  }
}

TEST_CASE("multiple roots warn and use the first") {
  Document d;
  d.sentences = {{{"a", "b", "c"}, {-1, -1, 0}}, {{"d"}, {-1}}};
  DocGraph g = build_graph(d);
  REQUIRE(g.warnings.size() == 1);
  REQUIRE(g.has_edge(0, 3, EdgeKind::AdjacentSentence));
}

TEST_CASE("path subgraph keeps dependency and sentence links only") {
  DocGraph g = build_graph(fixture());
  PathGraph p = path_subgraph(g);
  REQUIRE(p.adjacency[0] == std::vector<int>{1});
  REQUIRE(p.adjacency[1] == std::vector<int>{0, 2, 3, 5});
  REQUIRE(p.adjacency[4] == std::vector<int>{5});
}

TEST_CASE("fixture mention paths") {
  Document d = fixture();
  DocGraph g = build_graph(d);
  auto paths = mention_paths(d, g, 0, 1);
  REQUIRE(paths.size() == 2);
  REQUIRE(paths[0].nodes == std::vector<int>{0, 1, 2});
  REQUIRE(paths[1].nodes == std::vector<int>{4, 5, 1, 2});
  auto capped = mention_paths(d, g, 1, 0, 1);
  REQUIRE(capped.size() == 1);
  REQUIRE(capped[0].nodes == std::vector<int>{2, 1, 0});
  REQUIRE(sentence_distance(d, 0, 1) == 0);
  REQUIRE_THROWS_AS(mention_paths(d, g, 1, 1), ValidationError);
}

TEST_CASE("BFS distances equal Floyd-Warshall and paths are valid") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(29));
    PathGraph sub{oracle::random_graph(rng, n, rng.uniform(0.05, 0.3))};
    const auto dist = oracle::floyd_warshall(sub.adjacency);
    for (int s = 0; s < n; ++s)
      for (int t = 0; t < n; ++t) {
        if (dist[s][t] >= oracle::kInf) {
          REQUIRE_THROWS_AS(shortest_path(sub, s, t), NoPathError);
          continue;
        }
        Path p = shortest_path(sub, s, t);
        REQUIRE(static_cast<int>(p.length()) - 1 == dist[s][t]);
        REQUIRE(p.nodes.front() == s);
        REQUIRE(p.nodes.back() == t);
        std::set<int> seen(p.nodes.begin(), p.nodes.end());
        REQUIRE(seen.size() == p.nodes.size());
        for (std::size_t k = 0; k + 1 < p.nodes.size(); ++k) {
          const auto &nb = sub.adjacency[p.nodes[k]];
          REQUIRE(std::binary_search(nb.begin(), nb.end(), p.nodes[k + 1]));
        }
      }
  }
}

TEST_CASE("ties resolve to the lexicographically smallest shortest path") {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(9));
    PathGraph sub{oracle::random_graph(rng, n, 0.4)};
    for (int s = 0; s < n; ++s)
      for (int t = 0; t < n; ++t) {
        auto ref = oracle::smallest_shortest_path(sub.adjacency, s, t);
        if (!ref) continue;
        REQUIRE(shortest_path(sub, s, t).nodes == *ref);
      }
  }
}

TEST_CASE("path cap keeps the shortest paths in their original order") {
  // Entity 0 has three mentions, entity 1 one; path lengths differ.
  Document d;
  d.sentences = {{{"a", "b", "c", "d"}, {1, -1, 1, 2}}, {{"e", "f"}, {1, -1}}};
  d.entities = {{0, {{0, 3, 4, "d"}, {0, 0, 1, "a"}, {1, 0, 1, "e"}}, ""}, {1, {{0, 2, 3, "c"}}, ""}};
  DocGraph g = build_graph(d);
  auto all = mention_paths(d, g, 0, 1);
  REQUIRE(all.size() == 3);
  REQUIRE(all[0].length() == 2);
  REQUIRE(all[1].length() == 3);
  REQUIRE(all[2].length() == 4);
  auto two = mention_paths(d, g, 0, 1, 2);
  REQUIRE(two == std::vector<Path>{all[0], all[1]});
}

TEST_CASE("graph statistics") {
  SECTION("empty corpus reports zeros") {
    GraphStats st = graph_stats({});
    REQUIRE(st.documents == 0);
    for (auto c : st.edge_counts) REQUIRE(c == 0);
    REQUIRE(st.path_lengths.empty());
    std::ostringstream os;
    write_graph_stats(os, st);
    REQUIRE(os.str().find("edges\tSelfLoop\t0") != std::string::npos);
  }
  SECTION("fixture") {
    GraphStats st = graph_stats({fixture()});
    REQUIRE(st.edge_counts[static_cast<int>(EdgeKind::SyntacticDependency)] == 5);
    REQUIRE(st.path_lengths.at(0).at(3) == 1);
    REQUIRE(st.path_lengths.at(0).at(4) == 1);
    REQUIRE(st.unreachable == 0);
  }
}
