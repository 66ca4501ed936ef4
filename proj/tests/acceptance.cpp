// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cfer/model_check.hpp"
#include "cfer/optim.hpp"
#include "cfer/pipeline.hpp"
#include "cfer/synthetic.hpp"
#include "oracles.hpp"

using namespace cfer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char *f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

// 1 ---------------------------------------------------------------------------
Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const nd::GradReport r = model_gradcheck(1);
  const double secs = seconds_since(t0);
  const std::vector<std::string> required{"embedding",       "text_gru.fwd.w_x", "text_gru.bwd.w_h", "dcgcn.0.sub1.w",
                                          "dcgcn.1.sub2.w",  "dcgcn.1.out.w",    "path_gru.fwd.w_x", "path_gru.bwd.w_h",
                                          "attention.w",     "bilinear.w"};
  for (const auto &name : required)
    if (!r.max_rel_error.count(name)) return {false, "parameter " + name + " not covered"};
  return {r.passes(1e-4) && secs < 60.0, "max rel error " + fmt("%.3e", r.global_max) + " over " +
                                             std::to_string(r.coordinates) + " coordinates, " + fmt("%.1f s", secs)};
}

// 2 ---------------------------------------------------------------------------
Outcome graph_rules() {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const Document d = oracle::random_document(rng);
    std::set<oracle::LabeledEdge> got;
    for (const Edge &e : build_graph(d).edges) got.insert({e.u, e.v, static_cast<int>(e.kind)});
    if (got != oracle::enumerate_edges(d)) return {false, "edge set mismatch on document " + std::to_string(i)};
  }
  return {true, "200 documents"};
}

// 3 ---------------------------------------------------------------------------
Outcome shortest_paths() {
  Rng rng(3);
  std::size_t pairs = 0;
  for (int g = 0; g < 100; ++g) {
    const int n = 2 + static_cast<int>(rng.below(29));
    const PathGraph sub{oracle::random_graph(rng, n, rng.uniform(0.05, 0.3))};
    const auto dist = oracle::floyd_warshall(sub.adjacency);
    for (int s = 0; s < n; ++s)
      for (int t = 0; t < n; ++t) {
        ++pairs;
        if (dist[s][t] >= oracle::kInf) {
          try {
            shortest_path(sub, s, t);
            return {false, "path found between disconnected nodes"};
          } catch (const NoPathError &) {
            continue;
          }
        }
        const Path p = shortest_path(sub, s, t);
        if (static_cast<int>(p.length()) != dist[s][t] + 1) return {false, "length mismatch in graph " + std::to_string(g)};
        if (p.nodes.front() != s || p.nodes.back() != t) return {false, "wrong endpoints"};
        std::set<int> seen(p.nodes.begin(), p.nodes.end());
        if (seen.size() != p.nodes.size()) return {false, "repeated node"};
        for (std::size_t i = 0; i + 1 < p.nodes.size(); ++i) {
          const auto &nb = sub.adjacency[p.nodes[i]];
          if (!std::binary_search(nb.begin(), nb.end(), p.nodes[i + 1])) return {false, "non-adjacent step"};
        }
      }
  }
  return {true, "100 graphs, " + std::to_string(pairs) + " node pairs"};
}

// 4 ---------------------------------------------------------------------------
Outcome shape_identities() {
  CferConfig c;
  c.d_h = 300;
  c.sublayers = 4;
  if (c.sublayer_input_width(3) != 450 || c.sublayer_width() != 75) return {false, "d_h=300, m_k=4, l=3"};
  Rng rng(4);
  for (auto [dh, m] : std::vector<std::pair<std::size_t, std::size_t>>{{8, 2}, {12, 3}, {16, 4}, {30, 5}, {6, 1}}) {
    const std::size_t w = dh / m;
    nd::Tape tape;
    BlockVars bv;
    for (std::size_t l = 1; l <= m; ++l) {
      nd::Tensor wt({w, dh + (l - 1) * w});
      for (double &x : wt.values()) x = rng.uniform(-0.5, 0.5);
      bv.sublayers.push_back({tape.leaf(wt), tape.leaf(nd::Tensor({w}))});
    }
    bv.out_w = tape.leaf(nd::Tensor({dh, dh}, 0.1));
    bv.out_b = tape.leaf(nd::Tensor({dh}));
    nd::Tensor x({3, dh});
    for (double &v : x.values()) v = rng.uniform(-1, 1);
    ForwardContext ctx;
    const nd::Var o = dcgcn_block(tape.leaf(x), {{0, 1}, {0, 1, 2}, {1, 2}}, bv, 0.0, ctx);
    if (o.shape() != nd::Shape{3, dh}) return {false, "block output shape for d_h=" + std::to_string(dh)};
  }
  return {true, "450/75 at l=3; residual well-formed for 5 (d_h, m_k) pairs"};
}

// 5 ---------------------------------------------------------------------------
const std::vector<std::string> kLabels{"r0", "r1", "r2", "r3"};

std::vector<oracle::Fact> random_facts(Rng &rng, const std::vector<Document> &docs, std::size_t n) {
  std::vector<oracle::Fact> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Document &d = docs[rng.below(docs.size())];
    if (d.entities.size() < 2) continue;
    const int h = static_cast<int>(rng.below(d.entities.size()));
    int t = static_cast<int>(rng.below(d.entities.size() - 1));
    if (t >= h) ++t;
    out.push_back({d.doc_id, h, static_cast<int>(rng.below(kLabels.size())), t});
  }
  return out;
}

FactSet to_set(const std::vector<oracle::Fact> &v) {
  FactSet s;
  for (const auto &f : v) s.insert({f.doc, f.head, f.rel, f.tail});
  return s;
}

bool same(const PRF &a, const oracle::Counts &b) {
  return a.precision == b.precision && a.recall == b.recall && a.f1 == b.f1;
}

Outcome metric_oracles() {
  Rng rng(5);
  const RelationVocab rel(kLabels);
  const std::vector<std::size_t> bounds{1, 3, 6};
  const oracle::RandomDocSpec spec{12, 4, 5, 3};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Document> docs, train;
    for (std::size_t i = 0, n = 1 + rng.below(3); i < n; ++i)
      docs.push_back(oracle::random_document(rng, spec, "d" + std::to_string(i)));
    const auto gold_v = random_facts(rng, docs, rng.below(12));
    for (const auto &f : gold_v) docs[std::stoi(f.doc.substr(1))].facts.push_back({f.head, f.tail, kLabels[f.rel], {}});
    std::vector<oracle::Fact> pred_v;
    for (const auto &f : gold_v)
      if (rng.bernoulli(0.6)) pred_v.push_back(f);
    for (const auto &f : random_facts(rng, docs, rng.below(8))) pred_v.push_back(f);
    std::vector<oracle::TrainTriple> triples;
    for (std::size_t i = 0, n = rng.below(3); i < n; ++i) {
      Document t = oracle::random_document(rng, spec, "t" + std::to_string(i));
      for (const auto &f : random_facts(rng, {t}, 4)) t.facts.push_back({f.head, f.tail, kLabels[f.rel], {}});
      for (const auto &f : t.facts)
        for (const auto &mh : t.entities[f.head].mentions)
          for (const auto &mt : t.entities[f.tail].mentions) triples.push_back({mh.surface, f.relation, mt.surface});
      train.push_back(std::move(t));
    }
    const FactSet pred = to_set(pred_v), gold = to_set(gold_v);
    const DocIndex ix = index_documents(docs);
    const std::string where = " (instance " + std::to_string(trial) + ")";

    if (!same(micro_f1(pred, gold), oracle::micro(pred_v, gold_v))) return {false, "micro F1" + where};
    if (!same(ign_f1(pred, gold, train_fact_names(train), ix, rel), oracle::ign(pred_v, gold_v, triples, docs, kLabels)))
      return {false, "Ign F1" + where};
    auto gap = [&](const oracle::Fact &f) { return oracle::min_sentence_gap(oracle::find_doc(docs, f.doc), f.head, f.tail); };
    const IntraInter ii = intra_inter_f1(pred, gold, ix);
    auto intra = [&](const oracle::Fact &f) { return gap(f) == 0; };
    auto inter = [&](const oracle::Fact &f) { return gap(f) != 0; };
    if (!same(ii.intra, oracle::micro(oracle::filter(pred_v, intra), oracle::filter(gold_v, intra))) ||
        !same(ii.inter, oracle::micro(oracle::filter(pred_v, inter), oracle::filter(gold_v, inter))))
      return {false, "intra/inter F1" + where};
    const auto dist = distance_bucket_f1(pred, gold, ix);
    const int lo[3] = {0, 4, 8}, hi[3] = {4, 8, oracle::kInf};
    for (int b = 0; b < 3; ++b) {
      auto in_b = [&](const oracle::Fact &f) { return gap(f) >= lo[b] && gap(f) < hi[b]; };
      const auto p = oracle::filter(pred_v, in_b), g = oracle::filter(gold_v, in_b);
      if (dist[b].has_value() == (p.empty() && g.empty())) return {false, "distance bucket presence" + where};
      if (dist[b] && !same(*dist[b], oracle::micro(p, g))) return {false, "distance bucket F1" + where};
    }
    std::vector<std::size_t> counts(kLabels.size(), 0);
    for (const auto &f : oracle::dedup(gold_v)) ++counts[f.rel];
    auto bucket = [&](std::size_t c) {
      std::size_t b = 0;
      while (b < bounds.size() && c > bounds[b]) ++b;
      return b;
    };
    const auto freq = frequency_bucket_f1(pred, gold, counts, bounds);
    for (std::size_t b = 0; b < freq.size(); ++b) {
      auto in_b = [&](const oracle::Fact &f) { return bucket(counts[f.rel]) == b; };
      const bool populated = std::any_of(counts.begin(), counts.end(), [&](std::size_t c) { return bucket(c) == b; });
      if (freq[b].metrics.has_value() != populated) return {false, "frequency bucket presence" + where};
      if (freq[b].metrics &&
          !same(*freq[b].metrics, oracle::micro(oracle::filter(pred_v, in_b), oracle::filter(gold_v, in_b))))
        return {false, "frequency bucket F1" + where};
    }

    // Threshold optimality on scores for every ordered entity pair.
    std::vector<ScoredPair> scored;
    for (const auto &d : docs)
      for (int h = 0; h < static_cast<int>(d.entities.size()); ++h)
        for (int t = 0; t < static_cast<int>(d.entities.size()); ++t) {
          if (h == t) continue;
          ScoredPair sp{d.doc_id, h, t, {}};
          for (std::size_t r = 0; r < kLabels.size(); ++r) sp.probabilities.push_back(std::round(rng.uniform(0.01, 0.99) * 50) / 50);
          scored.push_back(sp);
        }
    const Thresholds th = select_thresholds(scored, gold, kLabels.size());
    for (int r = 0; r < static_cast<int>(kLabels.size()); ++r) {
      std::vector<oracle::Fact> g;
      for (const auto &f : gold_v)
        if (f.rel == r) g.push_back(f);
      if (g.empty()) continue;
      auto f1_at = [&](double delta) {
        std::vector<oracle::Fact> p;
        for (const auto &s : scored)
          if (s.probabilities[r] > delta) p.push_back({s.doc_id, s.head, r, s.tail});
        return oracle::micro(p, g).f1;
      };
      std::vector<double> scores;
      for (const auto &s : scored) scores.push_back(s.probabilities[r]);
      std::sort(scores.begin(), scores.end());
      scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
      // Cutting at each score realizes every split of the sorted scores.
      std::vector<double> sweep{0.0, 1.0};
      sweep.insert(sweep.end(), scores.begin(), scores.end());
      for (std::size_t i = 0; i + 1 < scores.size(); ++i) sweep.push_back(0.5 * (scores[i] + scores[i + 1]));
      const double chosen = f1_at(th.delta[r]);
      for (double c : sweep)
        if (f1_at(c) > chosen) return {false, "threshold not optimal for relation " + std::to_string(r) + where};
    }
  }
  return {true, "500 instances"};
}

// 6 ---------------------------------------------------------------------------
Outcome optimizer_fidelity() {
  Rng rng(6);
  const AdamHyper hp{0.9, 0.999, 1e-6, 1e-4};
  std::vector<nd::Tensor> params{nd::Tensor({4})};
  for (double &x : params[0].values()) x = rng.uniform(-1, 1);
  std::vector<oracle::ScalarAdam> ref(4, oracle::ScalarAdam{1e-2, hp.beta1, hp.beta2, hp.eps, hp.weight_decay});
  std::vector<double> theta = params[0].values();
  OptimState st = OptimState::zeros_like(params);
  double worst = 0;
  for (int step = 0; step < 5; ++step) {
    std::vector<nd::Tensor> grads{nd::Tensor({4})};
    for (double &g : grads[0].values()) g = rng.uniform(-2, 2);
    adamw_step(params, grads, st, 1e-2, hp);
    for (std::size_t i = 0; i < 4; ++i) {
      theta[i] = ref[i].step(theta[i], grads[0][i]);
      worst = std::max(worst, std::abs(params[0][i] - theta[i]));
    }
  }
  if (worst > 1e-12) return {false, "AdamW deviates by " + fmt("%.3e", worst)};

  const double peak = 1e-3;
  if (lr_at(0, 1000, 0.1, peak) != 0.0 || lr_at(100, 1000, 0.1, peak) != peak || lr_at(1000, 1000, 0.1, peak) != 0.0)
    return {false, "schedule endpoints"};
  if (std::abs(lr_at(50, 1000, 0.1, peak) - peak / 2) > 1e-15 || std::abs(lr_at(550, 1000, 0.1, peak) - peak / 2) > 1e-15)
    return {false, "schedule midpoints"};

  const double c = 1.7, decay = 0.9;
  std::vector<nd::Tensor> zero{nd::Tensor({1})}, constant{nd::Tensor({1}, c)};
  EmaState ema = EmaState::init(zero, decay);
  for (int n = 1; n <= 50; ++n) {
    ema_update(ema, constant);
    if (std::abs(ema.shadow[0][0] - c * (1 - std::pow(decay, n))) > 1e-12) return {false, "EMA closed form"};
  }
  return {true, "AdamW max deviation " + fmt("%.1e", worst) + "; schedule and EMA exact"};
}

// 7 ---------------------------------------------------------------------------
CferConfig synthetic_model() {
  CferConfig m;
  m.d_emb = 32;
  m.d_h = 32;
  m.sublayers = 2;
  m.n_blocks = 2;
  m.dropout_dcgcn = 0.0;
  m.dropout_other = 0.0;
  return m;
}

TrainConfig synthetic_train(double lr, std::size_t epochs, std::uint64_t seed) {
  TrainConfig t;
  t.peak_lr = lr;
  t.batch_size = 4;
  t.epochs = epochs;
  t.ema_decay = 0.9;
  t.seed = seed;
  return t;
}

Outcome overfit() {
  const auto t0 = Clock::now();
  const auto train = synthetic_corpus({20, 1});
  const RelationVocab rel = synthetic_relations();
  std::size_t cross = 0;
  for (const auto &d : train)
    for (const auto &f : d.facts) cross += f.evidence.size() > 1;
  Trainer t = make_trainer(synthetic_model(), synthetic_train(1e-3, 300, 1), train, rel);
  const auto prep = t.prepare(train);
  double f1 = 0;
  while (t.epochs_done() < 300) {
    t.train_epoch(prep);
    f1 = t.evaluate_shadow(prep, train).first;
    if (f1 >= 0.95) break;
  }
  const double secs = seconds_since(t0);
  return {f1 >= 0.95 && secs < 300.0, "train F1 " + fmt("%.4f", f1) + " after " + std::to_string(t.epochs_done()) +
                                          " epochs, vocab " + std::to_string(t.vocab().size() - 2) + ", " +
                                          std::to_string(cross) + " cross-sentence facts, " + fmt("%.0f s", secs)};
}

// 8 ---------------------------------------------------------------------------
Outcome ablation_direction() {
  const auto train = synthetic_corpus({20, 1});
  SyntheticSpec dev_spec;
  dev_spec.seed = 2;
  dev_spec.id_prefix = "dev";
  const auto dev = synthetic_corpus(dev_spec);
  const RelationVocab rel = synthetic_relations();
  std::vector<double> full, no_fine;
  for (std::uint64_t seed : {1, 2, 3})
    for (Variant v : {Variant::Full, Variant::NoFine}) {
      CferConfig m = synthetic_model();
      m.ablation = variant_flags(v);
      Trainer t = make_trainer(m, synthetic_train(1e-2, 60, seed), train, rel);
      (v == Variant::Full ? full : no_fine).push_back(t.fit(train, dev).best.dev_f1);
    }
  std::sort(full.begin(), full.end());
  std::sort(no_fine.begin(), no_fine.end());
  return {full[1] >= no_fine[1], "median dev F1 full " + fmt("%.4f", full[1]) + " vs no-fine " + fmt("%.4f", no_fine[1])};
}

// 9 ---------------------------------------------------------------------------
std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const std::string &cli) {
  const std::string sample = std::string(CFER_SOURCE_DIR) + "/data/sample";
  const fs::path dir = fs::temp_directory_path() / "cfer_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto sh = [](const std::string &cmd) { return std::system((cmd + " > /dev/null").c_str()); };
  for (const char *run : {"a", "b"}) {
    const std::string ckpt = (dir / (std::string(run) + ".ckpt")).string();
    if (sh(cli + " train --config " + sample + "/tiny.cfg --train " + sample + "/train.json --dev " + sample +
           "/dev.json --seed 7 --workers 1 --out " + ckpt) != 0)
      return {false, "train run failed"};
    if (sh(cli + " predict --ckpt " + ckpt + " --test " + sample + "/dev.json --out " +
           (dir / (std::string(run) + ".tsv")).string()) != 0)
      return {false, "predict run failed"};
  }
  const std::string ca = slurp(dir / "a.ckpt"), cb = slurp(dir / "b.ckpt");
  const std::string pa = slurp(dir / "a.tsv"), pb = slurp(dir / "b.tsv");
  if (ca.empty() || pa.empty()) return {false, "missing outputs"};
  return {ca == cb && pa == pb, "checkpoints " + std::to_string(ca.size()) + " bytes " + (ca == cb ? "identical" : "differ") +
                                    ", predictions " + (pa == pb ? "identical" : "differ")};
}

} // namespace

int main(int argc, char **argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path to cfer binary>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"graph-rule oracle", graph_rules},
      {"shortest-path oracle", shortest_paths},
      {"shape identities", shape_identities},
      {"metric oracles", metric_oracles},
      {"optimizer and schedule", optimizer_fidelity},
      {"overfit run", overfit},
      {"ablation direction", ablation_direction},
      {"determinism", [&] { return determinism(cli); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
