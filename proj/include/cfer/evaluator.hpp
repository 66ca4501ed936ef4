// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cfer/corpus.hpp"
#include "cfer/docgraph.hpp"

namespace cfer {

/// Model output for one candidate pair.
struct ScoredPair {
  std::string doc_id;
  int head = 0;
  int tail = 0;
  std::vector<double> probabilities; // [n_r]
};

/// (doc_id, head, relation index, tail).
struct FactKey {
  std::string doc_id;
  int head = 0;
  int relation = 0;
  int tail = 0;

  auto operator<=>(const FactKey &) const = default;
};

using FactSet = std::set<FactKey>;

struct Thresholds {
  std::vector<double> delta; // per relation index

  static Thresholds global(std::size_t n_r, double d) { return {std::vector<double>(n_r, d)}; }
};

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const PRF &) const = default;
};

inline constexpr double kFallbackThreshold = 0.5;

inline FactSet gold_facts(std::span<const Document> docs, const RelationVocab &relations) {
  FactSet s;
  for (const auto &d : docs)
    for (const auto &f : d.facts) s.insert({d.doc_id, f.head, relations.id(f.relation), f.tail});
  return s;
}

/// Conventions: an empty prediction set has precision 1 only when the gold
/// set is empty too; an empty gold set has recall 1 only when nothing is
/// predicted; F1 is 0 when P + R = 0.
inline PRF prf_from_counts(std::size_t tp, std::size_t n_pred, std::size_t n_gold) {
  PRF r;
  if (n_pred == 0) r.precision = n_gold == 0 ? 1.0 : 0.0;
  else r.precision = static_cast<double>(tp) / static_cast<double>(n_pred);
  if (n_gold == 0) r.recall = n_pred == 0 ? 1.0 : 0.0;
  else r.recall = static_cast<double>(tp) / static_cast<double>(n_gold);
  const double s = r.precision + r.recall;
  r.f1 = s == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / s;
  return r;
}

inline PRF micro_f1(const FactSet &pred, const FactSet &gold) {
  std::size_t tp = 0;
  for (const auto &f : pred) tp += gold.count(f);
  return prf_from_counts(tp, pred.size(), gold.size());
}

/// P(r | e1, e2) > delta_r, strictly.
inline FactSet decide(std::span<const ScoredPair> pairs, const Thresholds &th) {
  FactSet out;
  for (const auto &p : pairs)
    for (std::size_t r = 0; r < p.probabilities.size(); ++r)
      if (p.probabilities[r] > th.delta.at(r)) out.insert({p.doc_id, p.head, static_cast<int>(r), p.tail});
  return out;
}

/// Candidate cut points for one relation: midpoints between consecutive
/// distinct scores, the two outer sentinels 0 and 1, and the fallback 0.5.
/// Sorted ascending, deduplicated. When two scores are adjacent doubles the
/// midpoint can round up to the larger one; the smaller score is used instead.
inline std::vector<double> threshold_candidates(std::vector<double> scores) {
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<double> c{0.0, kFallbackThreshold, 1.0};
  for (std::size_t i = 0; i + 1 < scores.size(); ++i) {
    const double mid = 0.5 * (scores[i] + scores[i + 1]);
    c.push_back(mid < scores[i + 1] ? mid : scores[i]);
  }
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

/// Per-relation cut maximizing that relation's F1 over the candidates; ties
/// go to the larger cut. Relations without dev positives keep 0.5.
inline Thresholds select_thresholds(std::span<const ScoredPair> pairs, const FactSet &gold, std::size_t n_r) {
  Thresholds th = Thresholds::global(n_r, kFallbackThreshold);
  for (std::size_t r = 0; r < n_r; ++r) {
    const int ri = static_cast<int>(r);
    std::size_t n_gold = 0;
    for (const auto &g : gold) n_gold += g.relation == ri;
    if (n_gold == 0) continue;
    std::vector<double> scores, positive;
    scores.reserve(pairs.size());
    for (const auto &p : pairs) {
      const double s = p.probabilities.at(r);
      scores.push_back(s);
      if (gold.count({p.doc_id, p.head, ri, p.tail})) positive.push_back(s);
    }
    std::sort(positive.begin(), positive.end());
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    double best_f1 = -1.0;
    for (double c : threshold_candidates(std::move(scores))) {
      const auto above = [c](const std::vector<double> &v) {
        return static_cast<std::size_t>(v.end() - std::upper_bound(v.begin(), v.end(), c));
      };
      const double f = prf_from_counts(above(positive), above(sorted), n_gold).f1;
      if (f >= best_f1) {
        best_f1 = f;
        th.delta[r] = c;
      }
    }
  }
  return th;
}

// ---------------------------------------------------------------------------
// Breakdowns

using DocIndex = std::map<std::string, const Document *>;

inline DocIndex index_documents(std::span<const Document> docs) {
  DocIndex ix;
  for (const auto &d : docs) ix[d.doc_id] = &d;
  return ix;
}

inline const Document &lookup(const DocIndex &ix, const std::string &doc_id) {
  auto it = ix.find(doc_id);
  if (it == ix.end()) throw ValidationError("fact refers to unknown document '" + doc_id + "'");
  return *it->second;
}

/// (head mention name, relation, tail mention name).
using NameTriple = std::tuple<std::string, std::string, std::string>;
using NameFactSet = std::set<NameTriple>;

/// Every (head mention surface, relation, tail mention surface) of the
/// training facts.
inline NameFactSet train_fact_names(std::span<const Document> train) {
  NameFactSet s;
  for (const auto &d : train)
    for (const auto &f : d.facts)
      for (const auto &mh : d.entities.at(f.head).mentions)
        for (const auto &mt : d.entities.at(f.tail).mentions) s.insert({mh.surface, f.relation, mt.surface});
  return s;
}

/// A fact is seen in training when any of its mention-name pairs is.
inline bool in_train(const FactKey &f, const Document &doc, const RelationVocab &relations, const NameFactSet &train) {
  if (train.empty()) return false;
  const std::string &rel = relations.label(static_cast<std::size_t>(f.relation));
  for (const auto &mh : doc.entities.at(f.head).mentions)
    for (const auto &mt : doc.entities.at(f.tail).mentions)
      if (train.count({mh.surface, rel, mt.surface})) return true;
  return false;
}

inline PRF ign_f1(const FactSet &pred, const FactSet &gold, const NameFactSet &train, const DocIndex &docs,
                  const RelationVocab &relations) {
  auto strip = [&](const FactSet &s) {
    FactSet out;
    for (const auto &f : s)
      if (!in_train(f, lookup(docs, f.doc_id), relations, train)) out.insert(f);
    return out;
  };
  return micro_f1(strip(pred), strip(gold));
}

/// True when some sentence holds a mention of both entities.
inline bool is_intra(const Document &doc, int e1, int e2) { return sentence_distance(doc, e1, e2) == 0; }

struct IntraInter {
  PRF intra;
  PRF inter;
};

inline IntraInter intra_inter_f1(const FactSet &pred, const FactSet &gold, const DocIndex &docs) {
  FactSet p[2], g[2];
  for (const auto &f : pred) p[is_intra(lookup(docs, f.doc_id), f.head, f.tail) ? 0 : 1].insert(f);
  for (const auto &f : gold) g[is_intra(lookup(docs, f.doc_id), f.head, f.tail) ? 0 : 1].insert(f);
  return {micro_f1(p[0], g[0]), micro_f1(p[1], g[1])};
}

inline constexpr std::array<int, 2> kDistanceEdges{4, 8};
inline constexpr std::array<const char *, 3> kDistanceLabels{"[0,4)", "[4,8)", "[8,inf)"};

inline std::size_t distance_bucket(int distance) {
  std::size_t b = 0;
  while (b < kDistanceEdges.size() && distance >= kDistanceEdges[b]) ++b;
  return b;
}

/// Micro F1 per sentence-distance bucket; a bucket with neither predicted nor
/// gold facts is absent.
inline std::array<std::optional<PRF>, 3> distance_bucket_f1(const FactSet &pred, const FactSet &gold,
                                                            const DocIndex &docs) {
  std::array<FactSet, 3> p, g;
  for (const auto &f : pred) p[distance_bucket(sentence_distance(lookup(docs, f.doc_id), f.head, f.tail))].insert(f);
  for (const auto &f : gold) g[distance_bucket(sentence_distance(lookup(docs, f.doc_id), f.head, f.tail))].insert(f);
  std::array<std::optional<PRF>, 3> out;
  for (std::size_t b = 0; b < 3; ++b)
    if (!p[b].empty() || !g[b].empty()) out[b] = micro_f1(p[b], g[b]);
  return out;
}

struct FrequencyBucket {
  std::string label;
  std::size_t relations = 0;
  std::optional<PRF> metrics; // absent when no relation falls in the bucket
};

inline const std::vector<std::size_t> kDefaultFrequencyBounds{20, 100, 500};

/// Relation r goes to the first bucket whose upper bound is >= its dev gold
/// count (the last bucket is unbounded); metrics are micro F1 over the facts
/// of the bucket's relations.
inline std::vector<FrequencyBucket> frequency_bucket_f1(const FactSet &pred, const FactSet &gold,
                                                        std::span<const std::size_t> gold_counts,
                                                        std::span<const std::size_t> bounds = kDefaultFrequencyBounds) {
  const std::size_t nb = bounds.size() + 1;
  std::vector<FrequencyBucket> out(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::string lo = b == 0 ? "0" : std::to_string(bounds[b - 1]);
    out[b].label = b == 0 ? "[0," + std::to_string(bounds[0]) + "]"
                 : b + 1 < nb ? "(" + lo + "," + std::to_string(bounds[b]) + "]"
                              : "(" + lo + ",inf)";
  }
  std::vector<std::size_t> bucket_of(gold_counts.size());
  for (std::size_t r = 0; r < gold_counts.size(); ++r) {
    std::size_t b = 0;
    while (b < bounds.size() && gold_counts[r] > bounds[b]) ++b;
    bucket_of[r] = b;
    ++out[b].relations;
  }
  std::vector<FactSet> p(nb), g(nb);
  for (const auto &f : pred) p[bucket_of.at(static_cast<std::size_t>(f.relation))].insert(f);
  for (const auto &f : gold) g[bucket_of.at(static_cast<std::size_t>(f.relation))].insert(f);
  for (std::size_t b = 0; b < nb; ++b)
    if (out[b].relations > 0) out[b].metrics = micro_f1(p[b], g[b]);
  return out;
}

inline std::vector<std::size_t> relation_counts(const FactSet &gold, std::size_t n_r) {
  std::vector<std::size_t> c(n_r, 0);
  for (const auto &f : gold) ++c.at(static_cast<std::size_t>(f.relation));
  return c;
}

// ---------------------------------------------------------------------------
// Report

struct RelationRow {
  std::string label;
  double threshold = kFallbackThreshold;
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct EvalReport {
  PRF micro;
  double ign_f1 = 0.0;
  PRF intra, inter;
  std::array<std::optional<PRF>, 3> distance;
  std::vector<FrequencyBucket> frequency;
  std::vector<RelationRow> relations;
};

struct EvalInputs {
  std::span<const Document> docs;
  const RelationVocab *relations = nullptr;
  const NameFactSet *train_names = nullptr; // may be null: Ign F1 equals F1
  std::optional<std::vector<std::size_t>> frequency_counts; // defaults to the gold counts of `docs`
};

inline EvalReport evaluate(std::span<const ScoredPair> pairs, const Thresholds &th, const EvalInputs &in) {
  const RelationVocab &rel = *in.relations;
  const FactSet gold = gold_facts(in.docs, rel);
  const FactSet pred = decide(pairs, th);
  const DocIndex ix = index_documents(in.docs);
  EvalReport rep;
  rep.micro = micro_f1(pred, gold);
  rep.ign_f1 = in.train_names ? ign_f1(pred, gold, *in.train_names, ix, rel).f1 : rep.micro.f1;
  const IntraInter ii = intra_inter_f1(pred, gold, ix);
  rep.intra = ii.intra;
  rep.inter = ii.inter;
  rep.distance = distance_bucket_f1(pred, gold, ix);
  const auto counts = in.frequency_counts ? *in.frequency_counts : relation_counts(gold, rel.size());
  rep.frequency = frequency_bucket_f1(pred, gold, counts);
  for (std::size_t r = 0; r < rel.size(); ++r) rep.relations.push_back({rel.label(r), th.delta.at(r), 0, 0, 0});
  for (const auto &f : pred) (gold.count(f) ? rep.relations[f.relation].tp : rep.relations[f.relation].fp)++;
  for (const auto &f : gold)
    if (!pred.count(f)) ++rep.relations[f.relation].fn;
  return rep;
}

namespace detail {

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline std::string fmt_sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}

inline nlohmann::json prf_json(const PRF &p) { return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}}; }

} // namespace detail

/// Tab-separated: metric, key, value.
inline void write_report_tsv(std::ostream &os, const EvalReport &r) {
  using detail::fmt;
  os << "metric\tkey\tvalue\n";
  os << "micro\tprecision\t" << fmt(r.micro.precision) << "\n";
  os << "micro\trecall\t" << fmt(r.micro.recall) << "\n";
  os << "micro\tf1\t" << fmt(r.micro.f1) << "\n";
  os << "ign\tf1\t" << fmt(r.ign_f1) << "\n";
  os << "intra\tf1\t" << fmt(r.intra.f1) << "\n";
  os << "inter\tf1\t" << fmt(r.inter.f1) << "\n";
  for (std::size_t b = 0; b < r.distance.size(); ++b)
    os << "distance\t" << kDistanceLabels[b] << "\t" << (r.distance[b] ? fmt(r.distance[b]->f1) : "absent") << "\n";
  for (const auto &fb : r.frequency)
    os << "frequency\t" << fb.label << "\t" << (fb.metrics ? fmt(fb.metrics->f1) : "absent") << "\n";
  for (const auto &rr : r.relations)
    os << "relation\t" << rr.label << "\tthreshold=" << fmt(rr.threshold) << " tp=" << rr.tp << " fp=" << rr.fp
       << " fn=" << rr.fn << "\n";
}

inline nlohmann::json report_json(const EvalReport &r) {
  nlohmann::json j;
  j["micro"] = detail::prf_json(r.micro);
  j["ign_f1"] = r.ign_f1;
  j["intra"] = detail::prf_json(r.intra);
  j["inter"] = detail::prf_json(r.inter);
  for (std::size_t b = 0; b < r.distance.size(); ++b)
    j["distance"][kDistanceLabels[b]] = r.distance[b] ? detail::prf_json(*r.distance[b]) : nlohmann::json(nullptr);
  for (const auto &fb : r.frequency)
    j["frequency"][fb.label] = {{"relations", fb.relations},
                                {"metrics", fb.metrics ? detail::prf_json(*fb.metrics) : nlohmann::json(nullptr)}};
  for (const auto &rr : r.relations)
    j["relations"][rr.label] = {{"threshold", rr.threshold}, {"tp", rr.tp}, {"fp", rr.fp}, {"fn", rr.fn}};
  return j;
}

} // namespace cfer
