// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfer/corpus.hpp"
#include "cfer/docgraph.hpp"
#include "cfer/ndiff.hpp"
#include "cfer/rng.hpp"

namespace cfer {

// ---------------------------------------------------------------------------
// Configuration

enum class Aggregator { Attention, Mean };
enum class PathMode { All, SingleRandom };

struct AblationFlags {
  bool use_fine = true;
  bool use_coarse_repr = true;
  bool use_dcgcn = true;
  Aggregator aggregator = Aggregator::Attention;
  PathMode paths = PathMode::All;

  bool operator==(const AblationFlags &) const = default;

  void validate() const {
    if (!use_fine && !use_coarse_repr)
      throw ConfigError("ablation: at least one of the fine or coarse representations must be used");
  }
};

/// The full model plus the six single-change variants of the ablation study.
enum class Variant { Full, NoAttention, NoMultiPath, NoFine, NoCoarse, NoDcgcn, NoBoth };

inline constexpr std::array<Variant, 7> kAllVariants{Variant::Full,     Variant::NoAttention, Variant::NoMultiPath,
                                                     Variant::NoFine,   Variant::NoCoarse,    Variant::NoDcgcn,
                                                     Variant::NoBoth};

/// Command-line name.
inline const char *variant_name(Variant v) {
  switch (v) {
  case Variant::Full: return "full";
  case Variant::NoAttention: return "no-attention";
  case Variant::NoMultiPath: return "no-multi-path";
  case Variant::NoFine: return "no-fine";
  case Variant::NoCoarse: return "no-coarse";
  case Variant::NoDcgcn: return "no-dcgcn";
  case Variant::NoBoth: return "no-both";
  }
  return "?";
}

/// Row label in the ablation table.
inline const char *variant_label(Variant v) {
  switch (v) {
  case Variant::Full: return "Full";
  case Variant::NoAttention: return "- Attention Aggregator";
  case Variant::NoMultiPath: return "- Multiple Paths";
  case Variant::NoFine: return "- Fine-level Repr.";
  case Variant::NoCoarse: return "- Coarse-level Repr.";
  case Variant::NoDcgcn: return "- DCGCN Blocks";
  case Variant::NoBoth: return "- Both-level Modules";
  }
  return "?";
}

inline std::string variant_names_list(bool include_full = true) {
  std::string s;
  for (Variant v : kAllVariants) {
    if (v == Variant::Full && !include_full) continue;
    s += (s.empty() ? "" : ", ") + std::string(variant_name(v));
  }
  return s;
}

inline std::optional<Variant> parse_variant(const std::string &name) {
  for (Variant v : kAllVariants)
    if (name == variant_name(v)) return v;
  return std::nullopt;
}

inline AblationFlags variant_flags(Variant v) {
  AblationFlags f;
  switch (v) {
  case Variant::Full: break;
  case Variant::NoAttention: f.aggregator = Aggregator::Mean; break;
  case Variant::NoMultiPath: f.paths = PathMode::SingleRandom; break;
  case Variant::NoFine: f.use_fine = false; break;
  case Variant::NoCoarse: f.use_coarse_repr = false; break;
  case Variant::NoDcgcn: f.use_dcgcn = false; break;
  case Variant::NoBoth:
    f.use_fine = false;
    f.use_dcgcn = false;
    break;
  }
  return f;
}

struct CferConfig {
  std::size_t d_emb = 300;
  std::size_t d_h = 300;
  std::size_t n_blocks = 2;
  std::size_t sublayers = 4; // per block
  std::size_t n_r = 96;
  double dropout_dcgcn = 0.4;
  double dropout_other = 0.2;
  std::optional<std::size_t> path_cap;
  AblationFlags ablation;

  bool operator==(const CferConfig &) const = default;

  std::size_t sublayer_width() const { return d_h / sublayers; }

  /// Width of the concatenated neighborhood input of sub-layer l (1-based).
  std::size_t sublayer_input_width(std::size_t l) const { return d_h + (l - 1) * sublayer_width(); }

  void validate() const {
    if (n_blocks < 1) throw ConfigError("n_blocks must be >= 1");
    if (sublayers < 1 || d_h % sublayers != 0)
      throw ConfigError("d_h (" + std::to_string(d_h) + ") must be divisible by sublayers (" +
                        std::to_string(sublayers) + ")");
    if (d_h % 2 != 0) throw ConfigError("d_h must be even (bidirectional text encoder)");
    if (d_emb < 1 || n_r < 1) throw ConfigError("d_emb and n_r must be positive");
    for (double r : {dropout_dcgcn, dropout_other})
      if (r < 0.0 || r >= 1.0) throw ConfigError("dropout rates must lie in [0, 1)");
    if (path_cap && *path_cap < 1) throw ConfigError("path_cap must be >= 1");
    ablation.validate();
  }
};

// ---------------------------------------------------------------------------
// Parameters

struct Parameter {
  std::string name;
  nd::Tensor value;
};

/// Ordered registry of named parameters.
class ParamStore {
public:
  std::size_t add(std::string name, nd::Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(value)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter &operator[](std::size_t i) { return params_[i]; }
  const Parameter &operator[](std::size_t i) const { return params_[i]; }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::optional<std::size_t> find(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<nd::Tensor> values() const {
    std::vector<nd::Tensor> v;
    v.reserve(params_.size());
    for (const auto &p : params_) v.push_back(p.value);
    return v;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto &p : params_) n += p.value.size();
    return n;
  }

private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct GruIds {
  std::size_t w_x = 0, w_h = 0, b = 0;
};

struct SublayerIds {
  std::size_t w = 0, b = 0;
};

struct BlockIds {
  std::vector<SublayerIds> sublayers;
  std::size_t out_w = 0, out_b = 0;
};

/// Where each model component lives in the ParamStore.
struct CferLayout {
  std::size_t embedding = 0;
  GruIds text_fwd, text_bwd;
  std::vector<BlockIds> blocks;
  GruIds path_fwd, path_bwd;
  std::size_t attn_w = 0, attn_b = 0;
  std::size_t bilinear_w = 0, bilinear_b = 0;
};

struct CferParams {
  CferLayout layout;
  ParamStore store;
};

namespace detail {

inline nd::Tensor xavier(nd::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng &rng) {
  nd::Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double &x : t.values()) x = rng.uniform(-a, a);
  return t;
}

inline GruIds add_gru(ParamStore &s, const std::string &prefix, std::size_t d_in, std::size_t h, Rng &rng) {
  GruIds g;
  g.w_x = s.add(prefix + ".w_x", xavier({3 * h, d_in}, d_in, 3 * h, rng));
  g.w_h = s.add(prefix + ".w_h", xavier({3 * h, h}, h, 3 * h, rng));
  g.b = s.add(prefix + ".b", nd::Tensor({3 * h}));
  return g;
}

} // namespace detail

/// Creates every parameter: matrices Xavier-uniform from a seeded stream,
/// biases zero, embeddings copied from the given table.
inline CferParams init_params(const CferConfig &cfg, const EmbeddingTable &emb, std::uint64_t seed) {
  cfg.validate();
  if (emb.d_emb != cfg.d_emb)
    throw ConfigError("embedding table has d_emb " + std::to_string(emb.d_emb) + ", config expects " +
                      std::to_string(cfg.d_emb));
  Rng rng({seed, 0x696e6974ULL});
  CferParams p;
  ParamStore &s = p.store;
  CferLayout &L = p.layout;
  const std::size_t dh = cfg.d_h, w = cfg.sublayer_width();
  L.embedding = s.add("embedding", emb.matrix);
  L.text_fwd = detail::add_gru(s, "text_gru.fwd", cfg.d_emb, dh / 2, rng);
  L.text_bwd = detail::add_gru(s, "text_gru.bwd", cfg.d_emb, dh / 2, rng);
  for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
    BlockIds b;
    const std::string bp = "dcgcn." + std::to_string(k);
    for (std::size_t l = 1; l <= cfg.sublayers; ++l) {
      const std::size_t in = cfg.sublayer_input_width(l);
      const std::string lp = bp + ".sub" + std::to_string(l);
      SublayerIds sl;
      sl.w = s.add(lp + ".w", detail::xavier({w, in}, in, w, rng));
      sl.b = s.add(lp + ".b", nd::Tensor({w}));
      b.sublayers.push_back(sl);
    }
    b.out_w = s.add(bp + ".out.w", detail::xavier({dh, dh}, dh, dh, rng));
    b.out_b = s.add(bp + ".out.b", nd::Tensor({dh}));
    L.blocks.push_back(std::move(b));
  }
  L.path_fwd = detail::add_gru(s, "path_gru.fwd", dh, dh, rng);
  L.path_bwd = detail::add_gru(s, "path_gru.bwd", dh, dh, rng);
  L.attn_w = s.add("attention.w", detail::xavier({1, 4 * dh}, 4 * dh, 1, rng));
  L.attn_b = s.add("attention.b", nd::Tensor({1}));
  L.bilinear_w = s.add("bilinear.w", detail::xavier({2 * dh, cfg.n_r, 2 * dh}, 2 * dh, 2 * dh, rng));
  L.bilinear_b = s.add("bilinear.b", nd::Tensor({cfg.n_r}));
  return p;
}

// ---------------------------------------------------------------------------
// Per-document inputs

/// A document with everything the forward pass needs precomputed once.
struct PreparedDoc {
  const Document *doc = nullptr;
  std::size_t index = 0; // position in its corpus; keys the random streams
  std::vector<std::size_t> token_ids;
  DocGraph graph;
  std::vector<CandidatePair> pairs;
  std::vector<std::vector<Path>> paths; // per pair; empty when the fine level is off
};

inline PreparedDoc prepare_document(const Document &doc, std::size_t index, const Vocab &vocab,
                                    const RelationVocab &relations, const CferConfig &cfg) {
  PreparedDoc p;
  p.doc = &doc;
  p.index = index;
  for (const auto &s : doc.sentences)
    for (const auto &t : s.tokens) p.token_ids.push_back(static_cast<std::size_t>(vocab.id(t)));
  p.graph = build_graph(doc);
  p.pairs = candidate_pairs(doc, relations);
  if (cfg.ablation.use_fine) {
    const PathGraph sub = path_subgraph(p.graph);
    for (const auto &pair : p.pairs)
      p.paths.push_back(mention_paths(doc, p.graph, sub, pair.head, pair.tail, cfg.path_cap));
  }
  return p;
}

inline std::vector<PreparedDoc> prepare_corpus(const std::vector<Document> &docs, const Vocab &vocab,
                                               const RelationVocab &relations, const CferConfig &cfg) {
  std::vector<PreparedDoc> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) out.push_back(prepare_document(docs[i], i, vocab, relations, cfg));
  return out;
}

/// Mode and random-stream keys for one document's forward pass. Dropout masks
/// are drawn from streams keyed by (seed, pass, document, op counter) so they
/// do not depend on which worker runs the document.
struct ForwardContext {
  nd::Mode mode = nd::Mode::Eval;
  std::uint64_t seed = 0;
  std::uint64_t pass = 0; // epoch number during training
  std::size_t doc_index = 0;
  std::uint64_t op_counter = 0;

  Rng dropout_stream() { return Rng({seed, pass, doc_index, op_counter++}); }
  Rng pair_stream(std::size_t pair) const { return Rng({seed, 0x70617468ULL, pass, doc_index, pair}); }
};

// ---------------------------------------------------------------------------
// Components

using nd::GruVars;
using nd::Var;

/// Parameters of one model instance bound as leaves of a tape.
struct BoundParams {
  std::vector<Var> vars;

  static BoundParams bind(nd::Tape &tape, std::span<const nd::Tensor> values, bool requires_grad) {
    BoundParams b;
    b.vars.reserve(values.size());
    for (const auto &v : values) b.vars.push_back(tape.borrow(v, requires_grad));
    return b;
  }

  Var operator[](std::size_t id) const { return vars.at(id); }
  GruVars gru(const GruIds &g) const { return {vars.at(g.w_x), vars.at(g.w_h), vars.at(g.b)}; }
};

inline Var zeros(nd::Tape &tape, std::size_t d) { return tape.constant(nd::Tensor({d})); }

/// Input projections W_x x + b of every row of `inputs` for one GRU.
inline Var project_rows(Var inputs, const GruVars &p) { return nd::linear(inputs, p.w_x, p.b); }

/// Runs a GRU over rows of a projected input matrix in the given order from a
/// zero state and returns the state after each step (aligned with `order`).
inline std::vector<Var> gru_over_rows(Var projected, std::span<const std::size_t> order, const GruVars &p) {
  const std::size_t h = p.w_h.value().dim(1);
  std::vector<Var> states;
  states.reserve(order.size());
  Var state = zeros(*projected.tape, h);
  for (std::size_t idx : order) {
    state = nd::gru_step(nd::row(projected, idx), state, p.w_h);
    states.push_back(state);
  }
  return states;
}

/// Contextual word representations H [T x d_h]: embedding lookup, dropout,
/// then a bidirectional GRU over the flat token sequence; row t is
/// [forward state; backward state].
inline Var encode_text(std::span<const std::size_t> token_ids, Var embedding, const GruVars &fwd, const GruVars &bwd,
                       double dropout_rate, ForwardContext &ctx) {
  if (token_ids.empty()) throw ValidationError("encode_text: empty document");
  Var x = nd::gather_rows(embedding, std::vector<std::size_t>(token_ids.begin(), token_ids.end()));
  Rng drop = ctx.dropout_stream();
  x = nd::dropout(x, dropout_rate, ctx.mode, drop);
  const std::size_t T = token_ids.size();
  std::vector<std::size_t> order(T);
  for (std::size_t t = 0; t < T; ++t) order[t] = t;
  auto f = gru_over_rows(project_rows(x, fwd), order, fwd);
  std::reverse(order.begin(), order.end());
  auto b = gru_over_rows(project_rows(x, bwd), order, bwd);
  std::vector<Var> rows;
  rows.reserve(T);
  for (std::size_t t = 0; t < T; ++t) rows.push_back(nd::concat({f[t], b[T - 1 - t]}));
  return nd::stack_rows(rows);
}

struct SublayerVars {
  Var w, b;
};

struct BlockVars {
  std::vector<SublayerVars> sublayers;
  Var out_w, out_b;
};

inline BlockVars block_vars(const BoundParams &bp, const BlockIds &ids) {
  BlockVars b{{}, bp[ids.out_w], bp[ids.out_b]};
  for (const auto &s : ids.sublayers) b.sublayers.push_back({bp[s.w], bp[s.b]});
  return b;
}

/// One densely connected GCN sub-layer:
///   out_i = ReLU( W * sum_{j in N(i)} [x_j; h_j^(1); ...; h_j^(l-1)] + b )
inline Var dcgcn_sublayer(Var block_input, std::span<const Var> prev_outputs, const std::vector<std::vector<int>> &adjacency,
                          Var w, Var b, double dropout_rate, ForwardContext &ctx) {
  std::vector<Var> parts{block_input};
  parts.insert(parts.end(), prev_outputs.begin(), prev_outputs.end());
  Var hat = nd::concat(parts, 1);
  if (hat.value().dim(1) != w.value().dim(1))
    throw ShapeError("dcgcn_sublayer: neighborhood input width " + std::to_string(hat.value().dim(1)) +
                     " does not match weight " + nd::shape_str(w.shape()));
  Rng drop = ctx.dropout_stream();
  hat = nd::dropout(hat, dropout_rate, ctx.mode, drop);
  return nd::relu(nd::linear(nd::aggregate(hat, adjacency), w, b));
}

/// A block of densely connected sub-layers followed by the residual FC:
///   O = FC( X + [h^(1); ...; h^(m)] )
inline Var dcgcn_block(Var x, const std::vector<std::vector<int>> &adjacency, const BlockVars &p, double dropout_rate,
                       ForwardContext &ctx) {
  std::vector<Var> outs;
  for (const auto &s : p.sublayers) outs.push_back(dcgcn_sublayer(x, outs, adjacency, s.w, s.b, dropout_rate, ctx));
  Var dense = nd::concat(outs, 1);
  if (dense.shape() != x.shape())
    throw ShapeError("dcgcn_block: concatenated sub-layer width " + nd::shape_str(dense.shape()) +
                     " does not match block input " + nd::shape_str(x.shape()));
  return nd::linear(nd::add(x, dense), p.out_w, p.out_b);
}

/// Chains the blocks; block k + 1 consumes block k's output.
inline Var coarse_encode(Var h, const std::vector<std::vector<int>> &adjacency, std::span<const BlockVars> blocks,
                         double dropout_rate, ForwardContext &ctx) {
  Var o = h;
  for (const auto &b : blocks) o = dcgcn_block(o, adjacency, b, dropout_rate, ctx);
  return o;
}

/// Entity vector: mean over mentions of the mean of each mention's span rows.
inline Var coarse_entity(Var o, const Entity &entity, const std::vector<int> &sentence_offsets) {
  if (entity.mentions.empty()) throw ValidationError("coarse_entity: entity has no mentions");
  std::vector<std::pair<std::size_t, double>> terms;
  const double per_mention = 1.0 / static_cast<double>(entity.mentions.size());
  for (const auto &m : entity.mentions) {
    const double w = per_mention / static_cast<double>(m.span_end - m.span_start);
    for (int t = m.span_start; t < m.span_end; ++t)
      terms.emplace_back(static_cast<std::size_t>(sentence_offsets[m.sent_id] + t), w);
  }
  return nd::combine_rows(o, std::move(terms));
}

struct PathRep {
  Var head; // backward state at the first node
  Var tail; // forward state at the last node
};

/// Coarse rows projected once for each direction of the path encoder; every
/// path of the document reuses them.
struct PathInputs {
  Var fwd, bwd;
};

inline PathInputs project_path_inputs(Var o, const GruVars &fwd, const GruVars &bwd) {
  return {project_rows(o, fwd), project_rows(o, bwd)};
}

/// Bidirectional GRU over the coarse rows along a path.
inline PathRep encode_path(const Path &path, const PathInputs &in, const GruVars &fwd, const GruVars &bwd) {
  if (path.nodes.empty()) throw ValidationError("encode_path: empty path");
  std::vector<std::size_t> order(path.nodes.begin(), path.nodes.end());
  auto f = gru_over_rows(in.fwd, order, fwd);
  std::reverse(order.begin(), order.end());
  auto b = gru_over_rows(in.bwd, order, bwd);
  return {b.back(), f.back()};
}

inline PathRep encode_path(const Path &path, Var o, const GruVars &fwd, const GruVars &bwd) {
  return encode_path(path, project_path_inputs(o, fwd, bwd), fwd, bwd);
}

struct Attended {
  Var head, tail;
  Var alpha; // [k]
};

/// Aggregates path representations. Attention mode scores each path with
/// W_a [h~; t~; m_h; m_t] + b_a and softmaxes over paths; mean mode uses
/// uniform weights.
inline Attended attend_paths(Var h_coarse, Var t_coarse, std::span<const PathRep> reps, Var w_a, Var b_a,
                             Aggregator aggregator) {
  if (reps.empty()) throw ValidationError("attend_paths: no paths");
  nd::Tape &tape = *h_coarse.tape;
  std::vector<Var> heads, tails;
  for (const auto &r : reps) {
    heads.push_back(r.head);
    tails.push_back(r.tail);
  }
  Var alpha;
  if (reps.size() == 1) {
    alpha = tape.constant(nd::Tensor::vector({1.0}));
  } else if (aggregator == Aggregator::Mean) {
    alpha = tape.constant(nd::Tensor({reps.size()}, 1.0 / static_cast<double>(reps.size())));
  } else {
    std::vector<Var> scores;
    for (const auto &r : reps) scores.push_back(nd::linear(nd::concat({h_coarse, t_coarse, r.head, r.tail}), w_a, b_a));
    alpha = nd::softmax(nd::concat(scores));
  }
  if (reps.size() == 1) return {reps[0].head, reps[0].tail, alpha};
  return {nd::weighted_sum(alpha, nd::stack_rows(heads)), nd::weighted_sum(alpha, nd::stack_rows(tails)), alpha};
}

/// P(r | e1, e2) = sigmoid([h~; h]^T W_c[:, r, :] [t~; t] + b_c[r]).
/// Disabled levels contribute zero vectors.
inline Var score_pair(Var h_coarse, Var t_coarse, std::optional<Var> h_fine, std::optional<Var> t_fine, Var w_c, Var b_c,
                      const AblationFlags &flags, double dropout_rate, ForwardContext &ctx) {
  nd::Tape &tape = *h_coarse.tape;
  const std::size_t dh = h_coarse.size();
  Var hc = flags.use_coarse_repr ? h_coarse : zeros(tape, dh);
  Var tc = flags.use_coarse_repr ? t_coarse : zeros(tape, dh);
  Var hf = (flags.use_fine && h_fine) ? *h_fine : zeros(tape, dh);
  Var tf = (flags.use_fine && t_fine) ? *t_fine : zeros(tape, dh);
  Var u = nd::concat({hc, hf});
  Var v = nd::concat({tc, tf});
  Rng drop = ctx.dropout_stream();
  u = nd::dropout(u, dropout_rate, ctx.mode, drop);
  v = nd::dropout(v, dropout_rate, ctx.mode, drop);
  return nd::sigmoid(nd::bilinear(u, w_c, v, b_c));
}

// ---------------------------------------------------------------------------
// Full forward pass

struct PairOutput {
  int head = 0;
  int tail = 0;
  std::vector<double> probabilities;
  std::vector<double> alpha;            // attention weight per used path
  std::vector<std::size_t> path_ids;    // indices into the pair's path list
};

struct ForwardResult {
  std::vector<PairOutput> outputs;
  std::optional<Var> loss; // mean BCE over pairs, set in train mode
  std::vector<Var> probabilities;
};

class CferModel {
public:
  CferModel(CferConfig cfg, CferLayout layout) : cfg_(std::move(cfg)), layout_(std::move(layout)) { cfg_.validate(); }

  const CferConfig &config() const { return cfg_; }
  const CferLayout &layout() const { return layout_; }

  /// Runs the whole model over the candidate pairs of one document. With
  /// `with_loss` the mean binary cross entropy over pairs is attached.
  ForwardResult forward(nd::Tape &, const BoundParams &p, const PreparedDoc &doc, ForwardContext &ctx,
                        bool with_loss) const {
    if (doc.pairs.empty()) throw ValidationError("forward: document '" + doc.doc->doc_id + "' has no entity pairs");
    const AblationFlags &flags = cfg_.ablation;
    Var h = encode_text(doc.token_ids, p[layout_.embedding], p.gru(layout_.text_fwd), p.gru(layout_.text_bwd),
                        cfg_.dropout_other, ctx);
    Var o = h;
    if (flags.use_dcgcn) {
      std::vector<BlockVars> blocks;
      for (const auto &b : layout_.blocks) blocks.push_back(block_vars(p, b));
      o = coarse_encode(h, doc.graph.adjacency, blocks, cfg_.dropout_dcgcn, ctx);
    }

    std::vector<std::optional<Var>> entity_cache(doc.doc->entities.size());
    auto entity_rep = [&](int e) {
      auto &slot = entity_cache[static_cast<std::size_t>(e)];
      if (!slot) slot = coarse_entity(o, doc.doc->entities[static_cast<std::size_t>(e)], doc.graph.sentence_offsets);
      return *slot;
    };

    std::optional<PathInputs> path_inputs;
    if (flags.use_fine) path_inputs = project_path_inputs(o, p.gru(layout_.path_fwd), p.gru(layout_.path_bwd));

    ForwardResult result;
    std::vector<Var> losses;
    for (std::size_t k = 0; k < doc.pairs.size(); ++k) {
      const CandidatePair &pair = doc.pairs[k];
      PairOutput out{pair.head, pair.tail, {}, {}, {}};
      Var hc = entity_rep(pair.head), tc = entity_rep(pair.tail);
      std::optional<Var> hf, tf;
      if (flags.use_fine) {
        const auto &paths = doc.paths.at(k);
        std::vector<std::size_t> used;
        if (flags.paths == PathMode::SingleRandom) {
          Rng pick = ctx.pair_stream(k);
          used.push_back(static_cast<std::size_t>(pick.below(paths.size())));
        } else {
          for (std::size_t i = 0; i < paths.size(); ++i) used.push_back(i);
        }
        std::vector<PathRep> reps;
        for (std::size_t i : used)
          reps.push_back(encode_path(paths[i], *path_inputs, p.gru(layout_.path_fwd), p.gru(layout_.path_bwd)));
        Attended att = attend_paths(hc, tc, reps, p[layout_.attn_w], p[layout_.attn_b], flags.aggregator);
        hf = att.head;
        tf = att.tail;
        out.alpha = att.alpha.value().values();
        out.path_ids = used;
      }
      Var probs = score_pair(hc, tc, hf, tf, p[layout_.bilinear_w], p[layout_.bilinear_b], flags, cfg_.dropout_other, ctx);
      out.probabilities = probs.value().values();
      if (with_loss) losses.push_back(nd::bce_loss(probs, pair.labels));
      result.probabilities.push_back(probs);
      result.outputs.push_back(std::move(out));
    }
    if (with_loss) result.loss = nd::scale(nd::add_n(losses), 1.0 / static_cast<double>(losses.size()));
    return result;
  }

  /// Eval-mode probabilities for every candidate pair of a document.
  std::vector<PairOutput> predict(std::span<const nd::Tensor> values, const PreparedDoc &doc, std::uint64_t seed) const {
    if (doc.pairs.empty()) return {};
    nd::Tape tape;
    BoundParams bp = BoundParams::bind(tape, values, false);
    ForwardContext ctx{nd::Mode::Eval, seed, 0, doc.index, 0};
    return forward(tape, bp, doc, ctx, false).outputs;
  }

  struct Gradient {
    double loss = 0.0;
    std::vector<nd::Tensor> grads; // aligned with the parameter store
  };

  /// Loss and parameter gradients for one document.
  Gradient gradient(std::span<const nd::Tensor> values, const PreparedDoc &doc, ForwardContext ctx) const {
    nd::Tape tape;
    BoundParams bp = BoundParams::bind(tape, values, true);
    ForwardResult r = forward(tape, bp, doc, ctx, true);
    tape.backward(*r.loss);
    Gradient g;
    g.loss = r.loss->value().item();
    g.grads.reserve(values.size());
    for (const Var &v : bp.vars) g.grads.push_back(tape.grad_or_zero(v));
    return g;
  }

private:
  CferConfig cfg_;
  CferLayout layout_;
};

} // namespace cfer
