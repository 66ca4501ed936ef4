// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "cfer/model.hpp"
#include "cfer/ndiff/gradcheck.hpp"

namespace cfer {

struct GradcheckSizes {
  std::size_t d_emb = 4;
  std::size_t d_h = 8;
  std::size_t sublayers = 2;
  std::size_t n_blocks = 2;
  std::size_t n_r = 3;
};

/// Two sentences, five tokens, two entities; the first entity has a mention
/// in each sentence so its pair gets two paths.
inline Document gradcheck_document() {
  Document d;
  d.doc_id = "gradcheck";
  d.sentences = {{{"a", "b", "c"}, {1, -1, 1}}, {{"d", "e"}, {-1, 0}}};
  d.entities = {{0, {{0, 0, 1, "a"}, {1, 1, 2, "e"}}, ""}, {1, {{0, 2, 3, "c"}}, ""}};
  d.facts = {{0, 1, "r0", {0}}, {1, 0, "r2", {0}}};
  return d;
}

/// Finite-difference check of the whole model loss on the fixture document
/// with dropout off. Every parameter, the embedding table included, is covered.
inline nd::GradReport model_gradcheck(std::uint64_t seed, const GradcheckSizes &sizes = {}, double eps = 1e-5) {
  std::vector<std::string> labels;
  for (std::size_t r = 0; r < sizes.n_r; ++r) labels.push_back("r" + std::to_string(r));
  const RelationVocab relations(labels);
  const std::vector<Document> docs{gradcheck_document()};
  const Vocab vocab = build_vocab(docs);

  CferConfig cfg;
  cfg.d_emb = sizes.d_emb;
  cfg.d_h = sizes.d_h;
  cfg.sublayers = sizes.sublayers;
  cfg.n_blocks = sizes.n_blocks;
  cfg.n_r = sizes.n_r;
  cfg.dropout_dcgcn = 0.0;
  cfg.dropout_other = 0.0;

  const CferParams params = init_params(cfg, load_embeddings("", vocab, cfg.d_emb, seed), seed);
  const auto prep = prepare_corpus(docs, vocab, relations, cfg);
  const CferModel model(cfg, params.layout);
  std::vector<nd::Tensor> values = params.store.values();
  std::vector<nd::CheckedParam> checked;
  for (std::size_t i = 0; i < values.size(); ++i) checked.push_back({params.store[i].name, &values[i]});
  return nd::grad_check(
      [&](nd::Tape &tape, std::span<const nd::Var> leaves) {
        BoundParams bp;
        bp.vars.assign(leaves.begin(), leaves.end());
        ForwardContext ctx{nd::Mode::Eval, seed, 0, 0, 0};
        return *model.forward(tape, bp, prep[0], ctx, true).loss;
      },
      checked, eps);
}

} // namespace cfer
