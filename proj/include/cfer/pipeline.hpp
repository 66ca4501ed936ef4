// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cfer/config.hpp"
#include "cfer/corpus.hpp"
#include "cfer/evaluator.hpp"
#include "cfer/trainer.hpp"

namespace cfer {

inline std::string read_text_file(const std::string &path, const std::string &what) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + what + " '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Relation labels from the vocabulary file when given, otherwise the sorted
/// labels used in the training file.
inline RelationVocab resolve_relations(const std::string &relations_path, const std::string &train_path) {
  if (!relations_path.empty()) return RelationVocab::load(relations_path);
  const std::string text = read_text_file(train_path, "dataset");
  try {
    return relations_from_corpus(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception &ex) {
    throw ParseError(train_path + ": " + ex.what());
  }
}

/// A fresh trainer for a training corpus: vocabulary from the training
/// documents, embeddings from the configured file (or random), n_r from the
/// relation vocabulary.
inline Trainer make_trainer(CferConfig model, const TrainConfig &train, const std::vector<Document> &train_docs,
                            const RelationVocab &relations, const std::string &embeddings_path = "",
                            std::size_t min_freq = 1) {
  model.n_r = relations.size();
  Vocab vocab = build_vocab(train_docs, static_cast<int>(min_freq));
  const EmbeddingTable emb = load_embeddings(embeddings_path, vocab, model.d_emb, train.seed);
  return Trainer(std::move(model), train, std::move(vocab), relations, emb);
}

/// Everything evaluation needs from a checkpoint.
struct LoadedModel {
  CferModel model;
  Vocab vocab;
  RelationVocab relations;
  std::vector<nd::Tensor> weights; // EMA shadow
  Thresholds thresholds;
  std::uint64_t seed = 0;

  static LoadedModel from(const Checkpoint &ck) {
    Trainer t(ck);
    return {t.model(), t.vocab(), t.relations(), ck.shadow, ck.thresholds, ck.train.seed};
  }

  std::vector<PreparedDoc> prepare(const std::vector<Document> &docs) const {
    return prepare_corpus(docs, vocab, relations, model.config());
  }
};

/// Scores `docs` with the model and reports every metric. Ign F1 is taken
/// against `train_docs` when given.
inline EvalReport report_for(const LoadedModel &m, const std::vector<Document> &docs, const Thresholds &th,
                             const std::vector<Document> *train_docs = nullptr) {
  const auto prep = m.prepare(docs);
  const auto scored = score_documents(m.model, m.weights, prep, m.seed);
  std::optional<NameFactSet> names;
  if (train_docs) names = train_fact_names(*train_docs);
  return evaluate(scored, th, {docs, &m.relations, names ? &*names : nullptr, std::nullopt});
}

} // namespace cfer
