// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cfer/checkpoint.hpp"
#include "cfer/corpus.hpp"
#include "cfer/evaluator.hpp"
#include "cfer/model.hpp"
#include "cfer/optim.hpp"

namespace cfer {

/// Eval-mode outputs for every document, in document order.
inline std::vector<std::vector<PairOutput>> predict_documents(const CferModel &model, std::span<const nd::Tensor> values,
                                                              std::span<const PreparedDoc> docs, std::uint64_t seed) {
  std::vector<std::vector<PairOutput>> out;
  out.reserve(docs.size());
  for (const auto &d : docs) out.push_back(model.predict(values, d, seed));
  return out;
}

inline std::vector<ScoredPair> to_scored(std::span<const PreparedDoc> docs,
                                         const std::vector<std::vector<PairOutput>> &outputs) {
  std::vector<ScoredPair> s;
  for (std::size_t i = 0; i < docs.size(); ++i)
    for (const auto &o : outputs[i]) s.push_back({docs[i].doc->doc_id, o.head, o.tail, o.probabilities});
  return s;
}

inline std::vector<ScoredPair> score_documents(const CferModel &model, std::span<const nd::Tensor> values,
                                               std::span<const PreparedDoc> docs, std::uint64_t seed) {
  return to_scored(docs, predict_documents(model, values, docs, seed));
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double dev_f1 = 0.0;
  bool improved = false;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochLog> history;
};

/// Owns parameters, optimizer and EMA state. Each epoch shuffles the training
/// documents, takes one AdamW step per batch on the mean document gradient,
/// updates the EMA shadow, then scores the dev set with the shadow, refits the
/// thresholds and keeps the best state by dev micro F1.
class Trainer {
public:
  Trainer(CferConfig model_cfg, TrainConfig train_cfg, Vocab vocab, RelationVocab relations, const EmbeddingTable &emb)
      : cfg_(std::move(model_cfg)), tcfg_(std::move(train_cfg)), vocab_(std::move(vocab)),
        relations_(std::move(relations)) {
    tcfg_.validate();
    if (cfg_.n_r != relations_.size())
      throw ConfigError("model n_r (" + std::to_string(cfg_.n_r) + ") differs from the relation vocabulary size (" +
                        std::to_string(relations_.size()) + ")");
    CferParams p = init_params(cfg_, emb, tcfg_.seed);
    layout_ = p.layout;
    for (const auto &param : p.store) {
      names_.push_back(param.name);
      params_.push_back(param.value);
    }
    optim_ = OptimState::zeros_like(params_);
    ema_ = EmaState::init(params_, tcfg_.ema_decay);
    thresholds_ = Thresholds::global(relations_.size(), kFallbackThreshold);
  }

  /// Continues from a saved state. The training settings may be replaced
  /// (for example a different checkpoint path or worker count).
  explicit Trainer(const Checkpoint &ck, std::optional<TrainConfig> train_cfg = std::nullopt)
      : cfg_(ck.model), tcfg_(train_cfg ? *train_cfg : ck.train), vocab_(Vocab::from_tokens(ck.vocab)),
        relations_(ck.relations), names_(ck.names), params_(ck.params), thresholds_(ck.thresholds),
        epoch_(ck.epoch), best_f1_(ck.dev_f1) {
    tcfg_.validate();
    layout_ = rebuild_layout();
    optim_.m = ck.adam_m;
    optim_.v = ck.adam_v;
    optim_.step = ck.adam_step;
    ema_.shadow = ck.shadow;
    ema_.decay = tcfg_.ema_decay;
    best_ = ck;
  }

  const CferConfig &model_config() const { return cfg_; }
  const TrainConfig &train_config() const { return tcfg_; }
  const Vocab &vocab() const { return vocab_; }
  const RelationVocab &relations() const { return relations_; }
  const std::vector<std::string> &names() const { return names_; }
  const std::vector<nd::Tensor> &params() const { return params_; }
  const EmaState &ema() const { return ema_; }
  const OptimState &optim() const { return optim_; }
  std::size_t epochs_done() const { return epoch_; }
  CferModel model() const { return CferModel(cfg_, layout_); }

  Checkpoint snapshot() const {
    Checkpoint c;
    c.model = cfg_;
    c.train = tcfg_;
    c.vocab = vocab_.tokens();
    c.relations = relations_.labels();
    c.names = names_;
    c.params = params_;
    c.shadow = ema_.shadow;
    c.adam_m = optim_.m;
    c.adam_v = optim_.v;
    c.adam_step = optim_.step;
    c.epoch = epoch_;
    c.dev_f1 = best_f1_ < 0.0 ? 0.0 : best_f1_;
    c.thresholds = thresholds_;
    return c;
  }

  std::vector<PreparedDoc> prepare(const std::vector<Document> &docs) const {
    return prepare_corpus(docs, vocab_, relations_, cfg_);
  }

  std::size_t total_steps(std::size_t n_train) const {
    const std::size_t per_epoch = (n_train + tcfg_.batch_size - 1) / tcfg_.batch_size;
    return per_epoch * tcfg_.epochs;
  }

  /// One pass over the training documents; returns the mean document loss.
  double train_epoch(std::span<const PreparedDoc> train) {
    const std::size_t epoch = epoch_ + 1;
    const CferModel model = this->model();
    const std::size_t total = total_steps(train.size());
    const AdamHyper hp = AdamHyper::from(tcfg_);
    double loss_sum = 0.0;
    std::size_t loss_docs = 0;
    for (auto batch : make_batches(train.size(), tcfg_.batch_size, derive_seed({tcfg_.seed, 0x6261746368ULL, epoch}))) {
      std::sort(batch.begin(), batch.end());
      std::vector<std::optional<CferModel::Gradient>> results(batch.size());
      run_parallel(batch.size(), [&](std::size_t i) {
        const PreparedDoc &doc = train[batch[i]];
        if (doc.pairs.empty()) return;
        ForwardContext ctx{nd::Mode::Train, tcfg_.seed, epoch, doc.index, 0};
        results[i] = model.gradient(params_, doc, ctx);
      });
      std::vector<nd::Tensor> grads;
      std::size_t used = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (!results[i]) continue;
        if (!std::isfinite(results[i]->loss)) throw TrainingError(non_finite_message(train, batch, epoch));
        loss_sum += results[i]->loss;
        ++loss_docs;
        if (used++ == 0) {
          grads = std::move(results[i]->grads);
        } else {
          for (std::size_t k = 0; k < grads.size(); ++k) grads[k].add_(results[i]->grads[k]);
        }
      }
      if (used == 0) continue;
      for (auto &g : grads) g.scale_(1.0 / static_cast<double>(used));
      const double lr = lr_at(optim_.step + 1, total, tcfg_.warmup_frac, tcfg_.peak_lr);
      adamw_step(params_, grads, optim_, lr, hp);
      ema_update(ema_, params_);
    }
    epoch_ = epoch;
    return loss_docs ? loss_sum / static_cast<double>(loss_docs) : 0.0;
  }

  /// Dev micro F1 of the EMA weights with thresholds refit on the dev set.
  std::pair<double, Thresholds> evaluate_shadow(std::span<const PreparedDoc> dev, std::span<const Document> dev_docs) const {
    const auto scored = score_documents(model(), ema_.shadow, dev, tcfg_.seed);
    const FactSet gold = gold_facts(dev_docs, relations_);
    Thresholds th = select_thresholds(scored, gold, relations_.size());
    return {micro_f1(decide(scored, th), gold).f1, std::move(th)};
  }

  /// Trains until `epochs` epochs are done in total, evaluating after each.
  FitResult fit(const std::vector<Document> &train, const std::vector<Document> &dev, std::ostream *log = nullptr) {
    if (dev.empty()) throw ConfigError("fit: the dev set is empty");
    const auto train_prep = prepare(train);
    const auto dev_prep = prepare(dev);
    FitResult out;
    while (epoch_ < tcfg_.epochs) {
      EpochLog e;
      e.mean_loss = train_epoch(train_prep);
      e.epoch = epoch_;
      auto [f1, th] = evaluate_shadow(dev_prep, dev);
      e.dev_f1 = f1;
      if (f1 > best_f1_) {
        best_f1_ = f1;
        thresholds_ = std::move(th);
        best_ = snapshot();
        e.improved = true;
      }
      if (log) {
        *log << "epoch " << e.epoch << "\tloss " << format_double(e.mean_loss) << "\tdev_f1 " << format_double(e.dev_f1)
             << (e.improved ? "\tbest" : "") << '\n';
      }
      out.history.push_back(e);
    }
    out.best = best_ ? *best_ : snapshot();
    return out;
  }

private:
  CferLayout rebuild_layout() const {
    EmbeddingTable emb{nd::Tensor({vocab_.size(), cfg_.d_emb}), cfg_.d_emb};
    CferParams p = init_params(cfg_, emb, 0);
    if (p.store.size() != names_.size()) throw CheckpointError("checkpoint parameter count does not match its config");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (p.store[i].name != names_[i])
        throw CheckpointError("checkpoint parameter '" + names_[i] + "' where '" + p.store[i].name + "' was expected");
      if (p.store[i].value.shape() != params_[i].shape())
        throw CheckpointError("checkpoint parameter '" + names_[i] + "' has shape " + nd::shape_str(params_[i].shape()) +
                              ", expected " + nd::shape_str(p.store[i].value.shape()));
    }
    return p.layout;
  }

  template <typename F> void run_parallel(std::size_t n, F &&work) const {
    const std::size_t workers = std::min(tcfg_.workers, n);
    if (workers <= 1) {
      for (std::size_t i = 0; i < n; ++i) work(i);
      return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < n; i = next++) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto &t : pool) t.join();
    for (auto &e : errors)
      if (e) std::rethrow_exception(e);
  }

  static std::string non_finite_message(std::span<const PreparedDoc> train, const std::vector<std::size_t> &batch,
                                        std::size_t epoch) {
    std::string ids;
    for (std::size_t i : batch) ids += (ids.empty() ? "" : ", ") + train[i].doc->doc_id;
    return "non-finite loss in epoch " + std::to_string(epoch) + ", batch documents [" + ids + "]";
  }

  CferConfig cfg_;
  TrainConfig tcfg_;
  Vocab vocab_;
  RelationVocab relations_;
  CferLayout layout_;
  std::vector<std::string> names_;
  std::vector<nd::Tensor> params_;
  OptimState optim_;
  EmaState ema_;
  Thresholds thresholds_;
  std::size_t epoch_ = 0;
  double best_f1_ = -1.0;
  std::optional<Checkpoint> best_;
};

} // namespace cfer
