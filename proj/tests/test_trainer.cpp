// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <sstream>

#include "cfer/pipeline.hpp"
#include "cfer/synthetic.hpp"

using namespace cfer;

namespace {

struct Setup {
  std::vector<Document> train = synthetic_corpus({6, 11});
  std::vector<Document> dev = synthetic_corpus({3, 12});
  RelationVocab relations = synthetic_relations();
  CferConfig model;
  TrainConfig tc;

  Setup() {
    model.d_emb = 6;
    model.d_h = 8;
    model.sublayers = 2;
    model.dropout_dcgcn = 0.3;
    model.dropout_other = 0.2;
    tc.batch_size = 4;
    tc.epochs = 4;
    tc.peak_lr = 1e-2;
    tc.ema_decay = 0.9;
    tc.seed = 3;
  }

  Trainer make() const { return make_trainer(model, tc, train, relations); }
};

std::string bytes(const Checkpoint &c) {
  std::ostringstream os;
  write_checkpoint(os, c);
  return os.str();
}

} // namespace

TEST_CASE("training is bitwise reproducible") {
  Setup s;
  Trainer a = s.make(), b = s.make();
  const FitResult ra = a.fit(s.train, s.dev), rb = b.fit(s.train, s.dev);
  REQUIRE(bytes(ra.best) == bytes(rb.best));
  REQUIRE(a.params() == b.params());
  REQUIRE(ra.history.size() == 4);
  for (std::size_t i = 0; i < ra.history.size(); ++i) REQUIRE(ra.history[i].mean_loss == rb.history[i].mean_loss);
}

TEST_CASE("worker count does not change the result") {
  Setup s;
  Trainer one = s.make();
  s.tc.workers = 3;
  Trainer three = s.make();
  one.fit(s.train, s.dev);
  three.fit(s.train, s.dev);
  REQUIRE(one.params() == three.params());
  REQUIRE(one.ema().shadow == three.ema().shadow);
}

TEST_CASE("resuming from a snapshot continues the same trajectory") {
  Setup s;
  Trainer straight = s.make();
  const auto prep = straight.prepare(s.train);
  for (int e = 0; e < 4; ++e) straight.train_epoch(prep);

  Trainer first = s.make();
  first.train_epoch(prep);
  first.train_epoch(prep);
  std::istringstream is(bytes(first.snapshot()));
  Trainer resumed(read_checkpoint(is));
  REQUIRE(resumed.epochs_done() == 2);
  const auto prep2 = resumed.prepare(s.train);
  resumed.train_epoch(prep2);
  resumed.train_epoch(prep2);
  REQUIRE(resumed.params() == straight.params());
  REQUIRE(resumed.ema().shadow == straight.ema().shadow);
  REQUIRE(resumed.optim().step == straight.optim().step);
}

TEST_CASE("training reduces the loss on the synthetic corpus") {
  Setup s;
  s.model.dropout_dcgcn = 0;
  s.model.dropout_other = 0;
  s.tc.epochs = 15;
  Trainer t = s.make();
  const auto fit = t.fit(s.train, s.dev);
  REQUIRE(fit.history.back().mean_loss < fit.history.front().mean_loss);
  REQUIRE(fit.best.epoch >= 1);
  REQUIRE(fit.best.thresholds.delta.size() == s.relations.size());
}

TEST_CASE("a non-finite loss stops training with the batch documents named") {
  Setup s;
  s.model.n_r = s.relations.size();
  Vocab vocab = build_vocab(s.train);
  EmbeddingTable emb = load_embeddings("", vocab, s.model.d_emb, 1);
  emb.matrix.at(2, 0) = std::numeric_limits<double>::quiet_NaN();
  Trainer t(s.model, s.tc, vocab, s.relations, emb);
  REQUIRE_THROWS_MATCHES(t.fit(s.train, s.dev), TrainingError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("synth-11-")));
}

TEST_CASE("fit needs a dev set and a matching relation count") {
  Setup s;
  Trainer t = s.make();
  REQUIRE_THROWS_AS(t.fit(s.train, {}), ConfigError);
  s.model.n_r = 2;
  Vocab vocab = build_vocab(s.train);
  REQUIRE_THROWS_AS(Trainer(s.model, s.tc, vocab, s.relations, load_embeddings("", vocab, s.model.d_emb, 1)),
                    ConfigError);
}

TEST_CASE("a checkpoint with a mismatched config is rejected") {
  Setup s;
  Checkpoint ck = s.make().snapshot();
  ck.model.d_h = 12;
  ck.model.sublayers = 3;
  REQUIRE_THROWS_AS(Trainer(ck), CheckpointError);
}
