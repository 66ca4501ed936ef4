// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cfer/ablation.hpp"
#include "cfer/checkpoint.hpp"
#include "cfer/config.hpp"
#include "cfer/docgraph.hpp"
#include "cfer/model_check.hpp"
#include "cfer/pipeline.hpp"

namespace cfer {

inline constexpr double kGradcheckTolerance = 1e-4;

/// Parsed command-line flags. Unset optionals leave the config file values.
struct CliArgs {
  std::string config;
  std::string train, dev, test;
  std::string out;
  std::string ckpt;
  std::string variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<double> thresholds;
  double eps = 1e-5;
};

/// Config file (when given) with command-line overrides applied.
inline RunConfig resolve_config(const CliArgs &a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  if (!a.train.empty()) rc.train_path = a.train;
  if (!a.dev.empty()) rc.dev_path = a.dev;
  if (!a.test.empty()) rc.test_path = a.test;
  if (!a.ckpt.empty()) rc.train.checkpoint = a.ckpt;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.workers) rc.train.workers = *a.workers;
  return rc;
}

inline void require_path(const std::string &path, const std::string &flag, const std::string &command) {
  if (path.empty()) throw ConfigError(command + ": no " + flag + " given");
}

/// The file an inference command reads: test, else dev, else train.
inline std::string data_path(const RunConfig &rc, const std::string &command) {
  for (const std::string *p : {&rc.test_path, &rc.dev_path, &rc.train_path})
    if (!p->empty()) return *p;
  throw ConfigError(command + ": no data file given (use --test, --dev or --train)");
}

inline void print_report(std::ostream &out, const EvalReport &r) {
  write_report_tsv(out, r);
  out << report_json(r).dump(2) << '\n';
}

inline int cmd_train(const CliArgs &a, std::ostream &out) {
  RunConfig rc = resolve_config(a);
  require_path(rc.train_path, "--train", "train");
  require_path(rc.dev_path, "--dev", "train");
  std::string ckpt_path = !a.out.empty() ? a.out : rc.train.checkpoint;
  if (ckpt_path.empty() && !rc.output_dir.empty()) ckpt_path = rc.output_dir + "/model.ckpt";
  require_path(ckpt_path, "--out", "train");

  const RelationVocab relations = resolve_relations(rc.relations_path, rc.train_path);
  const auto train_docs = load_dataset(rc.train_path, relations);
  const auto dev_docs = load_dataset(rc.dev_path, relations);
  Trainer trainer = make_trainer(rc.model, rc.train, train_docs, relations, rc.embeddings_path, rc.min_freq);
  FitResult fit = trainer.fit(train_docs, dev_docs, &out);
  save_checkpoint(ckpt_path, fit.best);
  out << "checkpoint\t" << ckpt_path << "\tepoch " << fit.best.epoch << '\n';
  print_report(out, report_for(LoadedModel::from(fit.best), dev_docs, fit.best.thresholds, &train_docs));
  return 0;
}

inline int cmd_eval(const CliArgs &a, std::ostream &out) {
  const RunConfig rc = resolve_config(a);
  require_path(a.ckpt, "--ckpt", "eval");
  const LoadedModel m = LoadedModel::from(load_checkpoint(a.ckpt));
  const auto docs = load_dataset(data_path(rc, "eval"), m.relations);
  std::optional<std::vector<Document>> train_docs;
  if (!rc.train_path.empty()) train_docs = load_dataset(rc.train_path, m.relations);
  const Thresholds th = a.thresholds ? Thresholds::global(m.relations.size(), *a.thresholds) : m.thresholds;
  print_report(out, report_for(m, docs, th, train_docs ? &*train_docs : nullptr));
  return 0;
}

/// Prediction file: a "# predictions" section of
///   doc_id, head, relation, tail, probability
/// lines for every decided fact, then a "# attention" section of
///   doc_id, head, tail, path index, node list, alpha
/// lines for every path the model used.
inline void write_predictions(std::ostream &os, const LoadedModel &m, const std::vector<Document> &docs,
                              const Thresholds &th) {
  const auto prep = m.prepare(docs);
  const auto outputs = predict_documents(m.model, m.weights, prep, m.seed);
  char buf[32];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return std::string(buf);
  };
  os << "# predictions\n";
  for (std::size_t d = 0; d < prep.size(); ++d)
    for (const auto &o : outputs[d])
      for (std::size_t r = 0; r < o.probabilities.size(); ++r)
        if (o.probabilities[r] > th.delta[r])
          os << docs[d].doc_id << '\t' << o.head << '\t' << m.relations.label(r) << '\t' << o.tail << '\t'
             << num(o.probabilities[r]) << '\n';
  os << "# attention\n";
  for (std::size_t d = 0; d < prep.size(); ++d)
    for (std::size_t k = 0; k < outputs[d].size(); ++k) {
      const PairOutput &o = outputs[d][k];
      for (std::size_t i = 0; i < o.path_ids.size(); ++i) {
        const Path &p = prep[d].paths[k][o.path_ids[i]];
        std::string nodes;
        for (int n : p.nodes) nodes += (nodes.empty() ? "" : ",") + std::to_string(n);
        os << docs[d].doc_id << '\t' << o.head << '\t' << o.tail << '\t' << o.path_ids[i] << '\t' << nodes << '\t'
           << num(o.alpha[i]) << '\n';
      }
    }
}

inline int cmd_predict(const CliArgs &a, std::ostream &out) {
  const RunConfig rc = resolve_config(a);
  require_path(a.ckpt, "--ckpt", "predict");
  const LoadedModel m = LoadedModel::from(load_checkpoint(a.ckpt));
  const auto docs = load_dataset(data_path(rc, "predict"), m.relations);
  const Thresholds th = a.thresholds ? Thresholds::global(m.relations.size(), *a.thresholds) : m.thresholds;
  if (a.out.empty()) {
    write_predictions(out, m, docs, th);
    return 0;
  }
  std::ofstream file(a.out);
  if (!file) throw Error("cannot write predictions '" + a.out + "'");
  write_predictions(file, m, docs, th);
  out << "predictions\t" << a.out << '\n';
  return 0;
}

inline int cmd_graph(const CliArgs &a, std::ostream &out) {
  const RunConfig rc = resolve_config(a);
  const std::string path = data_path(rc, "graph");
  const RelationVocab relations = resolve_relations(rc.relations_path, path);
  write_graph_stats(out, graph_stats(load_dataset(path, relations)));
  return 0;
}

inline int cmd_gradcheck(const CliArgs &a, std::ostream &out) {
  const nd::GradReport rep = model_gradcheck(a.seed.value_or(1), {}, a.eps);
  out << "parameter\tmax_rel_error\n";
  for (const auto &[name, err] : rep.max_rel_error) out << name << '\t' << detail::fmt_sci(err) << '\n';
  out << "global\t" << detail::fmt_sci(rep.global_max) << '\n';
  out << "coordinates\t" << rep.coordinates << '\n';
  out << "eps\t" << detail::fmt_sci(a.eps) << '\n';
  const bool ok = rep.passes(kGradcheckTolerance);
  out << "status\t" << (ok ? "PASS" : "FAIL") << " (tolerance " << detail::fmt_sci(kGradcheckTolerance) << ")\n";
  return ok ? 0 : 1;
}

inline int cmd_ablate(const CliArgs &a, std::ostream &out) {
  const auto v = parse_variant(a.variant);
  if (!v) throw ConfigError("unknown variant '" + a.variant + "'; valid names: " + variant_names_list());
  RunConfig rc = resolve_config(a);
  require_path(rc.train_path, "--train", "ablate");
  require_path(rc.dev_path, "--dev", "ablate");
  AblationSetup s;
  s.model = rc.model;
  s.train = rc.train;
  s.relations = resolve_relations(rc.relations_path, rc.train_path);
  s.train_docs = load_dataset(rc.train_path, s.relations);
  s.dev_docs = load_dataset(rc.dev_path, s.relations);
  s.embeddings_path = rc.embeddings_path;
  s.min_freq = rc.min_freq;
  const AblationRow row = run_ablation(*v, s);
  write_ablation_row(out, row);
  print_report(out, row.report);
  return 0;
}

} // namespace cfer
