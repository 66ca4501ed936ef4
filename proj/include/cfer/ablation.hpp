// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cfer/pipeline.hpp"

namespace cfer {

/// Shared inputs of every ablation run; only the ablation flags change.
struct AblationSetup {
  CferConfig model;
  TrainConfig train;
  std::vector<Document> train_docs;
  std::vector<Document> dev_docs;
  RelationVocab relations;
  std::string embeddings_path;
  std::size_t min_freq = 1;
};

struct AblationRow {
  Variant variant = Variant::Full;
  std::string label;
  double f1 = 0.0;    // best dev micro F1
  double delta = 0.0; // f1 minus that of the full model
  bool degenerate = false;
  EvalReport report;  // dev report of the best checkpoint
};

struct VariantRun {
  double f1 = 0.0;
  EvalReport report;
};

/// Trains one variant with the setup's seed and reports its best dev state.
inline VariantRun train_variant(Variant v, const AblationSetup &s, std::ostream *log = nullptr) {
  CferConfig cfg = s.model;
  cfg.ablation = variant_flags(v);
  Trainer t = make_trainer(cfg, s.train, s.train_docs, s.relations, s.embeddings_path, s.min_freq);
  FitResult fit = t.fit(s.train_docs, s.dev_docs, log);
  const LoadedModel m = LoadedModel::from(fit.best);
  return {fit.best.dev_f1, report_for(m, s.dev_docs, fit.best.thresholds, &s.train_docs)};
}

/// One ablation table row. The full model is trained as the reference unless
/// its dev F1 is supplied.
inline AblationRow run_ablation(Variant v, const AblationSetup &s, std::optional<double> full_f1 = std::nullopt,
                                std::ostream *log = nullptr) {
  AblationRow row;
  row.variant = v;
  row.label = variant_label(v);
  row.degenerate = v == Variant::NoBoth;
  VariantRun run = train_variant(v, s, log);
  row.f1 = run.f1;
  row.report = std::move(run.report);
  if (v == Variant::Full) {
    row.delta = 0.0;
  } else {
    if (!full_f1) full_f1 = train_variant(Variant::Full, s, log).f1;
    row.delta = row.f1 - *full_f1;
  }
  return row;
}

/// variant, label, F1 and delta in percentage points, note.
inline void write_ablation_row(std::ostream &os, const AblationRow &r) {
  char f1[32], delta[32];
  std::snprintf(f1, sizeof f1, "%.2f", 100.0 * r.f1);
  std::snprintf(delta, sizeof delta, "%+.2f", 100.0 * r.delta);
  os << "variant\tlabel\tf1\tdelta\tnote\n";
  os << variant_name(r.variant) << '\t' << r.label << '\t' << f1 << '\t' << (r.variant == Variant::Full ? "0.00" : delta)
     << '\t' << (r.degenerate ? "degenerate baseline (no graph, no paths)" : "-") << '\n';
}

} // namespace cfer
