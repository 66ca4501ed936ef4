// SPDX-License-Identifier: Apache-2.0
// cfer_synth: write a planted-pattern corpus and its relation vocabulary.
#include <CLI11.hpp>

#include <iostream>

#include "cfer/synthetic.hpp"

int main(int argc, char **argv) {
  CLI::App app{"Generate a synthetic document corpus"};
  cfer::SyntheticSpec spec;
  std::string out, relations_out;
  app.add_option("--out", out, "dataset JSON path")->required();
  app.add_option("--relations", relations_out, "relation vocabulary path");
  app.add_option("--documents", spec.documents, "number of documents");
  app.add_option("--seed", spec.seed, "generator seed");
  app.add_option("--prefix", spec.id_prefix, "document id prefix");
  CLI11_PARSE(app, argc, argv);
  try {
    cfer::save_dataset(cfer::synthetic_corpus(spec), out);
    if (!relations_out.empty()) cfer::synthetic_relations().save(relations_out);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
