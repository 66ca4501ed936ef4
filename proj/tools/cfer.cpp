// SPDX-License-Identifier: Apache-2.0
// cfer: train, eval, predict, graph, gradcheck, ablate.
#include <CLI11.hpp>

#include <functional>
#include <iostream>

#include "cfer/commands.hpp"

int main(int argc, char **argv) {
  CLI::App app{"Coarse-to-fine document-level relation extraction"};
  app.require_subcommand(1);
  cfer::CliArgs args;

  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", args.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", args.seed, "random seed (overrides train.seed)");
    sub->add_option("--workers", args.workers, "gradient worker threads (overrides train.workers)");
  };
  auto add_data = [&](CLI::App *sub) {
    sub->add_option("--train", args.train, "training documents (JSON)");
    sub->add_option("--dev", args.dev, "development documents (JSON)");
    sub->add_option("--test", args.test, "test documents (JSON)");
  };

  std::function<int(const cfer::CliArgs &, std::ostream &)> run;
  auto command = [&](const char *name, const char *help, int (*fn)(const cfer::CliArgs &, std::ostream &)) {
    CLI::App *sub = app.add_subcommand(name, help);
    sub->callback([&run, fn] { run = fn; });
    return sub;
  };

  auto *train = command("train", "train a model and write the best checkpoint", cfer::cmd_train);
  add_common(train);
  add_data(train);
  train->add_option("--out", args.out, "checkpoint path");
  train->add_option("--ckpt", args.ckpt, "checkpoint path (same as train.checkpoint)");

  auto *eval = command("eval", "score a data file with a checkpoint and print every metric", cfer::cmd_eval);
  add_common(eval);
  add_data(eval);
  eval->add_option("--ckpt", args.ckpt, "checkpoint file")->required();
  eval->add_option("--thresholds", args.thresholds, "one global threshold for every relation");

  auto *predict = command("predict", "write decided facts and path attention weights", cfer::cmd_predict);
  add_common(predict);
  add_data(predict);
  predict->add_option("--ckpt", args.ckpt, "checkpoint file")->required();
  predict->add_option("--out", args.out, "output file (stdout when omitted)");
  predict->add_option("--thresholds", args.thresholds, "one global threshold for every relation");

  auto *graph = command("graph", "edge and path statistics of a data file", cfer::cmd_graph);
  add_common(graph);
  add_data(graph);

  auto *grad = command("gradcheck", "finite-difference check of the model gradients", cfer::cmd_gradcheck);
  grad->add_option("--seed", args.seed, "parameter seed");
  grad->add_option("--eps", args.eps, "finite-difference step");

  auto *ablate = command("ablate", "train one ablation variant and report its dev F1 against the full model",
                         cfer::cmd_ablate);
  add_common(ablate);
  add_data(ablate);
  ablate->add_option("--variant", args.variant, "one of: " + cfer::variant_names_list())->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e);
  }
  try {
    return run(args, std::cout);
  } catch (const cfer::Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
