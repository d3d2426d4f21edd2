// SPDX-License-Identifier: Apache-2.0
//
// mlkd: nighttime-tracking distillation toolkit.
//
//   mlkd gen-data  synthesize train/eval sequence datasets
//   mlkd train     run one training mode (teacher or students)
//   mlkd eval      one-pass evaluation + comparison table
//   mlkd ablate    full pipeline: teacher, baselines, mutual cohort, table
//
// Configuration comes from an optional JSON file (--config) with individual
// flags applied on top. Exit codes: 0 success, 2 config/usage error,
// 1 internal error.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mlkd/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::string mode;
  std::vector<std::string> attributes;
  uint64_t seed = 0;
  bool seed_set = false;
  bool out_set = false;
  bool mode_set = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file; flags override its fields");
  cmd->add_option("--seed", f.seed, "master RNG seed")->each([&](const std::string&) {
    f.seed_set = true;
  });
  cmd->add_option("--out", f.out, "output directory")->each([&](const std::string&) {
    f.out_set = true;
  });
  cmd->add_option("--mode", f.mode, "training mode")->each([&](const std::string&) {
    f.mode_set = true;
  });
  cmd->add_option("--attributes", f.attributes,
                  "attribute names: restricts eval sequences / sets the generation mix");
}

// File first, flags second.
mlkd::RunConfig resolve(const CommonFlags& f, const std::string& subcommand) {
  mlkd::RunConfig cfg;
  if (!f.config_path.empty()) cfg = mlkd::load_run_config(f.config_path);
  if (f.seed_set) cfg.seed = f.seed;
  if (f.out_set) cfg.out = f.out;
  if (f.mode_set) cfg.mode = f.mode;
  if (!f.attributes.empty()) {
    if (subcommand == "gen-data") cfg.data.attribute_mix = f.attributes;
    else cfg.attributes = f.attributes;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mutual-learning knowledge distillation for nighttime tracking"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, ablate_f;
  CLI::App* gen = app.add_subcommand("gen-data", "synthesize the sequence datasets");
  CLI::App* train = app.add_subcommand("train", "run one training mode");
  CLI::App* eval = app.add_subcommand("eval", "evaluate checkpoints, emit reports");
  CLI::App* ablate = app.add_subcommand("ablate", "full train-everything ablation pipeline");
  add_common(gen, gen_f);
  add_common(train, train_f);
  add_common(eval, eval_f);
  add_common(ablate, ablate_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      mlkd::cmd_gen_data(resolve(gen_f, "gen-data"));
    } else if (train->parsed()) {
      mlkd::cmd_train(resolve(train_f, "train"));
    } else if (eval->parsed()) {
      mlkd::cmd_eval(resolve(eval_f, "eval"));
    } else if (ablate->parsed()) {
      mlkd::cmd_ablate(resolve(ablate_f, "ablate"));
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
