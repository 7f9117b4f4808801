// uql: command line front end for the experiment harness.
#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "uql/experiment.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.overrides, "override a config entry, e.g. --set epochs=10");
  cmd->add_option("--seed", opts.seed, "master seed");
  cmd->add_option("--out", opts.out, "output directory");
}

uql::ExperimentConfig build_config(const CommonOptions& opts) {
  std::string text;
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    if (!in) throw std::invalid_argument("cannot open config " + opts.config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str() + "\n";
  }
  for (const auto& o : opts.overrides) text += o + "\n";
  uql::ExperimentConfig cfg = uql::parse_config(text);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.output_dir = *opts.out;
  uql::validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty quantification for synthetic deepfake detectors"};
  app.require_subcommand(1);
  CommonOptions opts;

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"gen-data", "write the synthetic benchmark as PPM images plus labels.csv"},
      {"train", "train the deterministic detector (det.ckpt)"},
      {"convert", "MOPED-convert det.ckpt and fine-tune the Bayesian detector (bnn.ckpt)"},
      {"eval", "evaluate checkpoints on the test split (report_*.csv, summary.csv)"},
      {"retention", "retention curve and density histogram from report_uq.csv"},
      {"binary", "per-generator (or all-vs-real) binary detection"},
      {"source", "multi-class source detection"},
      {"loo", "leave-one-generator-out detection"},
      {"region", "train with a region mask and compare against the full face"},
      {"ablate", "hyperparameter ablation along one axis"},
      {"attack", "FGSM transfer attack from the deterministic surrogate"},
      {"maps", "saliency, Bayesian saliency and uncertainty maps"},
      {"run", "run the task named in the config"},
  };
  for (const auto& c : commands) add_common(app.add_subcommand(c.name, c.help), opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    uql::ExperimentConfig cfg = build_config(opts);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-data") {
      uql::run_gen_data(cfg);
    } else if (cmd == "train") {
      uql::run_train_step(cfg);
    } else if (cmd == "convert") {
      uql::run_convert_step(cfg);
    } else if (cmd == "eval") {
      uql::run_eval_step(cfg);
    } else if (cmd == "retention") {
      uql::run_retention_step(cfg);
    } else if (cmd == "binary") {
      if (cfg.task != uql::Task::binary_all) cfg.task = uql::Task::binary_per_generator;
      uql::run_binary(cfg);
    } else if (cmd == "source") {
      cfg.task = uql::Task::source_detection;
      uql::run_source_detection(cfg);
    } else if (cmd == "loo") {
      cfg.task = uql::Task::loo;
      uql::run_loo(cfg);
    } else if (cmd == "region") {
      cfg.task = uql::Task::region;
      uql::run_region(cfg);
    } else if (cmd == "ablate") {
      cfg.task = uql::Task::ablation;
      uql::run_ablation(cfg);
    } else if (cmd == "attack") {
      cfg.task = uql::Task::attack;
      uql::run_attack(cfg);
    } else if (cmd == "maps") {
      cfg.task = uql::Task::maps;
      uql::run_maps(cfg);
    } else {
      uql::run_task(cfg);
    }
    std::cout << "wrote " << cfg.output_dir << '\n';
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "uql: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "uql: " << e.what() << '\n';
    return 2;
  }
}
