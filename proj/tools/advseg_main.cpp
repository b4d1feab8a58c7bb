#include <CLI11.hpp>

#include <iostream>

#include "advseg/errors.hpp"
#include "advseg/harness.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  bool force = false;
  bool quiet = false;
  std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out, "Experiment root directory (defaults to output_dir in the config)");
  cmd->add_flag("--force", args.force, "Overwrite a non-empty stage directory");
  cmd->add_flag("--quiet", args.quiet, "Suppress progress output");
  cmd->add_option("--seed-override", args.seed_override, "Data seed v; weights use v+1 and folds v+2");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial attacks on a toy segmentation model and uncertainty-based detection"};
  app.require_subcommand(1);
  CommonArgs args;
  using Stage = void (*)(const advseg::ExperimentConfig&, const advseg::ExperimentLayout&, const advseg::StageOptions&);
  const std::vector<std::tuple<std::string, std::string, Stage>> verbs{
      {"generate", "Render the synthetic dataset and its split", advseg::cmd_generate},
      {"train", "Train the segmentation network", advseg::cmd_train},
      {"attack", "Run the attack suite on the test split", advseg::cmd_attack},
      {"detect", "Fit and cross-validate the detectors", advseg::cmd_detect},
      {"report", "Summarize results grouped by attack family", advseg::cmd_report},
  };
  std::vector<std::pair<CLI::App*, Stage>> commands;
  for (const auto& [name, help, fn] : verbs) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, args);
    commands.emplace_back(cmd, fn);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    advseg::ExperimentConfig config = args.config.empty() ? advseg::ExperimentConfig{}
                                                          : advseg::load_experiment_config(args.config);
    if (args.seed_override) config.override_seed(*args.seed_override);
    const std::string root = args.out.empty() ? config.output_dir : args.out;
    if (root.empty()) throw advseg::ConfigError("no output directory: pass --out or set output_dir");
    const advseg::ExperimentLayout layout{root};
    const advseg::StageOptions options{args.force, args.quiet};
    for (const auto& [cmd, fn] : commands) {
      if (cmd->parsed()) fn(config, layout, options);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return advseg::exit_code_for(e);
  }
  return 0;
}
