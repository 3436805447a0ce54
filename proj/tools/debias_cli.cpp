// Command-line front end. Settings come from an optional config file, then
// --set overrides, then the per-command shortcut flags (last wins).

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "debias/app.hpp"

namespace {

struct Shortcut {
  const char* flag;
  const char* key;
  const char* help;
};

// Flags offered by every subcommand, each bound to one config key.
const std::vector<Shortcut> kShortcuts{
    {"--data", "paths.data", "input dataset (JSONL)"},
    {"--gold", "paths.gold", "gold dataset for evaluation"},
    {"--predictions", "paths.predictions", "predictions JSONL"},
    {"--preferences", "paths.preferences", "preference pairs JSONL"},
    {"--templates", "paths.templates", "prompt template directory"},
    {"--replay", "paths.replay", "replay store JSONL"},
    {"--policy", "paths.policy", "language model checkpoint"},
    {"--reward", "paths.reward", "reward model checkpoint"},
    {"--out", "paths.out", "output directory"},
    {"--task", "run.task", "detect | classify | mitigate"},
    {"--seed", "run.seed", "random seed"},
};

const std::map<std::string, std::string> kDescriptions{
    {"ingest", "validate, merge and normalize dataset splits"},
    {"build-prefs", "generate counterfactual preference pairs"},
    {"train-dpo", "train a toy policy with the DPO objective"},
    {"train-rm", "train a pairwise reward model"},
    {"decode", "rewrite sentences with a (optionally reward-guided) policy"},
    {"run-cot", "run the structured prompting pipeline for one task"},
    {"eval-detect", "binary F1 of detection predictions"},
    {"eval-classify", "macro F1 of classification predictions"},
    {"eval-mitigate", "corpus BLEU of rewrites against edited references"},
    {"report", "merge evaluation reports into one summary"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Gender-bias detection, classification and mitigation toolkit"};
  cli.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;
  cli.add_option("-c,--config", config_file, "config file (INI style)");
  cli.add_option("--set", overrides, "override, e.g. --set dpo.beta=0.2")->take_all();

  std::map<std::string, std::string> shortcut_values;
  for (const auto& name : debias::app::command_names()) {
    auto* sub = cli.add_subcommand(name, kDescriptions.at(name));
    for (const auto& s : kShortcuts) {
      sub->add_option_function<std::string>(
          s.flag, [&shortcut_values, key = s.key](const std::string& v) { shortcut_values[key] = v; },
          s.help);
    }
    sub->add_option("-c,--config", config_file, "config file (INI style)");
    sub->add_option("--set", overrides, "override, e.g. --set dpo.beta=0.2")->take_all();
  }

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto config = config_file.empty() ? debias::app::RunConfig()
                                      : debias::app::RunConfig::load(config_file);
    for (const auto& o : overrides) config.apply_override(o);
    for (const auto& [key, value] : shortcut_values) config.set(key, value);
    debias::app::run_command(cli.get_subcommands().front()->get_name(), config, std::cerr);
  } catch (const std::exception& e) {
    return debias::app::exit_status_for(e, std::cerr);
  }
  return 0;
}
