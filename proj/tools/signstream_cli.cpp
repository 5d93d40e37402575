// SPDX-License-Identifier: Apache-2.0

// Operator entry point: wires the library into reproducible experiments
// driven by one JSON config file plus flag overrides.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "signstream/experiment.hpp"

using namespace signstream;

namespace {

struct CliOverrides {
  std::string config_path;
  std::vector<std::string> sets; // section.key=value
  std::string output_dir, dataset_dir, models_dir, checkpoint, adapter, layer_weights;
  std::int64_t seed = -1;
  std::int64_t steps = -1;
  std::string mask_strategy;
  std::string mode;
};

void add_common(CLI::App* cmd, CliOverrides& ov) {
  cmd->add_option("--config", ov.config_path, "experiment config JSON")->required();
  cmd->add_option("--set", ov.sets, "override a config field: section.key=value (JSON value)");
  cmd->add_option("--output-dir", ov.output_dir, "override paths.output_dir");
  cmd->add_option("--dataset-dir", ov.dataset_dir, "override paths.dataset_dir");
  cmd->add_option("--models-dir", ov.models_dir, "override paths.models_dir");
  cmd->add_option("--checkpoint", ov.checkpoint, "override paths.checkpoint");
  cmd->add_option("--adapter", ov.adapter, "override paths.adapter");
  cmd->add_option("--layer-weights", ov.layer_weights,
                  "uniform | last | path to an adapter bundle");
  cmd->add_option("--seed", ov.seed, "override the top-level seed");
  cmd->add_option("--steps", ov.steps, "override train.total_steps");
  cmd->add_option("--mask-strategy", ov.mask_strategy, "override train.mask_strategy");
  cmd->add_option("--mode", ov.mode, "override adapter.mode");
}

nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return nlohmann::json(text); // plain strings need no quoting
  }
}

ExperimentConfig resolve_config(const CliOverrides& ov) {
  std::ifstream f(ov.config_path);
  if (!f) throw ConfigError("cannot open config file: " + ov.config_path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }

  for (const auto& set : ov.sets) {
    const auto eq = set.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects section.key=value, got: " + set);
    const std::string key = set.substr(0, eq);
    const nlohmann::json value = parse_override_value(set.substr(eq + 1));
    const auto dot = key.find('.');
    if (dot == std::string::npos)
      j[key] = value;
    else
      j[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }

  if (!ov.output_dir.empty()) j["paths"]["output_dir"] = ov.output_dir;
  if (!ov.dataset_dir.empty()) j["paths"]["dataset_dir"] = ov.dataset_dir;
  if (!ov.models_dir.empty()) j["paths"]["models_dir"] = ov.models_dir;
  if (!ov.checkpoint.empty()) j["paths"]["checkpoint"] = ov.checkpoint;
  if (!ov.adapter.empty()) j["paths"]["adapter"] = ov.adapter;
  if (!ov.layer_weights.empty()) j["paths"]["layer_weights"] = ov.layer_weights;
  if (ov.seed >= 0) j["seed"] = ov.seed;
  if (ov.steps >= 0) j["train"]["total_steps"] = ov.steps;
  if (!ov.mask_strategy.empty()) j["train"]["mask_strategy"] = ov.mask_strategy;
  if (!ov.mode.empty()) j["adapter"]["mode"] = ov.mode;

  return parse_experiment_config(j);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-stream masked-prediction pretraining toolkit"};
  app.require_subcommand(1);

  CliOverrides ov;
  std::string dump_channel = "face";
  std::vector<int> dump_ids;
  int dump_n = 10;

  CLI::App* gen = app.add_subcommand("gen-synthetic", "generate a synthetic dataset");
  add_common(gen, ov);
  CLI::App* kfit = app.add_subcommand("kmeans-fit", "fit the per-channel codebooks");
  add_common(kfit, ov);
  CLI::App* kassign = app.add_subcommand("kmeans-assign", "write per-frame pseudo-labels");
  add_common(kassign, ov);
  CLI::App* pre = app.add_subcommand("pretrain", "run masked-prediction pretraining");
  add_common(pre, ov);
  CLI::App* extract = app.add_subcommand("extract", "export mixed-layer features");
  add_common(extract, ov);
  CLI::App* fine = app.add_subcommand("finetune", "train a downstream adapter");
  add_common(fine, ov);
  CLI::App* evalc = app.add_subcommand("eval", "evaluate an adapter on a labeled set");
  add_common(evalc, ov);
  CLI::App* ablate = app.add_subcommand("ablate", "masking x adapter comparison grid");
  add_common(ablate, ov);
  CLI::App* dump = app.add_subcommand("dump-clusters", "sample frames per cluster");
  add_common(dump, ov);
  dump->add_option("--channel", dump_channel, "face | left_hand | right_hand | body_pose");
  dump->add_option("--clusters", dump_ids, "cluster ids to sample")->required();
  dump->add_option("--n", dump_n, "samples per cluster");

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = resolve_config(ov);
    nlohmann::json report;
    if (gen->parsed()) report = run_gen_synthetic(cfg);
    if (kfit->parsed()) report = run_kmeans_fit(cfg);
    if (kassign->parsed()) report = run_kmeans_assign(cfg);
    if (pre->parsed()) report = run_pretrain(cfg);
    if (extract->parsed()) report = run_extract(cfg);
    if (fine->parsed()) report = run_finetune(cfg);
    if (evalc->parsed()) report = run_eval(cfg);
    if (ablate->parsed()) report = run_ablate(cfg);
    if (dump->parsed()) {
      ChannelId channel = ChannelId::Face;
      bool known = false;
      for (int c = 0; c < kNumChannels; ++c)
        if (dump_channel == channel_name(static_cast<ChannelId>(c))) {
          channel = static_cast<ChannelId>(c);
          known = true;
        }
      if (!known) throw ConfigError("unknown channel: " + dump_channel);
      report = run_dump_clusters(cfg, channel, dump_ids, dump_n);
    }
    std::cout << report.dump(2) << '\n';
    return 0;
  } catch (const ConfigError& e) {
    nlohmann::json err{{"error", "config"}, {"message", e.what()}};
    std::cerr << err.dump(2) << '\n';
    return 2;
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", "runtime"}, {"message", e.what()}};
    std::cerr << err.dump(2) << '\n';
    return 1;
  }
}
