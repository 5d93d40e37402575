// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "signstream/adapt.hpp"
#include "signstream/synthetic.hpp"
#include "signstream/trainer.hpp"

namespace signstream {

struct ExperimentPaths {
  std::string dataset_dir;
  std::string output_dir;
  std::string models_dir;
  std::string checkpoint;
  std::string adapter;
  // "uniform", "last", or a path to a trained adapter file
  std::string layer_weights = "uniform";
};

struct ClusterConfig {
  int k = 256;
  double fraction = 0.1;
  int max_iters = 100;
  double tol = 1e-6;
  int restarts = 3;
};

struct AdapterConfig {
  std::string mode = "frozen-weighted";
  int max_epochs = 125;
  int batch_size = 128;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double label_smoothing = 0.1;
  double lora_lr_scale = 0.1;
  int patience = 10;
  double val_fraction = 0.2;
  bool reinit_last_block = true;
  std::string task = "gesture";
  // tail fraction of the dataset held out for evaluation (eval/ablate)
  double eval_fraction = 0.25;

  DownstreamConfig to_downstream(std::uint64_t seed) const;
};

// One file describes a whole experiment; every command reads the sections
// it needs. All randomness is derived from the single top-level seed.
struct ExperimentConfig {
  int schema_version = 1;
  std::uint64_t seed = 42;
  ExperimentPaths paths;
  SyntheticSpec synthetic;
  EncoderConfig encoder;
  ClusterConfig cluster;
  TrainConfig train;
  AdapterConfig adapter;
};

// Strict parse: unknown keys and type mismatches are collected into one
// ConfigError whose message lists every offending field path.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Full resolution: every field is emitted, so resolving a resolved config
// is a fixed point.
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);
void write_resolved_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

// Derived per-stage seeds (documented single-seed policy).
std::uint64_t stage_seed(const ExperimentConfig& cfg, const std::string& stage);

// ---------------------------------------------------------------------------
// Command runners. Artifacts land under paths.output_dir together with the
// resolved config; the returned JSON is the machine-readable report.
// ---------------------------------------------------------------------------

nlohmann::json run_gen_synthetic(const ExperimentConfig& cfg);
nlohmann::json run_kmeans_fit(const ExperimentConfig& cfg);
nlohmann::json run_kmeans_assign(const ExperimentConfig& cfg);
nlohmann::json run_pretrain(const ExperimentConfig& cfg);
nlohmann::json run_extract(const ExperimentConfig& cfg);
nlohmann::json run_finetune(const ExperimentConfig& cfg);
nlohmann::json run_eval(const ExperimentConfig& cfg);
nlohmann::json run_ablate(const ExperimentConfig& cfg);
nlohmann::json run_dump_clusters(const ExperimentConfig& cfg, ChannelId channel,
                                 const std::vector<int>& cluster_ids, int n_per_cluster);

// Aligned plain-text rendering of a report table: rows of named columns.
std::string render_table(const std::vector<std::string>& columns,
                         const std::vector<std::vector<std::string>>& rows);

// Adapter bundle file (JSON): heads, layer weights, adapters, task names.
void save_adapter_bundle(const DownstreamResult& result, AdaptMode mode,
                         const std::vector<std::string>& task_names,
                         const std::filesystem::path& path);

struct AdapterBundle {
  AdaptMode mode = AdaptMode::FrozenWeighted;
  std::vector<std::string> task_names;
  std::vector<ClassifierHead> heads;
  LayerWeights layer_weights;
  LoraSet<float> lora;
};

AdapterBundle load_adapter_bundle(const std::filesystem::path& path, const EncoderConfig& cfg);

// The four per-channel codebooks as files face.kmc .. body_pose.kmc.
void save_cluster_models(const std::array<ClusterModel, kNumChannels>& models,
                         const std::filesystem::path& dir);
std::array<ClusterModel, kNumChannels> load_cluster_models(const std::filesystem::path& dir);

} // namespace signstream
