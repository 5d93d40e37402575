// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "signstream/dataset.hpp"
#include "signstream/encoder.hpp"
#include "signstream/kmeans.hpp"
#include "signstream/masking.hpp"

namespace signstream {

struct TrainConfig {
  std::int64_t total_steps = 2000; // desk-scale default
  double peak_lr = 5e-4;
  double warmup_fraction = 0.08;
  std::int64_t frame_budget = 1500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  std::uint64_t seed = 0;
  MaskStrategy mask_strategy = MaskStrategy::Random;
  double mask_ratio = 0.4;
  int mask_span = 3;
  std::int64_t checkpoint_every = 0; // 0: only the final checkpoint
  // Global-norm gradient clip; <= 0 disables it (strict mode).
  double clip_grad_norm = 1.0;
  // Serial reproducible mode logs wallclock_ms as 0 so two identical runs
  // produce byte-identical metric files.
  bool deterministic_timing = true;

  void validate() const;
};

// Linear warmup from 0 to peak over the first floor(warmup_fraction*total)
// steps (at least one), then linear decay from peak to 0 at total_steps.
double lr_at(std::int64_t step, const TrainConfig& cfg);

// One packed batch entry: a window of a sequence (whole sequence when the
// sequence fits the budget, otherwise budget-sized chunks).
struct BatchItem {
  int seq_index = 0;
  std::int64_t start = 0;
  std::int64_t length = 0;
};
using Batch = std::vector<BatchItem>;

// Greedy packing of shuffled (chunked) sequences; every frame appears
// exactly once per epoch and no batch exceeds the budget.
std::vector<Batch> make_batches(const std::vector<std::int64_t>& seq_lengths,
                                std::int64_t frame_budget, std::uint64_t seed);

// Copies frames [start, start+length) of a sequence.
FeatureSequence slice_sequence(const FeatureSequence& seq, std::int64_t start,
                               std::int64_t length);

struct AdamState {
  std::int64_t t = 0;
  EncoderParams<float> m;
  EncoderParams<float> v;
};

void adam_update(EncoderParams<float>& params, EncoderParams<float>& grads, AdamState& state,
                 double lr, const TrainConfig& cfg);

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  std::array<double, kNumChannels> loss_per_channel{};
  std::array<double, kNumChannels> acc_per_channel{};
  std::int64_t wallclock_ms = 0;
};

std::string metrics_to_json_line(const StepMetrics& m);

struct TrainState {
  std::int64_t step = 0;
  EncoderParams<float> params;
  AdamState adam;
};

void save_train_state(const EncoderConfig& cfg, const TrainState& state,
                      const std::filesystem::path& dir, const std::string& tag);
TrainState load_train_state(const EncoderConfig& cfg, const std::filesystem::path& dir,
                            const std::string& tag);

struct PretrainResult {
  EncoderConfig config;
  TrainState state;
  std::vector<StepMetrics> metrics;
};

// The self-supervised loop: per step, take the next packed batch, draw
// fresh mask plans, run forward/backward over the batch, clip, and apply
// one Adam update at lr_at(step). Bit-reproducible given the seed.
// `output_dir` empty: no files are written. `resume` non-null: continues
// from the saved step with the saved parameters and moments.
PretrainResult pretrain(const Dataset& dataset,
                        const std::array<ClusterModel, kNumChannels>& cluster_models,
                        const EncoderConfig& enc_cfg, const TrainConfig& train_cfg,
                        const std::filesystem::path& output_dir = {},
                        const TrainState* resume = nullptr);

// Masked-prediction accuracy per channel with fresh seeded plans; used by
// the training log and the overfit checks.
struct MaskedEval {
  std::array<double, kNumChannels> accuracy{};
  std::array<std::int64_t, kNumChannels> masked_cells{};
};

MaskedEval eval_masked_accuracy(const Dataset& dataset,
                                const std::array<ClusterModel, kNumChannels>& cluster_models,
                                const EncoderConfig& enc_cfg, const EncoderParams<float>& params,
                                const TrainConfig& train_cfg, std::uint64_t seed);

} // namespace signstream
