// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "signstream/dataset.hpp"
#include "signstream/encoder.hpp"

namespace signstream {

// ---------------------------------------------------------------------------
// Layer mixture
// ---------------------------------------------------------------------------

// Learned convex combination of all encoder layers. Raw weights pass
// through a softmax, so the mixture always sums to one.
struct LayerWeights {
  VecF raw;

  static LayerWeights uniform(int n_layers) {
    LayerWeights lw;
    lw.raw = VecF::Zero(n_layers);
    return lw;
  }
  static LayerWeights one_hot(int n_layers, int hot, float scale = 30.0f) {
    LayerWeights lw = uniform(n_layers);
    lw.raw(hot) = scale;
    return lw;
  }
  VecF normalized() const;
  int size() const { return static_cast<int>(raw.size()); }
};

// Per-frame convex combination of the captured layers.
MatF weighted_features(const std::vector<MatF>& layers, const LayerWeights& lw);

// ---------------------------------------------------------------------------
// Classification heads
// ---------------------------------------------------------------------------

// Temporal mean pool -> batch norm -> linear. Training uses batch
// statistics and maintains running ones; evaluation uses the running
// statistics.
struct ClassifierHead {
  int input_dim = 0;
  int n_classes = 0;
  VecF bn_gamma, bn_beta;
  VecF bn_run_mean, bn_run_var;
  float bn_momentum = 0.1f;
  MatF w;
  VecF b;
  double label_smoothing = 0.1;

  static ClassifierHead init(int input_dim, int n_classes, std::uint64_t seed,
                             double label_smoothing = 0.1);
  // Eval-mode logits for a batch of pooled features (rows).
  MatF infer(const MatF& pooled) const;
};

// Smoothed cross-entropy floor: the loss value at the smoothed target
// distribution itself, i.e. its entropy. Zero when s = 0.
double smoothed_ce_floor(double s, int n_classes);

enum class AdaptMode { Raw, FrozenLast, FrozenWeighted, Finetune, Lora };

const char* adapt_mode_name(AdaptMode m);
AdaptMode adapt_mode_from_name(const std::string& name);

// Fraction of extra parameters a rank-1 adapter set adds to the encoder.
double lora_param_fraction(const EncoderConfig& cfg);

// ---------------------------------------------------------------------------
// Downstream training
// ---------------------------------------------------------------------------

struct TaskDef {
  std::string name;
  int dataset_index = 0;
  std::vector<int> labels; // aligned with the dataset's sequences
  int n_classes = 0;
};

struct DownstreamConfig {
  AdaptMode mode = AdaptMode::FrozenWeighted;
  int max_epochs = 125;
  int batch_size = 128;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double label_smoothing = 0.1;
  // Adapter parameters train at lr * lora_lr_scale.
  double lora_lr_scale = 0.1;
  int patience = 10;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  // Finetune mode re-initializes the final transformer block first.
  bool reinit_last_block = true;

  void validate() const;
};

struct DownstreamResult {
  std::vector<ClassifierHead> heads; // aligned with tasks
  LayerWeights layer_weights;
  EncoderParams<float> encoder_params; // tuned copy (finetune) or the base
  LoraSet<float> lora;                 // trained entries in lora mode
  std::int64_t encoder_forward_calls = 0; // training passes only
  std::vector<double> val_history;      // mean recall@1 per epoch
  int best_epoch = -1;
};

// Trains one or more classification heads over a shared encoder. Multiple
// tasks on one dataset share a single encoder pass per batch; with several
// datasets, each step takes one batch from every dataset and averages the
// task losses with equal weights.
DownstreamResult train_downstream(const EncoderConfig& cfg, const EncoderParams<float>& base,
                                  const std::vector<const Dataset*>& datasets,
                                  const std::vector<TaskDef>& tasks,
                                  const DownstreamConfig& opts);

// Eval-mode logits for one sequence under the given adaptation mode.
VecF classify(const EncoderConfig& cfg, const EncoderParams<float>& params,
              const ClassifierHead& head, const FeatureSequence& seq, AdaptMode mode,
              const LayerWeights* lw = nullptr, const LoraSet<float>* lora = nullptr);

// Eval-mode logits for every sequence of a dataset (rows).
MatF classify_dataset(const EncoderConfig& cfg, const EncoderParams<float>& params,
                      const ClassifierHead& head, const Dataset& data, AdaptMode mode,
                      const LayerWeights* lw = nullptr, const LoraSet<float>* lora = nullptr);

// Fraction of rows whose true label ranks in the top k (ties resolved
// toward the lowest class index).
double recall_at_k(const MatF& logits, const std::vector<int>& labels, int k);

// ---------------------------------------------------------------------------
// Feature export (the boundary to external sequence decoders)
// ---------------------------------------------------------------------------

struct ExportManifest {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> failures;
};

// Writes one single-channel MSF file of mixed layer features per sequence.
ExportManifest export_features(const EncoderConfig& cfg, const EncoderParams<float>& params,
                               const LayerWeights& lw, const Dataset& data,
                               const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Phonological head-bank configuration
// ---------------------------------------------------------------------------

struct PhonologicalFeature {
  std::string name;
  int num_classes = 0;
};

std::vector<PhonologicalFeature> load_phonological_config(const std::filesystem::path& path);

} // namespace signstream
