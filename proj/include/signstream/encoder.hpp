// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "signstream/feature_io.hpp"
#include "signstream/kmeans.hpp"
#include "signstream/masking.hpp"

namespace signstream {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int n_blocks = 12;
  int model_dim = 768;
  int ffn_dim = 3072;
  int n_heads = 12;
  int channel_proj_dim = 256;
  int k_per_channel = 256;
  ChannelDims channel_dims = default_channel_dims();
  // Sinusoidal absolute positions added after fusion. Disabling this is a
  // test hook for the permutation-equivariance check.
  bool use_positional_encoding = true;

  int head_dim() const { return model_dim / n_heads; }
  int fusion_in_dim() const { return kNumChannels * channel_proj_dim; }
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

// Closed-form trainable-parameter count:
//   channel norms        sum_c 2*dim_c
// + channel projections  sum_c (dim_c*P + P)
// + mask embeddings      4*P
// + fusion               (4P)*D + D
// + blocks               n * (2D + 4(D*D + D) + 2D + D*F + F + F*D + D)
// + prediction heads     4*(D*k + k)
// with P = channel_proj_dim, D = model_dim, F = ffn_dim, k = k_per_channel.
std::int64_t param_count(const EncoderConfig& cfg);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
struct LinearParam {
  Mat<S> w; // (in x out); y = x * w + b
  Vec<S> b;
};

template <typename S>
struct NormParam {
  Vec<S> gamma;
  Vec<S> beta;
};

template <typename S>
struct BlockParams {
  NormParam<S> ln1;
  LinearParam<S> wq, wk, wv, wo;
  NormParam<S> ln2;
  LinearParam<S> ffn1, ffn2;
};

template <typename S>
struct EncoderParams {
  std::array<NormParam<S>, kNumChannels> chan_norm;
  std::array<LinearParam<S>, kNumChannels> chan_proj;
  std::array<Vec<S>, kNumChannels> mask_embed;
  LinearParam<S> fusion;
  std::vector<BlockParams<S>> blocks;
  std::array<LinearParam<S>, kNumChannels> heads;
};

// A flat, named view of one parameter tensor. collect_params defines the
// canonical registry order used by checkpoints, the optimizer and the
// finite-difference harness.
template <typename S>
struct TensorRef {
  std::string name;
  S* data;
  std::int64_t size;
};

template <typename S>
std::vector<TensorRef<S>> collect_params(EncoderParams<S>& p);

template <typename S>
EncoderParams<S> make_params(const EncoderConfig& cfg); // zero-valued, right shapes

template <typename S>
void zero_params(EncoderParams<S>& p);

// Scaled-normal init (std 0.02) for projections and heads, unit gamma /
// zero beta for the normalizers. zero_heads leaves the prediction heads at
// zero so a fresh model emits exactly uniform logits.
template <typename S>
EncoderParams<S> init_params(const EncoderConfig& cfg, std::uint64_t seed,
                             bool zero_heads = false);

// ---------------------------------------------------------------------------
// Rank-1 low-rank adapters. One (a, b) pair per adapted linear; the
// effective weight is w + a * b^T (a spans the input, b the output). The
// prediction heads are not adapted: they are dropped downstream.
// ---------------------------------------------------------------------------

template <typename S>
struct LoraEntry {
  std::string name; // name of the adapted linear's weight
  Vec<S> a;
  Vec<S> b;
};

template <typename S>
struct LoraSet {
  std::vector<LoraEntry<S>> entries; // in adapted_linear_names order
};

std::vector<std::string> adapted_linear_names(const EncoderConfig& cfg);

// a ~ N(0, 0.02), b = 0, so the adapted forward starts exactly at the base.
template <typename S>
LoraSet<S> init_lora(const EncoderConfig& cfg, std::uint64_t seed);

template <typename S>
LoraSet<S> zero_lora_like(const LoraSet<S>& set);

std::int64_t lora_param_count(const EncoderConfig& cfg); // sum (in + out)

// ---------------------------------------------------------------------------
// Forward / loss / backward
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardResult {
  // layers[0] is the fused (post-position) input, layers[l] the output of
  // block l; layers[n_blocks] is bitwise the prediction heads' input.
  std::vector<Mat<S>> layers;
  std::array<Mat<S>, kNumChannels> logits; // T x k per channel
};

template <typename S>
struct ForwardCache {
  std::array<Mat<S>, kNumChannels> ln_xhat;
  std::array<Vec<S>, kNumChannels> ln_rstd;
  std::array<Mat<S>, kNumChannels> ln_out;
  Mat<S> fused_in; // concatenated projections, T x 4P
  struct BlockCache {
    Mat<S> x_in;
    Mat<S> ln1_xhat;
    Vec<S> ln1_rstd;
    Mat<S> ln1_out;
    Mat<S> q, k, v;
    std::vector<Mat<S>> attn_probs; // per head, T x T
    Mat<S> attn_concat;
    Mat<S> x_mid;
    Mat<S> ln2_xhat;
    Vec<S> ln2_rstd;
    Mat<S> ln2_out;
    Mat<S> ffn_pre;
    Mat<S> ffn_act;
  };
  std::vector<BlockCache> blocks;
  MaskPlan plan;  // all-false when forward ran unmasked
  bool has_plan = false;
};

// Runs the network on one fully-interpolated sequence. With a plan, the
// masked cells' projections are replaced by the channel mask embeddings, so
// the output is independent of the raw features at masked cells.
template <typename S>
ForwardResult<S> encoder_forward(const EncoderConfig& cfg, const EncoderParams<S>& params,
                                 const FeatureSequence& seq, const MaskPlan* plan = nullptr,
                                 ForwardCache<S>* cache = nullptr,
                                 const LoraSet<S>* lora = nullptr);

struct LossBreakdown {
  double loss = 0.0;
  std::array<double, kNumChannels> per_channel{};
  std::array<double, kNumChannels> per_channel_sum{};
  std::array<std::int64_t, kNumChannels> masked_count{};
  std::array<std::int64_t, kNumChannels> correct_count{};
};

// Mean cross-entropy over each channel's masked cells; the total is the
// mean of the per-channel losses over channels with at least one masked
// cell. Unmasked cells contribute nothing.
template <typename S>
LossBreakdown masked_ce_loss(const std::array<Mat<S>, kNumChannels>& logits,
                             const ClusterAssignments& targets, const MaskPlan& plan,
                             double cell_weight = 1.0);

struct BackwardOptions {
  // Test hook: multiplies every masked cell's contribution.
  double cell_weight = 1.0;
  // Batch pooling: gradient weight per cell of channel c is
  // cell_weight * channel_weight[c]. Unset means the single-sequence
  // default 1 / (masked_count[c] * active_channels).
  std::optional<std::array<double, kNumChannels>> channel_weight;
};

// Analytic gradients of masked_ce_loss w.r.t. every parameter, accumulated
// into `grads` (and `lora_grads` when adapters are attached). Pass
// grads = nullptr to freeze the base weights (adapter-only training).
template <typename S>
LossBreakdown encoder_backward(const EncoderConfig& cfg, const EncoderParams<S>& params,
                               const ForwardResult<S>& fwd, const ForwardCache<S>& cache,
                               const ClusterAssignments& targets, EncoderParams<S>* grads,
                               const BackwardOptions& opts = {},
                               const LoraSet<S>* lora = nullptr,
                               LoraSet<S>* lora_grads = nullptr);

// Backpropagates an externally supplied gradient of the last layer
// (downstream heads) through the network body.
template <typename S>
void encoder_backward_from_last(const EncoderConfig& cfg, const EncoderParams<S>& params,
                                const ForwardCache<S>& cache, const Mat<S>& dlast,
                                EncoderParams<S>* grads, const LoraSet<S>* lora = nullptr,
                                LoraSet<S>* lora_grads = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints: "SHB1" | u32 version | config words | u32 tensor count |
// per tensor: u32 name length | name | u64 element count | f32 data.
// The reader rejects files whose name set differs from the registry.
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const EncoderConfig& cfg, const EncoderParams<S>& params,
                     const std::filesystem::path& path);

struct Checkpoint {
  EncoderConfig config;
  EncoderParams<float> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace signstream
