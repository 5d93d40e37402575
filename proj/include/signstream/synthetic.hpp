// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "signstream/feature_io.hpp"

namespace signstream {

// Generator for piecewise-stationary multi-stream sequences.
//
// Each gesture class owns `motifs_per_gesture` motifs (think handshapes).
// A sequence is a chain of spans; every span holds one motif of the active
// gesture. Per frame, a low-dimensional latent wiggle z_t is drawn once and
// shared by all four channels:
//
//   x[c][t] = motif_mean[c][gesture, motif] + loading[c] * z_t + noise
//
// Sharing z_t across channels is what makes masked cells predictable from
// the unmasked channels of the same frame. When a gesture has two or more
// motifs, the motif means are centered per class, so the time-average of a
// sequence carries almost no class information; class identity lives in
// which motifs occur, which is exactly what cluster statistics expose.
struct SyntheticSpec {
  int num_seqs = 0;
  int t_min = 1;
  int t_max = 1;
  std::uint64_t seed = 0;
  int num_latent_gestures = 1;

  int motifs_per_gesture = 4;
  int latent_dim = 2;
  double latent_sigma = 1.0;
  double noise_sigma = 0.05;
  double motif_scale = 3.0;
  int span_min = 4;
  int span_max = 10;

  // true: one gesture for the whole sequence (classification-style data,
  // balanced labels); false: every span draws its own gesture.
  bool single_gesture_per_seq = true;

  ChannelDims dims = default_channel_dims();
  float frame_rate_hint = 15.0f;
};

struct SyntheticDataset {
  std::vector<FeatureSequence> sequences;
  std::vector<int> labels; // per-sequence dominant gesture id
  int num_classes = 0;
  ChannelDims dims{};
};

// Deterministic: the dataset is a pure function of the spec. Two calls with
// equal specs produce bit-identical sequences and labels.
SyntheticDataset gen_synthetic(const SyntheticSpec& spec);

} // namespace signstream
