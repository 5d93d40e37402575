// SPDX-License-Identifier: Apache-2.0

#include "signstream/synthetic.hpp"

#include <algorithm>

#include "signstream/rng.hpp"

namespace signstream {

namespace {

MatF draw_normal_matrix(std::uint64_t seed, std::int64_t rows, std::int64_t cols, double scale) {
  Rng rng(seed);
  MatF m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j)
      m(i, j) = static_cast<float>(scale * rng.next_normal());
  return m;
}

} // namespace

SyntheticDataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.num_seqs < 0) throw ArgumentError("gen_synthetic: num_seqs must be >= 0");
  if (spec.t_min < 1 || spec.t_max < spec.t_min)
    throw ArgumentError("gen_synthetic: empty frame range");
  if (spec.num_latent_gestures < 1)
    throw ArgumentError("gen_synthetic: need at least one gesture");
  if (spec.motifs_per_gesture < 1)
    throw ArgumentError("gen_synthetic: need at least one motif per gesture");
  if (spec.span_min < 1 || spec.span_max < spec.span_min)
    throw ArgumentError("gen_synthetic: empty span range");
  if (spec.latent_dim < 0) throw ArgumentError("gen_synthetic: latent_dim must be >= 0");

  const int num_gestures = spec.num_latent_gestures;
  const int num_motifs_total = num_gestures * spec.motifs_per_gesture;

  // Motif means per channel, centered within each gesture when the gesture
  // has several motifs so class identity is invisible to a plain time-mean.
  std::array<MatF, kNumChannels> motif_mean;
  for (int c = 0; c < kNumChannels; ++c) {
    motif_mean[c] = draw_normal_matrix(derive_seed(spec.seed, "synth.motif", c),
                                       num_motifs_total, spec.dims[c], spec.motif_scale);
    if (spec.motifs_per_gesture >= 2) {
      for (int g = 0; g < num_gestures; ++g) {
        auto block = motif_mean[c].middleRows(g * spec.motifs_per_gesture,
                                              spec.motifs_per_gesture);
        const Eigen::RowVectorXf mean = block.colwise().mean();
        block.rowwise() -= mean;
      }
    }
  }

  std::array<MatF, kNumChannels> loading;
  for (int c = 0; c < kNumChannels; ++c)
    loading[c] = draw_normal_matrix(derive_seed(spec.seed, "synth.loading", c),
                                    spec.dims[c], spec.latent_dim, 1.0);

  SyntheticDataset ds;
  ds.num_classes = num_gestures;
  ds.dims = spec.dims;
  ds.sequences.reserve(static_cast<std::size_t>(spec.num_seqs));
  ds.labels.reserve(static_cast<std::size_t>(spec.num_seqs));

  for (int i = 0; i < spec.num_seqs; ++i) {
    Rng len_rng(derive_seed(spec.seed, "synth.len", static_cast<std::uint64_t>(i)));
    const std::int64_t t =
        spec.t_min + static_cast<std::int64_t>(len_rng.next_below(
                         static_cast<std::uint64_t>(spec.t_max - spec.t_min + 1)));

    Rng span_rng(derive_seed(spec.seed, "synth.spans", static_cast<std::uint64_t>(i)));
    // Balanced labels in single-gesture mode; free-roaming spans otherwise.
    const int seq_gesture = i % num_gestures;
    std::vector<int> frame_gesture(static_cast<std::size_t>(t));
    std::vector<int> frame_motif(static_cast<std::size_t>(t));
    std::int64_t pos = 0;
    while (pos < t) {
      const std::int64_t span_len =
          spec.span_min + static_cast<std::int64_t>(span_rng.next_below(
                              static_cast<std::uint64_t>(spec.span_max - spec.span_min + 1)));
      const int g = spec.single_gesture_per_seq
                        ? seq_gesture
                        : static_cast<int>(span_rng.next_below(
                              static_cast<std::uint64_t>(num_gestures)));
      const int m = static_cast<int>(
          span_rng.next_below(static_cast<std::uint64_t>(spec.motifs_per_gesture)));
      for (std::int64_t j = 0; j < span_len && pos < t; ++j, ++pos) {
        frame_gesture[static_cast<std::size_t>(pos)] = g;
        frame_motif[static_cast<std::size_t>(pos)] = m;
      }
    }

    FeatureSequence seq = zero_sequence(t, spec.dims, spec.frame_rate_hint);
    Rng frame_rng(derive_seed(spec.seed, "synth.frames", static_cast<std::uint64_t>(i)));
    Eigen::VectorXf z(spec.latent_dim);
    for (std::int64_t ti = 0; ti < t; ++ti) {
      for (int d = 0; d < spec.latent_dim; ++d)
        z(d) = static_cast<float>(spec.latent_sigma * frame_rng.next_normal());
      const int motif_row =
          frame_gesture[static_cast<std::size_t>(ti)] * spec.motifs_per_gesture +
          frame_motif[static_cast<std::size_t>(ti)];
      for (int c = 0; c < kNumChannels; ++c) {
        auto row = seq.channels[c].row(ti);
        row = motif_mean[c].row(motif_row);
        if (spec.latent_dim > 0) row += (loading[c] * z).transpose();
        for (int d = 0; d < spec.dims[c]; ++d)
          row(d) += static_cast<float>(spec.noise_sigma * frame_rng.next_normal());
      }
    }

    // Dominant gesture by frame count, ties to the lowest id.
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_gestures), 0);
    for (const int g : frame_gesture) counts[static_cast<std::size_t>(g)]++;
    const int label = static_cast<int>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());

    ds.sequences.push_back(std::move(seq));
    ds.labels.push_back(label);
  }
  return ds;
}

} // namespace signstream
