// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "signstream/feature_io.hpp"

namespace signstream {

enum class MaskStrategy { Channel, Time, Random };

const char* mask_strategy_name(MaskStrategy s);
MaskStrategy mask_strategy_from_name(const std::string& name);

// A channels x time boolean grid; true means the cell is masked.
struct MaskPlan {
  std::array<std::vector<std::uint8_t>, kNumChannels> grid;
  MaskStrategy strategy = MaskStrategy::Random;
  int span = 3;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::int64_t frames() const { return static_cast<std::int64_t>(grid[0].size()); }
  bool masked(int channel, std::int64_t t) const { return grid[channel][t] != 0; }
  std::int64_t masked_count(int channel) const;
  std::int64_t masked_count_total() const;
};

// Builds a plan. Random draws span start positions without replacement and
// masks [start, start + span) per draw (spans clip at the sequence end and
// may merge into longer runs) until the channel's masked count reaches
// ceil(ratio * T); Time draws one such row and broadcasts it; Channel masks
// ceil(ratio * 4) whole channels, clamped to [1, 3] for 0 < ratio < 1 so at
// least one channel row stays visible.
MaskPlan make_mask_plan(std::int64_t num_frames, MaskStrategy strategy, double ratio, int span,
                        std::uint64_t seed);

// Replaces the masked cells of per-channel projected features with that
// channel's mask embedding; unmasked rows pass through bit-exactly.
template <typename S>
std::array<Mat<S>, kNumChannels> apply_mask(const std::array<Mat<S>, kNumChannels>& projected,
                                            const MaskPlan& plan,
                                            const std::array<Vec<S>, kNumChannels>& mask_embeddings) {
  const std::int64_t t = projected[0].rows();
  if (plan.frames() != t) throw SchemaError("apply_mask: plan length != sequence length");
  for (int c = 0; c < kNumChannels; ++c) {
    if (projected[c].rows() != t) throw SchemaError("apply_mask: ragged projected channels");
    if (mask_embeddings[c].size() != projected[c].cols())
      throw SchemaError("apply_mask: mask embedding dim mismatch");
  }
  std::array<Mat<S>, kNumChannels> out = projected;
  for (int c = 0; c < kNumChannels; ++c)
    for (std::int64_t i = 0; i < t; ++i)
      if (plan.masked(c, i)) out[c].row(i) = mask_embeddings[c].transpose();
  return out;
}

// Debug bitmap: 4 x T bits, channel-major rows, LSB-first within each byte,
// padded to a whole number of bytes.
std::vector<std::uint8_t> mask_plan_to_bitmap(const MaskPlan& plan);
std::array<std::vector<std::uint8_t>, kNumChannels> mask_bitmap_to_grid(
    const std::vector<std::uint8_t>& bitmap, std::int64_t num_frames);

} // namespace signstream
