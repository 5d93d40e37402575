// SPDX-License-Identifier: Apache-2.0

#include "signstream/masking.hpp"

#include <cmath>

#include "signstream/rng.hpp"

namespace signstream {

const char* mask_strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::Channel: return "channel";
    case MaskStrategy::Time: return "time";
    case MaskStrategy::Random: return "random";
  }
  return "?";
}

MaskStrategy mask_strategy_from_name(const std::string& name) {
  if (name == "channel") return MaskStrategy::Channel;
  if (name == "time") return MaskStrategy::Time;
  if (name == "random") return MaskStrategy::Random;
  throw ArgumentError("unknown mask strategy: " + name);
}

std::int64_t MaskPlan::masked_count(int channel) const {
  std::int64_t n = 0;
  for (const auto v : grid[channel]) n += v != 0;
  return n;
}

std::int64_t MaskPlan::masked_count_total() const {
  std::int64_t n = 0;
  for (int c = 0; c < kNumChannels; ++c) n += masked_count(c);
  return n;
}

namespace {

// Span placement for one row: starts drawn without replacement, each
// masking its full (clipped) window, until the masked count reaches the
// target. Spans may merge into longer runs, so ratio = 1 fills the row.
std::vector<std::uint8_t> mask_row(std::int64_t t, double ratio, int span, Rng& rng) {
  std::vector<std::uint8_t> row(static_cast<std::size_t>(t), 0);
  const auto target = static_cast<std::int64_t>(std::ceil(ratio * static_cast<double>(t)));
  if (target <= 0) return row;

  std::vector<std::int64_t> starts(static_cast<std::size_t>(t));
  for (std::int64_t i = 0; i < t; ++i) starts[static_cast<std::size_t>(i)] = i;
  rng.shuffle(starts);

  std::int64_t count = 0;
  for (const std::int64_t s : starts) {
    if (count >= target) break;
    const std::int64_t end = std::min<std::int64_t>(s + span, t);
    for (std::int64_t i = s; i < end; ++i) {
      if (!row[static_cast<std::size_t>(i)]) {
        row[static_cast<std::size_t>(i)] = 1;
        ++count;
      }
    }
  }
  return row;
}

} // namespace

MaskPlan make_mask_plan(std::int64_t num_frames, MaskStrategy strategy, double ratio, int span,
                        std::uint64_t seed) {
  if (num_frames < 1) throw ArgumentError("make_mask_plan: need at least one frame");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ArgumentError("make_mask_plan: ratio outside [0, 1]");
  if (span < 1) throw ArgumentError("make_mask_plan: span must be >= 1");

  MaskPlan plan;
  plan.strategy = strategy;
  plan.span = span;
  plan.ratio = ratio;
  plan.seed = seed;

  switch (strategy) {
    case MaskStrategy::Random: {
      for (int c = 0; c < kNumChannels; ++c) {
        Rng rng(derive_seed(seed, "mask.random", static_cast<std::uint64_t>(c)));
        plan.grid[c] = mask_row(num_frames, ratio, span, rng);
      }
      break;
    }
    case MaskStrategy::Time: {
      Rng rng(derive_seed(seed, "mask.time"));
      const auto row = mask_row(num_frames, ratio, span, rng);
      for (int c = 0; c < kNumChannels; ++c) plan.grid[c] = row;
      break;
    }
    case MaskStrategy::Channel: {
      int m;
      if (ratio <= 0.0) {
        m = 0;
      } else if (ratio >= 1.0) {
        m = kNumChannels;
      } else {
        // ceil(ratio * 4), clamped so a partly-masked plan always keeps at
        // least one channel visible and hides at least one.
        m = static_cast<int>(std::ceil(ratio * kNumChannels));
        m = std::max(1, std::min(kNumChannels - 1, m));
      }
      for (int c = 0; c < kNumChannels; ++c)
        plan.grid[c].assign(static_cast<std::size_t>(num_frames), 0);
      Rng rng(derive_seed(seed, "mask.channel"));
      for (const std::size_t c :
           rng.sample_without_replacement(kNumChannels, static_cast<std::size_t>(m)))
        std::fill(plan.grid[c].begin(), plan.grid[c].end(), std::uint8_t{1});
      break;
    }
  }
  return plan;
}

std::vector<std::uint8_t> mask_plan_to_bitmap(const MaskPlan& plan) {
  const std::int64_t t = plan.frames();
  const std::int64_t bits = t * kNumChannels;
  std::vector<std::uint8_t> out(static_cast<std::size_t>((bits + 7) / 8), 0);
  std::int64_t bit = 0;
  for (int c = 0; c < kNumChannels; ++c)
    for (std::int64_t i = 0; i < t; ++i, ++bit)
      if (plan.grid[c][i])
        out[static_cast<std::size_t>(bit / 8)] |= static_cast<std::uint8_t>(1u << (bit % 8));
  return out;
}

std::array<std::vector<std::uint8_t>, kNumChannels> mask_bitmap_to_grid(
    const std::vector<std::uint8_t>& bitmap, std::int64_t num_frames) {
  const std::int64_t bits = num_frames * kNumChannels;
  if (static_cast<std::int64_t>(bitmap.size()) != (bits + 7) / 8)
    throw SchemaError("mask bitmap: size does not match frame count");
  std::array<std::vector<std::uint8_t>, kNumChannels> grid;
  std::int64_t bit = 0;
  for (int c = 0; c < kNumChannels; ++c) {
    grid[c].resize(static_cast<std::size_t>(num_frames));
    for (std::int64_t i = 0; i < num_frames; ++i, ++bit)
      grid[c][i] = (bitmap[static_cast<std::size_t>(bit / 8)] >> (bit % 8)) & 1u;
  }
  return grid;
}

} // namespace signstream
