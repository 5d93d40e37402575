// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "signstream/errors.hpp"

namespace signstream {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using VecF = Vec<float>;

// The four per-frame feature streams, in on-disk channel order.
enum class ChannelId : int { Face = 0, LeftHand = 1, RightHand = 2, BodyPose = 3 };

inline constexpr int kNumChannels = 4;

inline const char* channel_name(ChannelId c) {
  switch (c) {
    case ChannelId::Face: return "face";
    case ChannelId::LeftHand: return "left_hand";
    case ChannelId::RightHand: return "right_hand";
    case ChannelId::BodyPose: return "body_pose";
  }
  return "?";
}

// Feature dimensionality per channel. Fixed for the lifetime of a dataset.
using ChannelDims = std::array<int, kNumChannels>;

inline ChannelDims default_channel_dims() { return {384, 384, 384, 14}; }

inline int total_dim(const ChannelDims& dims) {
  int s = 0;
  for (int d : dims) s += d;
  return s;
}

// A variable-length multi-stream sequence. channels[c] is T x dim_c;
// presence[c][t] records whether the upstream detector produced the vector
// (a cell with presence == 0 holds zeros until interpolation fills it).
struct FeatureSequence {
  std::array<MatF, kNumChannels> channels;
  std::array<std::vector<std::uint8_t>, kNumChannels> presence;
  float frame_rate_hint = 0.0f;

  // Diagnostic only: set by interpolate_missing when a channel had no
  // detections at all. Not serialized and not part of equality.
  std::array<bool, kNumChannels> interp_all_missing{};

  std::int64_t frames() const { return channels[0].rows(); }

  ChannelDims dims() const {
    ChannelDims d{};
    for (int c = 0; c < kNumChannels; ++c) d[c] = static_cast<int>(channels[c].cols());
    return d;
  }

  // Checks the structural invariants: T >= 1, matching row counts and
  // presence lengths, channel widths equal to `expect` when given.
  void validate(const ChannelDims* expect = nullptr) const;

  bool operator==(const FeatureSequence& o) const;
};

// Builds a sequence of T all-zero frames with every presence flag set.
FeatureSequence zero_sequence(std::int64_t t, const ChannelDims& dims, float rate = 0.0f);

// ---------------------------------------------------------------------------
// MSF container. Little-endian layout:
//   "MSF1" | u32 version=1 | u32 num_channels | num_channels x u32 dims |
//   u64 T | f32 frame_rate_hint | T x num_channels presence bytes
//   (frame-major) | T frames, each the concatenation of the channel vectors
//   as f32. The same container with num_channels = 1 is used for exported
//   encoder features.
// ---------------------------------------------------------------------------

struct MsfPayload {
  std::vector<std::uint32_t> dims;
  std::uint64_t num_frames = 0;
  float frame_rate_hint = 0.0f;
  std::vector<std::uint8_t> presence; // T x C, frame-major
  std::vector<float> data;            // T x sum(dims), frame-major

  std::uint32_t num_channels() const { return static_cast<std::uint32_t>(dims.size()); }
  std::uint64_t floats_per_frame() const;
};

std::vector<std::uint8_t> encode_msf(const MsfPayload& payload);
MsfPayload decode_msf(const std::vector<std::uint8_t>& bytes);

void write_msf_raw(const MsfPayload& payload, const std::filesystem::path& path);
MsfPayload read_msf_raw(const std::filesystem::path& path);

// Four-channel convenience wrappers over the raw container.
void write_msf(const FeatureSequence& seq, const std::filesystem::path& path);
FeatureSequence read_msf(const std::filesystem::path& path);

FeatureSequence sequence_from_payload(const MsfPayload& payload);
MsfPayload payload_from_sequence(const FeatureSequence& seq);

// ---------------------------------------------------------------------------
// Numeric pre-processing
// ---------------------------------------------------------------------------

// Fills absent cells of one channel by linear interpolation between the
// nearest detected frames; runs before the first (after the last) detection
// copy the nearest one. A channel with no detections stays all-zero and
// gets its interp_all_missing flag set. Present cells are left bit-exact.
FeatureSequence interpolate_missing(const FeatureSequence& seq, ChannelId channel);

// Applies interpolate_missing to all four channels.
FeatureSequence interpolate_all(const FeatureSequence& seq);

// Seven upper-body landmarks in image coordinates:
// nose, left/right shoulder, left/right elbow, left/right wrist.
struct PoseLandmarks {
  std::array<std::array<double, 2>, 7> points{};

  static constexpr int kNose = 0;
  static constexpr int kLeftShoulder = 1;
  static constexpr int kRightShoulder = 2;
};

// Maps landmarks into the signing-space frame: shoulder midpoint at the
// origin, shoulder distance scaled to 1. Output is the 14 flattened
// coordinates, invariant to global translation and uniform scaling.
std::array<double, 14> normalize_pose(const PoseLandmarks& lm);

// Keeps frames 0, stride, 2*stride, ... and divides the frame-rate hint.
FeatureSequence downsample(const FeatureSequence& seq, int stride);

} // namespace signstream
