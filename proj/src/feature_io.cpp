// SPDX-License-Identifier: Apache-2.0

#include "signstream/feature_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace signstream {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'F', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class ByteReader {
public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  void bytes(std::uint8_t* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return size_ - pos_; }

private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw LengthError("msf: truncated payload");
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

} // namespace

std::uint64_t MsfPayload::floats_per_frame() const {
  std::uint64_t s = 0;
  for (const auto d : dims) s += d;
  return s;
}

void FeatureSequence::validate(const ChannelDims* expect) const {
  const std::int64_t t = channels[0].rows();
  if (t < 1) throw SchemaError("feature sequence must have at least one frame");
  for (int c = 0; c < kNumChannels; ++c) {
    if (channels[c].rows() != t)
      throw SchemaError("channel " + std::string(channel_name(static_cast<ChannelId>(c))) +
                        " frame count disagrees with channel 0");
    if (presence[c].size() != static_cast<std::size_t>(t))
      throw SchemaError("presence length disagrees with frame count");
    if (expect && channels[c].cols() != (*expect)[c])
      throw SchemaError("channel " + std::string(channel_name(static_cast<ChannelId>(c))) +
                        " dim " + std::to_string(channels[c].cols()) + " != expected " +
                        std::to_string((*expect)[c]));
  }
}

bool FeatureSequence::operator==(const FeatureSequence& o) const {
  if (frame_rate_hint != o.frame_rate_hint) return false;
  for (int c = 0; c < kNumChannels; ++c) {
    if (channels[c].rows() != o.channels[c].rows() || channels[c].cols() != o.channels[c].cols())
      return false;
    if (std::memcmp(channels[c].data(), o.channels[c].data(),
                    sizeof(float) * static_cast<std::size_t>(channels[c].size())) != 0)
      return false;
    if (presence[c] != o.presence[c]) return false;
  }
  return true;
}

FeatureSequence zero_sequence(std::int64_t t, const ChannelDims& dims, float rate) {
  FeatureSequence seq;
  for (int c = 0; c < kNumChannels; ++c) {
    seq.channels[c] = MatF::Zero(t, dims[c]);
    seq.presence[c].assign(static_cast<std::size_t>(t), 1);
  }
  seq.frame_rate_hint = rate;
  return seq;
}

std::vector<std::uint8_t> encode_msf(const MsfPayload& payload) {
  const std::uint64_t t = payload.num_frames;
  const std::uint32_t nc = payload.num_channels();
  if (nc == 0) throw SchemaError("msf: zero channels");
  if (payload.presence.size() != t * nc) throw SchemaError("msf: presence size mismatch");
  if (payload.data.size() != t * payload.floats_per_frame())
    throw SchemaError("msf: data size mismatch");

  std::vector<std::uint8_t> out;
  out.reserve(24 + 4 * nc + payload.presence.size() + payload.data.size() * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, nc);
  for (const auto d : payload.dims) put_u32(out, d);
  put_u64(out, t);
  put_f32(out, payload.frame_rate_hint);
  out.insert(out.end(), payload.presence.begin(), payload.presence.end());
  for (const float v : payload.data) put_f32(out, v);
  return out;
}

MsfPayload decode_msf(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("msf: bad magic");
  ByteReader r(bytes.data() + 4, bytes.size() - 4);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("msf: unsupported version " + std::to_string(version));

  MsfPayload p;
  const std::uint32_t nc = r.u32();
  if (nc == 0 || nc > 1024) throw FormatError("msf: implausible channel count");
  p.dims.resize(nc);
  for (auto& d : p.dims) d = r.u32();
  p.num_frames = r.u64();
  p.frame_rate_hint = r.f32();

  const std::uint64_t presence_bytes = p.num_frames * nc;
  const std::uint64_t num_floats = p.num_frames * p.floats_per_frame();
  p.presence.resize(presence_bytes);
  if (presence_bytes > 0) r.bytes(p.presence.data(), presence_bytes);
  p.data.resize(num_floats);
  for (auto& v : p.data) v = r.f32();
  if (r.remaining() != 0) throw LengthError("msf: trailing bytes after payload");
  return p;
}

void write_msf_raw(const MsfPayload& payload, const std::filesystem::path& path) {
  const auto bytes = encode_msf(payload);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

MsfPayload read_msf_raw(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_msf(bytes);
}

MsfPayload payload_from_sequence(const FeatureSequence& seq) {
  seq.validate();
  MsfPayload p;
  const std::int64_t t = seq.frames();
  const ChannelDims dims = seq.dims();
  p.dims.assign(dims.begin(), dims.end());
  p.num_frames = static_cast<std::uint64_t>(t);
  p.frame_rate_hint = seq.frame_rate_hint;
  p.presence.resize(static_cast<std::size_t>(t) * kNumChannels);
  for (std::int64_t i = 0; i < t; ++i)
    for (int c = 0; c < kNumChannels; ++c)
      p.presence[static_cast<std::size_t>(i) * kNumChannels + c] = seq.presence[c][i];
  p.data.reserve(static_cast<std::size_t>(t) * static_cast<std::size_t>(total_dim(dims)));
  for (std::int64_t i = 0; i < t; ++i)
    for (int c = 0; c < kNumChannels; ++c)
      for (int j = 0; j < dims[c]; ++j) p.data.push_back(seq.channels[c](i, j));
  return p;
}

FeatureSequence sequence_from_payload(const MsfPayload& p) {
  if (p.num_channels() != kNumChannels)
    throw SchemaError("msf: expected 4 channels, file has " + std::to_string(p.num_channels()));
  FeatureSequence seq;
  const std::int64_t t = static_cast<std::int64_t>(p.num_frames);
  for (int c = 0; c < kNumChannels; ++c) {
    seq.channels[c].resize(t, static_cast<int>(p.dims[c]));
    seq.presence[c].resize(static_cast<std::size_t>(t));
  }
  seq.frame_rate_hint = p.frame_rate_hint;
  std::size_t pos = 0;
  for (std::int64_t i = 0; i < t; ++i) {
    for (int c = 0; c < kNumChannels; ++c)
      seq.presence[c][i] = p.presence[static_cast<std::size_t>(i) * kNumChannels + c];
    for (int c = 0; c < kNumChannels; ++c)
      for (std::uint32_t j = 0; j < p.dims[c]; ++j) seq.channels[c](i, j) = p.data[pos++];
  }
  seq.validate();
  return seq;
}

void write_msf(const FeatureSequence& seq, const std::filesystem::path& path) {
  // Validation happens before any bytes hit the disk.
  write_msf_raw(payload_from_sequence(seq), path);
}

FeatureSequence read_msf(const std::filesystem::path& path) {
  return sequence_from_payload(read_msf_raw(path));
}

FeatureSequence interpolate_missing(const FeatureSequence& seq, ChannelId channel) {
  seq.validate();
  FeatureSequence out = seq;
  const int c = static_cast<int>(channel);
  const std::int64_t t = seq.frames();

  std::vector<std::int64_t> present;
  for (std::int64_t i = 0; i < t; ++i)
    if (seq.presence[c][i]) present.push_back(i);

  if (present.empty()) {
    out.channels[c].setZero();
    std::fill(out.presence[c].begin(), out.presence[c].end(), std::uint8_t{1});
    out.interp_all_missing[c] = true;
    return out;
  }

  for (std::int64_t i = 0; i < present.front(); ++i)
    out.channels[c].row(i) = seq.channels[c].row(present.front());
  for (std::int64_t i = present.back() + 1; i < t; ++i)
    out.channels[c].row(i) = seq.channels[c].row(present.back());

  for (std::size_t p = 0; p + 1 < present.size(); ++p) {
    const std::int64_t t0 = present[p];
    const std::int64_t t1 = present[p + 1];
    for (std::int64_t i = t0 + 1; i < t1; ++i) {
      const float w = static_cast<float>(i - t0) / static_cast<float>(t1 - t0);
      out.channels[c].row(i) =
          (1.0f - w) * seq.channels[c].row(t0) + w * seq.channels[c].row(t1);
    }
  }

  std::fill(out.presence[c].begin(), out.presence[c].end(), std::uint8_t{1});
  return out;
}

FeatureSequence interpolate_all(const FeatureSequence& seq) {
  FeatureSequence out = seq;
  for (int c = 0; c < kNumChannels; ++c) out = interpolate_missing(out, static_cast<ChannelId>(c));
  return out;
}

std::array<double, 14> normalize_pose(const PoseLandmarks& lm) {
  const auto& ls = lm.points[PoseLandmarks::kLeftShoulder];
  const auto& rs = lm.points[PoseLandmarks::kRightShoulder];
  const double mid_x = 0.5 * (ls[0] + rs[0]);
  const double mid_y = 0.5 * (ls[1] + rs[1]);
  const double dist = std::hypot(ls[0] - rs[0], ls[1] - rs[1]);
  if (dist == 0.0) throw DegeneratePoseError("normalize_pose: coincident shoulders");
  std::array<double, 14> out{};
  for (int i = 0; i < 7; ++i) {
    out[2 * i] = (lm.points[i][0] - mid_x) / dist;
    out[2 * i + 1] = (lm.points[i][1] - mid_y) / dist;
  }
  return out;
}

FeatureSequence downsample(const FeatureSequence& seq, int stride) {
  if (stride < 1) throw ArgumentError("downsample: stride must be >= 1");
  seq.validate();
  if (stride == 1) return seq;
  const std::int64_t t = seq.frames();
  const std::int64_t kept = (t + stride - 1) / stride;
  FeatureSequence out;
  for (int c = 0; c < kNumChannels; ++c) {
    out.channels[c].resize(kept, seq.channels[c].cols());
    out.presence[c].resize(static_cast<std::size_t>(kept));
    for (std::int64_t i = 0; i < kept; ++i) {
      out.channels[c].row(i) = seq.channels[c].row(i * stride);
      out.presence[c][i] = seq.presence[c][i * stride];
    }
  }
  out.frame_rate_hint = seq.frame_rate_hint / static_cast<float>(stride);
  return out;
}

} // namespace signstream
