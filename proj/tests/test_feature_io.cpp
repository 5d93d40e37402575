// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "signstream/feature_io.hpp"
#include "signstream/rng.hpp"

using namespace signstream;

namespace {

std::filesystem::path temp_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "signstream_featio_tests";
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Independent little-endian byte writer used to hand-assemble files; kept
// separate from the library's encoder on purpose.
struct ByteBuilder {
  std::vector<std::uint8_t> bytes;
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t b;
    std::memcpy(&b, &v, 4);
    u32(b);
  }
  void raw(std::initializer_list<std::uint8_t> vs) { bytes.insert(bytes.end(), vs); }
};

FeatureSequence random_sequence(std::uint64_t seed, std::int64_t t, const ChannelDims& dims,
                                bool random_presence = true) {
  Rng rng(seed);
  FeatureSequence seq = zero_sequence(t, dims, 12.5f);
  for (int c = 0; c < kNumChannels; ++c)
    for (std::int64_t i = 0; i < t; ++i) {
      if (random_presence) seq.presence[c][i] = rng.next_double() < 0.8 ? 1 : 0;
      for (int j = 0; j < dims[c]; ++j)
        seq.channels[c](i, j) = static_cast<float>(rng.next_normal());
    }
  return seq;
}

} // namespace

TEST_CASE("msf: one zero frame round-trips and has the documented length") {
  const ChannelDims dims = default_channel_dims();
  const FeatureSequence seq = zero_sequence(1, dims, 0.0f);
  const auto path = temp_dir() / "zero.msf";
  write_msf(seq, path);

  // header: magic(4) + version(4) + num_channels(4) + 4 dims(16) + T(8) + rate(4)
  const std::size_t header = 4 + 4 + 4 + 16 + 8 + 4;
  const std::size_t expected = header + 4 /*presence*/ + 1166 * 4 /*payload*/;
  CHECK(std::filesystem::file_size(path) == expected);

  const FeatureSequence back = read_msf(path);
  CHECK(back == seq);
}

TEST_CASE("msf: hand-assembled T=2 file decodes field by field") {
  const ChannelDims dims = {3, 2, 2, 1};
  ByteBuilder b;
  b.raw({'M', 'S', 'F', '1'});
  b.u32(1); // version
  b.u32(4); // channels
  for (const int d : dims) b.u32(static_cast<std::uint32_t>(d));
  b.u64(2); // T
  b.f32(25.0f);
  // presence, frame-major: frame0 all present, frame1 left hand missing
  b.raw({1, 1, 1, 1, 1, 0, 1, 1});
  const float frame0[8] = {0.5f, -1.25f, 3.0f, 7.5f, -2.0f, 0.125f, 9.0f, -0.5f};
  const float frame1[8] = {1.0f, 2.0f, 3.0f, 0.0f, 0.0f, 4.0f, 5.0f, 6.0f};
  for (const float v : frame0) b.f32(v);
  for (const float v : frame1) b.f32(v);

  const auto path = temp_dir() / "hand.msf";
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(b.bytes.data()),
            static_cast<std::streamsize>(b.bytes.size()));
  }

  const FeatureSequence seq = read_msf(path);
  CHECK(seq.frames() == 2);
  CHECK(seq.frame_rate_hint == 25.0f);
  CHECK(seq.channels[0](0, 0) == 0.5f);
  CHECK(seq.channels[0](0, 1) == -1.25f);
  CHECK(seq.channels[0](0, 2) == 3.0f);
  CHECK(seq.channels[1](0, 0) == 7.5f);
  CHECK(seq.channels[1](0, 1) == -2.0f);
  CHECK(seq.channels[2](0, 0) == 0.125f);
  CHECK(seq.channels[2](0, 1) == 9.0f);
  CHECK(seq.channels[3](0, 0) == -0.5f);
  CHECK(seq.channels[0](1, 0) == 1.0f);
  CHECK(seq.channels[3](1, 0) == 6.0f);
  CHECK(seq.presence[1][1] == 0);
  CHECK(seq.presence[0][1] == 1);

  // Re-encoding reproduces the hand-assembled bytes exactly.
  write_msf(seq, temp_dir() / "hand_back.msf");
  CHECK(slurp(temp_dir() / "hand_back.msf") == b.bytes);
}

TEST_CASE("msf: write is deterministic and read(write(s)) == s") {
  const ChannelDims dims = {5, 4, 4, 2};
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const FeatureSequence seq = random_sequence(seed, 3 + static_cast<std::int64_t>(seed), dims);
    const auto p1 = temp_dir() / "a.msf";
    const auto p2 = temp_dir() / "b.msf";
    write_msf(seq, p1);
    write_msf(seq, p2);
    CHECK(slurp(p1) == slurp(p2));
    CHECK(read_msf(p1) == seq);
  }
}

TEST_CASE("msf: error taxonomy") {
  const ChannelDims dims = {3, 2, 2, 1};
  const FeatureSequence seq = random_sequence(7, 4, dims);
  const auto path = temp_dir() / "err.msf";
  write_msf(seq, path);
  auto bytes = slurp(path);

  SUBCASE("corrupt magic is a format error") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_msf(bytes), FormatError);
  }
  SUBCASE("bad version is a format error") {
    bytes[4] = 99;
    CHECK_THROWS_AS(decode_msf(bytes), FormatError);
  }
  SUBCASE("truncated payload is a length error") {
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_msf(bytes), LengthError);
  }
  SUBCASE("trailing garbage is a length error") {
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_msf(bytes), LengthError);
  }
  SUBCASE("dim mismatch inside a sequence is a schema error before any write") {
    FeatureSequence bad = seq;
    bad.channels[1].resize(2, dims[1]); // ragged frame count
    const auto target = temp_dir() / "never.msf";
    std::filesystem::remove(target);
    CHECK_THROWS_AS(write_msf(bad, target), SchemaError);
    CHECK(!std::filesystem::exists(target));
  }
}

TEST_CASE("interpolate_missing: midpoint and boundary rules") {
  const ChannelDims dims = {2, 2, 2, 2};
  FeatureSequence seq = zero_sequence(3, dims);
  const int c = 0;
  seq.channels[c].row(0) << 1.0f, -2.0f;
  seq.channels[c].row(2) << 3.0f, 6.0f;
  seq.presence[c] = {1, 0, 1};
  seq.channels[c].row(1).setZero();

  const FeatureSequence out = interpolate_missing(seq, ChannelId::Face);
  CHECK(out.channels[c](1, 0) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(out.channels[c](1, 1) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(out.presence[c] == std::vector<std::uint8_t>{1, 1, 1});

  SUBCASE("missing head copies the first detection") {
    FeatureSequence s2 = zero_sequence(2, dims);
    s2.presence[c] = {0, 1};
    s2.channels[c].row(1) << 5.0f, 7.0f;
    const FeatureSequence o2 = interpolate_missing(s2, ChannelId::Face);
    CHECK(o2.channels[c](0, 0) == 5.0f);
    CHECK(o2.channels[c](0, 1) == 7.0f);
  }
}

TEST_CASE("interpolate_missing: [1,0,0,1] linear ramp") {
  // v0 = 0-vector, v3 = 3*ones: hand evaluation of the linear formula gives
  // ones at t=1 and 2*ones at t=2.
  const ChannelDims dims = {3, 2, 2, 2};
  FeatureSequence seq = zero_sequence(4, dims);
  const int c = 0;
  seq.presence[c] = {1, 0, 0, 1};
  seq.channels[c].row(3).setConstant(3.0f);

  const FeatureSequence out = interpolate_missing(seq, ChannelId::Face);
  for (int j = 0; j < dims[c]; ++j) {
    CHECK(out.channels[c](1, j) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.channels[c](2, j) == doctest::Approx(2.0).epsilon(1e-6));
  }
}

TEST_CASE("interpolate_missing: idempotent, preserves present cells, flags dead channels") {
  const ChannelDims dims = {4, 3, 3, 2};
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    FeatureSequence seq = random_sequence(seed, 9, dims);
    // zero out absent cells, as the data model requires
    for (int c = 0; c < kNumChannels; ++c)
      for (std::int64_t t = 0; t < seq.frames(); ++t)
        if (!seq.presence[c][t]) seq.channels[c].row(t).setZero();

    FeatureSequence once = seq;
    for (int c = 0; c < kNumChannels; ++c) {
      const MatF before = once.channels[c];
      const auto presence_before = once.presence[c];
      once = interpolate_missing(once, static_cast<ChannelId>(c));
      for (std::int64_t t = 0; t < seq.frames(); ++t)
        if (presence_before[t])
          CHECK(std::memcmp(before.row(t).data(), once.channels[c].row(t).data(),
                            sizeof(float) * static_cast<std::size_t>(dims[c])) == 0);
    }
    FeatureSequence twice = once;
    for (int c = 0; c < kNumChannels; ++c)
      twice = interpolate_missing(twice, static_cast<ChannelId>(c));
    CHECK(twice == once);
  }

  SUBCASE("all-absent channel stays zero and raises the diagnostic flag") {
    FeatureSequence seq = random_sequence(3, 5, dims);
    std::fill(seq.presence[2].begin(), seq.presence[2].end(), std::uint8_t{0});
    const FeatureSequence out = interpolate_missing(seq, ChannelId::RightHand);
    CHECK(out.interp_all_missing[2]);
    CHECK(out.channels[2].isZero(0.0f));
    CHECK(std::all_of(out.presence[2].begin(), out.presence[2].end(),
                      [](std::uint8_t v) { return v == 1; }));
  }
}

TEST_CASE("normalize_pose: worked example and invariances") {
  PoseLandmarks lm;
  lm.points[PoseLandmarks::kNose] = {0.0, -1.0};
  lm.points[PoseLandmarks::kLeftShoulder] = {-1.0, 0.0};
  lm.points[PoseLandmarks::kRightShoulder] = {1.0, 0.0};
  lm.points[3] = {-1.5, 1.0};
  lm.points[4] = {1.5, 1.0};
  lm.points[5] = {-2.0, 2.0};
  lm.points[6] = {2.0, 2.0};

  const auto out = normalize_pose(lm);
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(-0.5));
  CHECK(out[2] == doctest::Approx(-0.5));
  CHECK(out[3] == doctest::Approx(0.0));
  CHECK(out[4] == doctest::Approx(0.5));
  CHECK(out[5] == doctest::Approx(0.0));

  SUBCASE("translation invariance") {
    PoseLandmarks shifted = lm;
    for (auto& p : shifted.points) {
      p[0] += 10.0;
      p[1] += 10.0;
    }
    const auto out2 = normalize_pose(shifted);
    for (int i = 0; i < 14; ++i) CHECK(out2[i] == doctest::Approx(out[i]).epsilon(1e-12));
  }
  SUBCASE("uniform scale invariance") {
    PoseLandmarks scaled = lm;
    for (auto& p : scaled.points) {
      p[0] *= 3.0;
      p[1] *= 3.0;
    }
    const auto out3 = normalize_pose(scaled);
    for (int i = 0; i < 14; ++i) CHECK(out3[i] == doctest::Approx(out[i]).epsilon(1e-12));
  }
  SUBCASE("coincident shoulders are rejected") {
    PoseLandmarks bad = lm;
    bad.points[PoseLandmarks::kRightShoulder] = bad.points[PoseLandmarks::kLeftShoulder];
    CHECK_THROWS_AS(normalize_pose(bad), DegeneratePoseError);
  }
}

TEST_CASE("downsample: index selection, identity, ceiling count, composition") {
  const ChannelDims dims = {2, 2, 2, 2};
  FeatureSequence seq = random_sequence(11, 6, dims, /*random_presence=*/false);
  seq.frame_rate_hint = 30.0f;

  const FeatureSequence half = downsample(seq, 2);
  CHECK(half.frames() == 3);
  CHECK(half.frame_rate_hint == 15.0f);
  for (std::int64_t i = 0; i < 3; ++i)
    CHECK((half.channels[0].row(i).array() == seq.channels[0].row(2 * i).array()).all());

  CHECK(downsample(seq, 1) == seq);

  const FeatureSequence five = random_sequence(12, 5, dims, false);
  CHECK(downsample(five, 2).frames() == 3);

  const FeatureSequence big = random_sequence(13, 37, dims, false);
  CHECK(downsample(downsample(big, 2), 3) == downsample(big, 6));

  CHECK_THROWS_AS(downsample(seq, 0), ArgumentError);
}

TEST_CASE("msf: randomized round-trip property (bitwise)") {
  const ChannelDims dims = {6, 5, 5, 3};
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const FeatureSequence seq =
        random_sequence(seed, 1 + static_cast<std::int64_t>(seed % 9), dims);
    const auto bytes = encode_msf(payload_from_sequence(seq));
    const FeatureSequence back = sequence_from_payload(decode_msf(bytes));
    CHECK(back == seq);
    CHECK(encode_msf(payload_from_sequence(back)) == bytes);
  }
}
