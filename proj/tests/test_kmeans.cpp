// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "signstream/kmeans.hpp"
#include "signstream/rng.hpp"
#include "signstream/synthetic.hpp"

using namespace signstream;

namespace {

// Test-side Lloyd used only to brute-force seeding sweeps. Plain and slow;
// kept independent of the library implementation.
struct OracleResult {
  MatF centroids;
  std::vector<int> labels;
  double inertia = 0.0;
};

OracleResult oracle_lloyd(const MatF& data, MatF centroids, int iters = 200) {
  const std::int64_t n = data.rows();
  const std::int64_t k = centroids.rows();
  OracleResult r;
  r.labels.assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    r.inertia = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d =
          (data.row(i).cast<double>() - centroids.row(0).cast<double>()).squaredNorm();
      for (std::int64_t c = 1; c < k; ++c) {
        const double d =
            (data.row(i).cast<double>() - centroids.row(c).cast<double>()).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      if (r.labels[static_cast<std::size_t>(i)] != best) changed = true;
      r.labels[static_cast<std::size_t>(i)] = best;
      r.inertia += best_d;
    }
    MatF next = MatF::Zero(k, data.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      next.row(r.labels[static_cast<std::size_t>(i)]) += data.row(i);
      counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])]++;
    }
    for (std::int64_t c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        next.row(c) /= static_cast<float>(counts[static_cast<std::size_t>(c)]);
      else
        next.row(c) = centroids.row(c);
    if (!changed && it > 0) break;
    centroids = next;
  }
  r.centroids = centroids;
  return r;
}

MatF two_blobs(int per_blob, std::uint64_t seed, float separation = 10.0f) {
  Rng rng(seed);
  MatF data(2 * per_blob, 2);
  for (int i = 0; i < per_blob; ++i) {
    data(i, 0) = static_cast<float>(rng.next_normal() * 0.5);
    data(i, 1) = static_cast<float>(rng.next_normal() * 0.5);
    data(per_blob + i, 0) = separation + static_cast<float>(rng.next_normal() * 0.5);
    data(per_blob + i, 1) = separation + static_cast<float>(rng.next_normal() * 0.5);
  }
  return data;
}

} // namespace

TEST_CASE("fit_kmeans: perfectly separable pairs give the exact centroids") {
  MatF data(4, 1);
  data << 0.0f, 0.0f, 10.0f, 10.0f;
  KMeansOptions opts;
  opts.seed = 1;
  const KMeansFit fit = fit_kmeans(data, 2, opts);
  CHECK(fit.inertia == doctest::Approx(0.0));
  std::vector<float> cs = {fit.model.centroids(0, 0), fit.model.centroids(1, 0)};
  std::sort(cs.begin(), cs.end());
  CHECK(cs[0] == doctest::Approx(0.0));
  CHECK(cs[1] == doctest::Approx(10.0));
}

TEST_CASE("fit_kmeans: k = |data| puts every distinct point in its own cluster") {
  MatF data(5, 2);
  data << 0, 0, 1, 0, 0, 1, 1, 1, 2, 2;
  KMeansOptions opts;
  opts.seed = 3;
  const KMeansFit fit = fit_kmeans(data, 5, opts);
  CHECK(fit.inertia == doctest::Approx(0.0));
}

TEST_CASE("fit_kmeans: requires at least k points and consistent dims") {
  MatF data(3, 2);
  data.setZero();
  KMeansOptions opts;
  CHECK_THROWS_AS(fit_kmeans(data, 4, opts), InsufficientDataError);
}

TEST_CASE("fit_kmeans: two separated blobs, partition matches the blob partition") {
  const MatF data = two_blobs(15, 9);
  KMeansOptions opts;
  opts.seed = 17;
  const KMeansFit fit = fit_kmeans(data, 2, opts);
  const auto labels = assign_rows(fit.model, data);

  // Blob membership is rows [0,15) vs [15,30).
  for (int i = 1; i < 15; ++i) CHECK(labels[i] == labels[0]);
  for (int i = 16; i < 30; ++i) CHECK(labels[i] == labels[15]);
  CHECK(labels[0] != labels[15]);

  // Brute-force oracle: enumerate every data-point pair as initial
  // centroids, run Lloyd, keep the best final inertia.
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_labels;
  for (int i = 0; i < 30; ++i)
    for (int j = i + 1; j < 30; ++j) {
      MatF init(2, 2);
      init.row(0) = data.row(i);
      init.row(1) = data.row(j);
      const OracleResult r = oracle_lloyd(data, init);
      if (r.inertia < best) {
        best = r.inertia;
        best_labels = r.labels;
      }
    }
  // The implementation's fit must not be worse than the sweep.
  CHECK(fit.inertia <= best * (1.0 + 1e-9) + 1e-9);
  // And the optimal sweep partition equals the blob partition too.
  for (int i = 1; i < 15; ++i) CHECK(best_labels[i] == best_labels[0]);
  for (int i = 16; i < 30; ++i) CHECK(best_labels[i] == best_labels[15]);
}

TEST_CASE("fit_kmeans: inertia trace is non-increasing and centroids are assigned means") {
  SyntheticSpec spec;
  spec.num_seqs = 4;
  spec.t_min = 30;
  spec.t_max = 40;
  spec.seed = 77;
  spec.num_latent_gestures = 4;
  spec.dims = {8, 6, 6, 4};
  const Dataset ds = dataset_from_synthetic(gen_synthetic(spec));
  const MatF data = collect_channel_frames(ds, ChannelId::Face, 1.0, 0);

  KMeansOptions opts;
  opts.seed = 5;
  opts.restarts = 2;
  const KMeansFit fit = fit_kmeans(data, 6, opts);
  for (std::size_t i = 0; i + 1 < fit.inertia_trace.size(); ++i)
    CHECK(fit.inertia_trace[i + 1] <= fit.inertia_trace[i] * (1.0 + 1e-9) + 1e-9);

  const auto labels = assign_rows(fit.model, data);
  for (int c = 0; c < 6; ++c) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(data.cols());
    int count = 0;
    for (std::int64_t i = 0; i < data.rows(); ++i)
      if (labels[static_cast<std::size_t>(i)] == c) {
        mean += data.row(i).cast<double>();
        ++count;
      }
    REQUIRE(count > 0);
    mean /= count;
    const double err = (fit.model.centroids.row(c).cast<double>().transpose() - mean).norm();
    CHECK(err < 1e-3);
  }
}

TEST_CASE("assign: exact centroid match and tie-breaking to the lowest index") {
  ClusterModel model;
  model.channel_id = ChannelId::Face;
  model.k = 10;
  model.centroids = MatF::Zero(10, 3);
  for (int i = 0; i < 10; ++i) model.centroids(i, 0) = static_cast<float>(10 * (i + 1));
  // centroid 2 and centroid 5 are mirror images; the query sits exactly
  // between them.
  model.centroids.row(2) << 0.0f, 1.0f, 0.0f;
  model.centroids.row(5) << 0.0f, -1.0f, 0.0f;

  MatF q(2, 3);
  q.row(0) = model.centroids.row(7);
  q.row(1) << 0.0f, 0.0f, 0.0f;
  const auto labels = assign_rows(model, q);
  CHECK(labels[0] == 7);
  CHECK(labels[1] == 2);
}

TEST_CASE("assign: agrees with an exhaustive nearest-neighbour scan") {
  Rng rng(123);
  ClusterModel model;
  model.channel_id = ChannelId::Face;
  model.k = 4;
  model.centroids = MatF(4, 6);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) model.centroids(i, j) = static_cast<float>(rng.next_normal());

  MatF queries(64, 6);
  for (std::int64_t i = 0; i < queries.rows(); ++i)
    for (int j = 0; j < 6; ++j) queries(i, j) = static_cast<float>(rng.next_normal());

  const auto labels = assign_rows(model, queries);
  for (std::int64_t i = 0; i < queries.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < 4; ++c) {
      double d = 0.0;
      for (int j = 0; j < 6; ++j) {
        const double dv =
            static_cast<double>(queries(i, j)) - static_cast<double>(model.centroids(c, j));
        d += dv * dv;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    CHECK(labels[static_cast<std::size_t>(i)] == best);
  }
}

TEST_CASE("assign: re-assigning distinct centroids yields labels 0..k-1, and is pure") {
  Rng rng(5);
  ClusterModel model;
  model.channel_id = ChannelId::LeftHand;
  model.k = 6;
  model.centroids = MatF(6, 4);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 4; ++j) model.centroids(i, j) = static_cast<float>(rng.next_normal());

  const auto labels = assign_rows(model, model.centroids);
  for (int i = 0; i < 6; ++i) CHECK(labels[static_cast<std::size_t>(i)] == i);
  CHECK(assign_rows(model, model.centroids) == labels);

  MatF wrong(2, 5);
  wrong.setZero();
  CHECK_THROWS_AS(assign_rows(model, wrong), SchemaError);
}

TEST_CASE("kmc file: round trip and format errors") {
  Rng rng(21);
  ClusterModel model;
  model.channel_id = ChannelId::BodyPose;
  model.k = 3;
  model.centroids = MatF(3, 5);
  for (std::int64_t i = 0; i < model.centroids.size(); ++i)
    model.centroids.data()[i] = static_cast<float>(rng.next_normal());
  model.trained_on_fraction = 0.1f;

  const auto dir = std::filesystem::temp_directory_path() / "signstream_kmc_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "pose.kmc";
  write_cluster_model(model, path);
  const ClusterModel back = read_cluster_model(path);
  CHECK(back.channel_id == model.channel_id);
  CHECK(back.k == model.k);
  CHECK((back.centroids.array() == model.centroids.array()).all());

  auto corrupt = [&](std::size_t pos, std::uint8_t val) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes[pos] = static_cast<char>(val);
    const auto bad = dir / "bad.kmc";
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    return bad;
  };
  CHECK_THROWS_AS(read_cluster_model(corrupt(0, 'X')), FormatError);
}

TEST_CASE("dump_cluster_samples: undersized cluster, determinism, singleton") {
  // Hand-built dataset where membership is obvious: channel 0 values near 0
  // belong to cluster 0, near 10 to cluster 1.
  const ChannelDims dims = {1, 1, 1, 1};
  Dataset ds;
  ds.dims = dims;
  for (int s = 0; s < 2; ++s) {
    FeatureSequence seq = zero_sequence(4, dims);
    for (std::int64_t t = 0; t < 4; ++t) seq.channels[0](t, 0) = static_cast<float>(10 * s);
    ds.sequences.push_back(seq);
    ds.ids.push_back("seq" + std::to_string(s));
  }
  // make exactly one frame of sequence 1 belong to cluster 2
  ds.sequences[1].channels[0](3, 0) = 100.0f;

  ClusterModel model;
  model.channel_id = ChannelId::Face;
  model.k = 4;
  model.centroids = MatF::Zero(4, 1);
  model.centroids(1, 0) = 10.0f;
  model.centroids(2, 0) = 100.0f;
  model.centroids(3, 0) = -50.0f; // nothing assigned here

  const auto rows = dump_cluster_samples(model, ds, {0, 1, 2, 3}, 10, 7);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].cells.size() == 4); // undersized: all members returned
  CHECK(rows[1].cells.size() == 3);
  REQUIRE(rows[2].cells.size() == 1); // singleton
  CHECK(rows[2].cells[0] == std::make_pair(1, std::int64_t{3}));
  CHECK(rows[3].empty_warning);
  CHECK(rows[3].cells.empty());

  const auto rows2 = dump_cluster_samples(model, ds, {0, 1, 2, 3}, 10, 7);
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].cells == rows2[i].cells);

  SUBCASE("sampling is uniform-ish and seeded when the cluster is oversized") {
    const auto sampled = dump_cluster_samples(model, ds, {0}, 2, 3);
    CHECK(sampled[0].cells.size() == 2);
    const auto sampled2 = dump_cluster_samples(model, ds, {0}, 2, 3);
    CHECK(sampled[0].cells == sampled2[0].cells);
  }
  SUBCASE("out-of-range cluster id is rejected") {
    CHECK_THROWS_AS(dump_cluster_samples(model, ds, {9}, 1, 0), ArgumentError);
  }
}

TEST_CASE("collect_channel_frames: seeded fraction subsample") {
  SyntheticSpec spec;
  spec.num_seqs = 3;
  spec.t_min = 20;
  spec.t_max = 20;
  spec.seed = 8;
  spec.num_latent_gestures = 2;
  spec.dims = {4, 3, 3, 2};
  const Dataset ds = dataset_from_synthetic(gen_synthetic(spec));

  const MatF all = collect_channel_frames(ds, ChannelId::Face, 1.0, 0);
  CHECK(all.rows() == 60);
  const MatF tenth = collect_channel_frames(ds, ChannelId::Face, 0.1, 4);
  CHECK(tenth.rows() == 6);
  const MatF tenth2 = collect_channel_frames(ds, ChannelId::Face, 0.1, 4);
  CHECK((tenth.array() == tenth2.array()).all());
  CHECK_THROWS_AS(collect_channel_frames(ds, ChannelId::Face, 0.0, 0), ArgumentError);
}
