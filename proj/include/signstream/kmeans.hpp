// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "signstream/dataset.hpp"
#include "signstream/feature_io.hpp"

namespace signstream {

// Not enough points to place the requested number of centroids.
class InsufficientDataError : public Error {
public:
  using Error::Error;
};

// Per-channel codebook mapping feature vectors to discrete pseudo-labels.
struct ClusterModel {
  ChannelId channel_id = ChannelId::Face;
  int k = 0;
  MatF centroids; // k x dim, row-major
  float trained_on_fraction = 1.0f;

  int dim() const { return static_cast<int>(centroids.cols()); }
  void validate() const;
};

struct KMeansOptions {
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;
  // Independent seeded restarts; the run with the lowest final inertia wins.
  int restarts = 3;
};

struct KMeansFit {
  ClusterModel model;
  std::vector<double> inertia_trace; // winning restart, one entry per assignment pass
  int iterations = 0;
  double inertia = 0.0;
};

// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed;
// empty clusters are re-seeded with the point farthest from its centroid.
KMeansFit fit_kmeans(const MatF& data, int k, const KMeansOptions& opts);

// Nearest centroid by squared Euclidean distance, ties to the lowest index.
std::vector<int> assign_rows(const ClusterModel& model, const MatF& rows);
std::vector<int> assign(const ClusterModel& model, const FeatureSequence& seq);

// Per-frame pseudo-labels for all four channels of one sequence.
struct ClusterAssignments {
  std::array<std::vector<int>, kNumChannels> labels;

  std::size_t frames() const { return labels[0].size(); }
};

ClusterAssignments assign_all(const std::array<ClusterModel, kNumChannels>& models,
                              const FeatureSequence& seq);

// Codebook file: "KMC1" | u32 version | u32 channel_id | u32 k | u32 dim |
// k x dim f32 centroids, row-major little-endian.
void write_cluster_model(const ClusterModel& model, const std::filesystem::path& path);
ClusterModel read_cluster_model(const std::filesystem::path& path);

// Gathers every (sequence, frame) cell of one channel whose assignment is a
// requested cluster, then samples up to n_per_cluster of them uniformly.
struct ClusterSampleRow {
  int cluster_id = 0;
  std::vector<std::pair<int, std::int64_t>> cells; // (sequence index, frame)
  bool empty_warning = false;
};

std::vector<ClusterSampleRow> dump_cluster_samples(const ClusterModel& model,
                                                   const Dataset& dataset,
                                                   const std::vector<int>& cluster_ids,
                                                   int n_per_cluster, std::uint64_t seed);

// Seeded uniform subsample of all frames of one channel across a dataset;
// fraction in (0, 1]. Used to mirror "fit on a fraction of the data".
MatF collect_channel_frames(const Dataset& dataset, ChannelId channel, double fraction,
                            std::uint64_t seed);

} // namespace signstream
