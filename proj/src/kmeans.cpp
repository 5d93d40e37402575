// SPDX-License-Identifier: Apache-2.0

#include "signstream/kmeans.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "signstream/rng.hpp"

namespace signstream {

namespace {

constexpr char kMagic[4] = {'K', 'M', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

// Squared distance row -> centroid, accumulated in double for stable
// inertia bookkeeping.
double sq_dist(const MatF& a, std::int64_t ra, const MatF& b, std::int64_t rb) {
  double s = 0.0;
  const int n = static_cast<int>(a.cols());
  for (int j = 0; j < n; ++j) {
    const double d = static_cast<double>(a(ra, j)) - static_cast<double>(b(rb, j));
    s += d * d;
  }
  return s;
}

struct AssignResult {
  std::vector<int> labels;
  std::vector<double> dist2;
  double inertia = 0.0;
};

AssignResult assign_nearest(const MatF& data, const MatF& centroids) {
  const std::int64_t n = data.rows();
  const std::int64_t k = centroids.rows();
  AssignResult r;
  r.labels.resize(static_cast<std::size_t>(n));
  r.dist2.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    double best_d = sq_dist(data, i, centroids, 0);
    for (std::int64_t j = 1; j < k; ++j) {
      const double d = sq_dist(data, i, centroids, j);
      if (d < best_d) { // strict: ties keep the lowest index
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    r.labels[static_cast<std::size_t>(i)] = best;
    r.dist2[static_cast<std::size_t>(i)] = best_d;
    r.inertia += best_d;
  }
  return r;
}

MatF kmeanspp_init(const MatF& data, int k, Rng& rng) {
  const std::int64_t n = data.rows();
  MatF centroids(k, data.cols());
  const std::int64_t first = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(n)));
  centroids.row(0) = data.row(first);

  std::vector<double> min_d2(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) min_d2[static_cast<std::size_t>(i)] = sq_dist(data, i, centroids, 0);

  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (const double d : min_d2) total += d;
    std::int64_t chosen;
    if (total <= 0.0) {
      // All remaining points coincide with chosen centroids.
      chosen = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(n)));
    } else {
      const double target = rng.next_double() * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::int64_t i = 0; i < n; ++i) {
        acc += min_d2[static_cast<std::size_t>(i)];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    }
    centroids.row(c) = data.row(chosen);
    for (std::int64_t i = 0; i < n; ++i) {
      const double d = sq_dist(data, i, centroids, c);
      if (d < min_d2[static_cast<std::size_t>(i)]) min_d2[static_cast<std::size_t>(i)] = d;
    }
  }
  return centroids;
}

struct SingleRun {
  MatF centroids;
  std::vector<double> trace;
  double inertia = std::numeric_limits<double>::infinity();
  int iterations = 0;
};

SingleRun lloyd(const MatF& data, int k, std::uint64_t seed, int max_iters, double tol) {
  Rng rng(seed);
  SingleRun run;
  run.centroids = kmeanspp_init(data, k, rng);
  const std::int64_t n = data.rows();

  for (int iter = 0; iter < max_iters; ++iter) {
    AssignResult a = assign_nearest(data, run.centroids);
    run.trace.push_back(a.inertia);
    run.inertia = a.inertia;
    run.iterations = iter + 1;

    Mat<double> sums = Mat<double>::Zero(k, data.cols());
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      const int c = a.labels[static_cast<std::size_t>(i)];
      sums.row(c) += data.row(i).cast<double>();
      counts[static_cast<std::size_t>(c)]++;
    }

    MatF next(k, data.cols());
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        next.row(c) =
            (sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)])).cast<float>();
      } else {
        // Re-seed a dead centroid with the point farthest from its own one.
        std::int64_t far_i = 0;
        double far_d = -1.0;
        for (std::int64_t i = 0; i < n; ++i) {
          if (a.dist2[static_cast<std::size_t>(i)] > far_d) {
            far_d = a.dist2[static_cast<std::size_t>(i)];
            far_i = i;
          }
        }
        next.row(c) = data.row(far_i);
        a.dist2[static_cast<std::size_t>(far_i)] = -1.0; // don't reuse for another dead cluster
      }
    }

    double max_shift = 0.0;
    for (int c = 0; c < k; ++c) {
      const double shift = std::sqrt(sq_dist(next, c, run.centroids, c));
      if (shift > max_shift) max_shift = shift;
    }
    run.centroids = next;
    if (max_shift < tol) break;
  }

  // Trace ends with the inertia of the final centroids.
  AssignResult final_a = assign_nearest(data, run.centroids);
  run.trace.push_back(final_a.inertia);
  run.inertia = final_a.inertia;
  return run;
}

} // namespace

void ClusterModel::validate() const {
  if (k < 1) throw SchemaError("cluster model: k must be >= 1");
  if (centroids.rows() != k) throw SchemaError("cluster model: centroid row count != k");
  if (!centroids.allFinite()) throw NumericError("cluster model: non-finite centroid");
}

KMeansFit fit_kmeans(const MatF& data, int k, const KMeansOptions& opts) {
  if (k < 1) throw ArgumentError("fit_kmeans: k must be >= 1");
  if (data.rows() < k)
    throw InsufficientDataError("fit_kmeans: " + std::to_string(data.rows()) +
                                " points for k=" + std::to_string(k));
  if (opts.restarts < 1) throw ArgumentError("fit_kmeans: restarts must be >= 1");

  SingleRun best;
  for (int r = 0; r < opts.restarts; ++r) {
    SingleRun run = lloyd(data, k, derive_seed(opts.seed, "kmeans.restart", r), opts.max_iters,
                          opts.tol);
    for (std::size_t i = 0; i + 1 < run.trace.size(); ++i)
      if (run.trace[i + 1] > run.trace[i] * (1.0 + 1e-9) + 1e-9)
        throw NumericError("fit_kmeans: inertia increased during Lloyd iteration");
    if (run.inertia < best.inertia) best = std::move(run);
  }

  KMeansFit fit;
  fit.model.k = k;
  fit.model.centroids = best.centroids;
  fit.inertia_trace = best.trace;
  fit.iterations = best.iterations;
  fit.inertia = best.inertia;
  fit.model.validate();
  return fit;
}

std::vector<int> assign_rows(const ClusterModel& model, const MatF& rows) {
  model.validate();
  if (rows.cols() != model.centroids.cols())
    throw SchemaError("assign: vector dim " + std::to_string(rows.cols()) +
                      " != model dim " + std::to_string(model.centroids.cols()));
  return assign_nearest(rows, model.centroids).labels;
}

std::vector<int> assign(const ClusterModel& model, const FeatureSequence& seq) {
  return assign_rows(model, seq.channels[static_cast<int>(model.channel_id)]);
}

ClusterAssignments assign_all(const std::array<ClusterModel, kNumChannels>& models,
                              const FeatureSequence& seq) {
  ClusterAssignments out;
  for (int c = 0; c < kNumChannels; ++c) {
    if (models[c].channel_id != static_cast<ChannelId>(c))
      throw SchemaError("assign_all: model order must be face, left_hand, right_hand, body_pose");
    out.labels[c] = assign(models[c], seq);
  }
  return out;
}

void write_cluster_model(const ClusterModel& model, const std::filesystem::path& path) {
  model.validate();
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  auto put_u32 = [&out](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put_u32(kVersion);
  put_u32(static_cast<std::uint32_t>(model.channel_id));
  put_u32(static_cast<std::uint32_t>(model.k));
  put_u32(static_cast<std::uint32_t>(model.centroids.cols()));
  for (std::int64_t i = 0; i < model.centroids.size(); ++i) {
    std::uint32_t bits;
    const float v = model.centroids.data()[i]; // row-major storage
    std::memcpy(&bits, &v, 4);
    put_u32(bits);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

ClusterModel read_cluster_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("kmc: bad magic");
  std::size_t pos = 4;
  auto get_u32 = [&bytes, &pos]() {
    if (pos + 4 > bytes.size()) throw LengthError("kmc: truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  const std::uint32_t version = get_u32();
  if (version != kVersion) throw FormatError("kmc: unsupported version");
  ClusterModel model;
  const std::uint32_t channel = get_u32();
  if (channel >= kNumChannels) throw FormatError("kmc: bad channel id");
  model.channel_id = static_cast<ChannelId>(channel);
  model.k = static_cast<int>(get_u32());
  const std::uint32_t dim = get_u32();
  model.centroids.resize(model.k, static_cast<int>(dim));
  for (std::int64_t i = 0; i < model.centroids.size(); ++i) {
    const std::uint32_t bits = get_u32();
    float v;
    std::memcpy(&v, &bits, 4);
    model.centroids.data()[i] = v;
  }
  if (pos != bytes.size()) throw LengthError("kmc: trailing bytes");
  model.validate();
  return model;
}

std::vector<ClusterSampleRow> dump_cluster_samples(const ClusterModel& model,
                                                   const Dataset& dataset,
                                                   const std::vector<int>& cluster_ids,
                                                   int n_per_cluster, std::uint64_t seed) {
  if (n_per_cluster < 0) throw ArgumentError("dump_cluster_samples: n_per_cluster must be >= 0");
  for (const int id : cluster_ids)
    if (id < 0 || id >= model.k)
      throw ArgumentError("dump_cluster_samples: cluster id " + std::to_string(id) +
                          " out of range");

  std::vector<std::vector<std::pair<int, std::int64_t>>> members(
      static_cast<std::size_t>(model.k));
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    const auto labels = assign(model, dataset.sequences[s]);
    for (std::size_t t = 0; t < labels.size(); ++t)
      members[static_cast<std::size_t>(labels[t])].emplace_back(static_cast<int>(s),
                                                                static_cast<std::int64_t>(t));
  }

  std::vector<ClusterSampleRow> rows;
  for (const int id : cluster_ids) {
    ClusterSampleRow row;
    row.cluster_id = id;
    auto& cells = members[static_cast<std::size_t>(id)];
    if (cells.empty()) {
      row.empty_warning = true;
    } else if (static_cast<int>(cells.size()) <= n_per_cluster) {
      row.cells = cells;
    } else {
      Rng rng(derive_seed(seed, "cluster.dump", static_cast<std::uint64_t>(id)));
      for (const std::size_t idx :
           rng.sample_without_replacement(cells.size(), static_cast<std::size_t>(n_per_cluster)))
        row.cells.push_back(cells[idx]);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

MatF collect_channel_frames(const Dataset& dataset, ChannelId channel, double fraction,
                            std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ArgumentError("collect_channel_frames: fraction must be in (0, 1]");
  const int c = static_cast<int>(channel);
  std::int64_t total = 0;
  for (const auto& seq : dataset.sequences) total += seq.frames();
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(total), 1);
  std::int64_t kept = total;
  if (fraction < 1.0) {
    const auto want = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(total)));
    Rng rng(derive_seed(seed, "cluster.subsample"));
    const auto chosen = rng.sample_without_replacement(static_cast<std::size_t>(total),
                                                       static_cast<std::size_t>(want));
    std::fill(keep.begin(), keep.end(), std::uint8_t{0});
    for (const auto i : chosen) keep[i] = 1;
    kept = want;
  }
  const int dim = dataset.sequences.empty() ? 0 : static_cast<int>(dataset.sequences[0].channels[c].cols());
  MatF out(kept, dim);
  std::int64_t row = 0;
  std::int64_t global = 0;
  for (const auto& seq : dataset.sequences)
    for (std::int64_t t = 0; t < seq.frames(); ++t, ++global)
      if (keep[static_cast<std::size_t>(global)]) out.row(row++) = seq.channels[c].row(t);
  return out;
}

} // namespace signstream
