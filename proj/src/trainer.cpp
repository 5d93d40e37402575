// SPDX-License-Identifier: Apache-2.0

#include "signstream/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "signstream/rng.hpp"

namespace signstream {

void TrainConfig::validate() const {
  if (total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
  if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
    throw ConfigError("train: warmup_fraction must be in (0, 1)");
  if (frame_budget < 1) throw ConfigError("train: frame_budget must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    throw ConfigError("train: mask_ratio outside [0, 1]");
  if (mask_span < 1) throw ConfigError("train: mask_span must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.total_steps < 1) throw ArgumentError("lr_at: schedule needs total_steps >= 1");
  if (step < 0 || step > cfg.total_steps)
    throw ArgumentError("lr_at: step " + std::to_string(step) + " outside [0, total_steps]");
  std::int64_t warmup =
      static_cast<std::int64_t>(std::floor(cfg.warmup_fraction * static_cast<double>(cfg.total_steps)));
  if (warmup < 1) warmup = 1;
  if (step <= warmup)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - warmup);
}

std::vector<Batch> make_batches(const std::vector<std::int64_t>& seq_lengths,
                                std::int64_t frame_budget, std::uint64_t seed) {
  if (frame_budget < 1) throw ArgumentError("make_batches: budget must be >= 1");
  std::vector<BatchItem> items;
  for (std::size_t s = 0; s < seq_lengths.size(); ++s) {
    const std::int64_t len = seq_lengths[s];
    if (len < 1) throw SchemaError("make_batches: empty sequence");
    for (std::int64_t start = 0; start < len; start += frame_budget)
      items.push_back({static_cast<int>(s), start, std::min(frame_budget, len - start)});
  }
  Rng rng(seed);
  rng.shuffle(items);

  std::vector<Batch> batches;
  Batch current;
  std::int64_t used = 0;
  for (const auto& item : items) {
    if (!current.empty() && used + item.length > frame_budget) {
      batches.push_back(std::move(current));
      current.clear();
      used = 0;
    }
    current.push_back(item);
    used += item.length;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

FeatureSequence slice_sequence(const FeatureSequence& seq, std::int64_t start,
                               std::int64_t length) {
  if (start < 0 || length < 1 || start + length > seq.frames())
    throw ArgumentError("slice_sequence: window out of range");
  if (start == 0 && length == seq.frames()) return seq;
  FeatureSequence out;
  for (int c = 0; c < kNumChannels; ++c) {
    out.channels[c] = seq.channels[c].middleRows(start, length);
    out.presence[c].assign(seq.presence[c].begin() + start,
                           seq.presence[c].begin() + start + length);
  }
  out.frame_rate_hint = seq.frame_rate_hint;
  return out;
}

void adam_update(EncoderParams<float>& params, EncoderParams<float>& grads, AdamState& state,
                 double lr, const TrainConfig& cfg) {
  state.t += 1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));

  auto p = collect_params(params);
  auto g = collect_params(grads);
  auto m = collect_params(state.m);
  auto v = collect_params(state.v);
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::int64_t j = 0; j < p[i].size; ++j) {
      const double gj = static_cast<double>(g[i].data[j]);
      const double mj = b1 * static_cast<double>(m[i].data[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[i].data[j]) + (1.0 - b2) * gj * gj;
      m[i].data[j] = static_cast<float>(mj);
      v[i].data[j] = static_cast<float>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p[i].data[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

std::string metrics_to_json_line(const StepMetrics& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["loss_total"] = m.loss_total;
  j["loss_per_channel"] = m.loss_per_channel;
  j["acc_per_channel"] = m.acc_per_channel;
  j["wallclock_ms"] = m.wallclock_ms;
  return j.dump();
}

void save_train_state(const EncoderConfig& cfg, const TrainState& state,
                      const std::filesystem::path& dir, const std::string& tag) {
  std::filesystem::create_directories(dir);
  save_checkpoint(cfg, state.params, dir / ("checkpoint_" + tag + ".shb"));
  save_checkpoint(cfg, state.adam.m, dir / ("adam_m_" + tag + ".shb"));
  save_checkpoint(cfg, state.adam.v, dir / ("adam_v_" + tag + ".shb"));
  nlohmann::json j;
  j["step"] = state.step;
  j["adam_t"] = state.adam.t;
  const auto tmp = dir / ("state_" + tag + ".json.tmp");
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, dir / ("state_" + tag + ".json"));
}

TrainState load_train_state(const EncoderConfig& cfg, const std::filesystem::path& dir,
                            const std::string& tag) {
  TrainState state;
  const Checkpoint model = load_checkpoint(dir / ("checkpoint_" + tag + ".shb"));
  if (!(model.config == cfg)) throw SchemaError("train state: config mismatch");
  state.params = model.params;
  state.adam.m = load_checkpoint(dir / ("adam_m_" + tag + ".shb")).params;
  state.adam.v = load_checkpoint(dir / ("adam_v_" + tag + ".shb")).params;
  std::ifstream f(dir / ("state_" + tag + ".json"));
  if (!f) throw IoError("train state: missing state json");
  nlohmann::json j;
  f >> j;
  state.step = j.at("step").get<std::int64_t>();
  state.adam.t = j.at("adam_t").get<std::int64_t>();
  return state;
}

namespace {

// Pure function of (seed, dataset, step): walks per-epoch schedules until
// the requested step's batch. Epoch schedules are cached by the caller.
struct ScheduleCursor {
  std::vector<std::int64_t> lengths;
  std::int64_t frame_budget = 0;
  std::uint64_t seed = 0;

  std::vector<Batch> epoch_batches;
  std::int64_t epoch = -1;
  std::int64_t consumed_before_epoch = 0; // total batches in epochs < epoch

  const Batch& batch_for_step(std::int64_t step) {
    if (epoch < 0) advance_epoch(0);
    while (step >= consumed_before_epoch + static_cast<std::int64_t>(epoch_batches.size()))
      advance_epoch(epoch + 1);
    if (step < consumed_before_epoch) { // resumed backwards: rebuild
      epoch = -1;
      consumed_before_epoch = 0;
      return batch_for_step(step);
    }
    return epoch_batches[static_cast<std::size_t>(step - consumed_before_epoch)];
  }

  void advance_epoch(std::int64_t e) {
    if (epoch >= 0) consumed_before_epoch += static_cast<std::int64_t>(epoch_batches.size());
    epoch = e;
    epoch_batches = make_batches(lengths, frame_budget,
                                 derive_seed(seed, "epoch", static_cast<std::uint64_t>(e)));
  }
};

double global_grad_norm(EncoderParams<float>& grads) {
  double sum = 0.0;
  for (const auto& ref : collect_params(grads))
    for (std::int64_t j = 0; j < ref.size; ++j)
      sum += static_cast<double>(ref.data[j]) * static_cast<double>(ref.data[j]);
  return std::sqrt(sum);
}

void scale_grads(EncoderParams<float>& grads, float scale) {
  for (auto& ref : collect_params(grads))
    for (std::int64_t j = 0; j < ref.size; ++j) ref.data[j] *= scale;
}

void check_finite(EncoderParams<float>& params, const std::filesystem::path& output_dir,
                  const EncoderConfig& cfg, const TrainState& state, const char* what) {
  for (const auto& ref : collect_params(params))
    for (std::int64_t j = 0; j < ref.size; ++j)
      if (!std::isfinite(ref.data[j])) {
        std::string snapshot;
        if (!output_dir.empty()) {
          save_train_state(cfg, state, output_dir, "diagnostic");
          snapshot = " (snapshot: " + (output_dir / "checkpoint_diagnostic.shb").string() + ")";
        }
        throw NumericError(std::string("pretrain: non-finite ") + what + " in " + ref.name +
                           snapshot);
      }
}

} // namespace

PretrainResult pretrain(const Dataset& dataset,
                        const std::array<ClusterModel, kNumChannels>& cluster_models,
                        const EncoderConfig& enc_cfg, const TrainConfig& train_cfg,
                        const std::filesystem::path& output_dir, const TrainState* resume) {
  enc_cfg.validate();
  train_cfg.validate();
  if (dataset.sequences.empty()) throw ArgumentError("pretrain: empty dataset");
  for (int c = 0; c < kNumChannels; ++c) {
    if (cluster_models[c].channel_id != static_cast<ChannelId>(c))
      throw SchemaError("pretrain: cluster model channel order mismatch");
    if (cluster_models[c].k != enc_cfg.k_per_channel)
      throw SchemaError("pretrain: cluster model k (" + std::to_string(cluster_models[c].k) +
                        ") != encoder k (" + std::to_string(enc_cfg.k_per_channel) + ")");
    if (cluster_models[c].dim() != enc_cfg.channel_dims[c])
      throw SchemaError("pretrain: cluster model dim mismatch on channel " +
                        std::string(channel_name(static_cast<ChannelId>(c))));
  }

  // Interpolation runs once up front; pseudo-labels are fixed offline.
  std::vector<FeatureSequence> prepared;
  prepared.reserve(dataset.size());
  std::vector<ClusterAssignments> assignments;
  assignments.reserve(dataset.size());
  std::vector<std::int64_t> lengths;
  for (const auto& raw : dataset.sequences) {
    FeatureSequence seq = interpolate_all(raw);
    assignments.push_back(assign_all(cluster_models, seq));
    lengths.push_back(seq.frames());
    prepared.push_back(std::move(seq));
  }

  PretrainResult result;
  result.config = enc_cfg;
  if (resume) {
    result.state = *resume;
  } else {
    result.state.step = 0;
    result.state.params = init_params<float>(enc_cfg, derive_seed(train_cfg.seed, "init"));
    result.state.adam.t = 0;
    result.state.adam.m = make_params<float>(enc_cfg);
    result.state.adam.v = make_params<float>(enc_cfg);
  }

  std::ofstream metrics_file;
  if (!output_dir.empty()) {
    std::filesystem::create_directories(output_dir);
    metrics_file.open(output_dir / "metrics.ndjson",
                      resume ? std::ios::app : std::ios::trunc);
    if (!metrics_file) throw IoError("pretrain: cannot open metrics log");
  }

  ScheduleCursor cursor;
  cursor.lengths = lengths;
  cursor.frame_budget = train_cfg.frame_budget;
  cursor.seed = derive_seed(train_cfg.seed, "batching");

  EncoderParams<float> grads = make_params<float>(enc_cfg);
  const auto t_begin = std::chrono::steady_clock::now();

  for (std::int64_t step = result.state.step; step < train_cfg.total_steps; ++step) {
    const Batch& batch = cursor.batch_for_step(step);

    // Fresh plans per step; masked-cell counts decide the channel weights.
    std::vector<MaskPlan> plans;
    plans.reserve(batch.size());
    std::array<std::int64_t, kNumChannels> counts{};
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      plans.push_back(make_mask_plan(batch[bi].length, train_cfg.mask_strategy,
                                     train_cfg.mask_ratio, train_cfg.mask_span,
                                     derive_seed(train_cfg.seed, "mask",
                                                 static_cast<std::uint64_t>(step), bi)));
      for (int c = 0; c < kNumChannels; ++c) counts[c] += plans.back().masked_count(c);
    }
    int active = 0;
    for (int c = 0; c < kNumChannels; ++c) active += counts[c] > 0;
    if (active == 0) throw NoTargetError("pretrain: a step produced no masked cells");
    std::array<double, kNumChannels> weights{};
    for (int c = 0; c < kNumChannels; ++c)
      weights[c] = counts[c] > 0
                       ? 1.0 / (static_cast<double>(counts[c]) * static_cast<double>(active))
                       : 0.0;

    zero_params(grads);
    std::array<double, kNumChannels> loss_sums{};
    std::array<std::int64_t, kNumChannels> correct{};
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      const auto& item = batch[bi];
      const FeatureSequence window =
          slice_sequence(prepared[static_cast<std::size_t>(item.seq_index)], item.start,
                         item.length);
      ClusterAssignments targets;
      for (int c = 0; c < kNumChannels; ++c) {
        const auto& full = assignments[static_cast<std::size_t>(item.seq_index)].labels[c];
        targets.labels[c].assign(full.begin() + item.start,
                                 full.begin() + item.start + item.length);
      }
      ForwardCache<float> cache;
      const auto fwd =
          encoder_forward(enc_cfg, result.state.params, window, &plans[bi], &cache);
      BackwardOptions opts;
      opts.channel_weight = weights;
      const LossBreakdown lb = encoder_backward(enc_cfg, result.state.params, fwd, cache,
                                                targets, &grads, opts);
      for (int c = 0; c < kNumChannels; ++c) {
        loss_sums[c] += lb.per_channel_sum[c];
        correct[c] += lb.correct_count[c];
      }
    }

    StepMetrics m;
    m.step = step;
    m.lr = lr_at(step, train_cfg);
    for (int c = 0; c < kNumChannels; ++c) {
      m.loss_per_channel[c] = counts[c] > 0 ? loss_sums[c] / static_cast<double>(counts[c]) : 0.0;
      m.acc_per_channel[c] =
          counts[c] > 0 ? static_cast<double>(correct[c]) / static_cast<double>(counts[c]) : 0.0;
      if (counts[c] > 0) m.loss_total += m.loss_per_channel[c];
    }
    m.loss_total /= static_cast<double>(active);
    if (!std::isfinite(m.loss_total)) {
      if (!output_dir.empty()) save_train_state(enc_cfg, result.state, output_dir, "diagnostic");
      throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
    }

    if (train_cfg.clip_grad_norm > 0.0) {
      const double norm = global_grad_norm(grads);
      if (norm > train_cfg.clip_grad_norm)
        scale_grads(grads, static_cast<float>(train_cfg.clip_grad_norm / norm));
    }
    adam_update(result.state.params, grads, result.state.adam, m.lr, train_cfg);
    result.state.step = step + 1;
    check_finite(result.state.params, output_dir, enc_cfg, result.state, "parameter");

    if (!train_cfg.deterministic_timing)
      m.wallclock_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - t_begin)
                           .count();
    result.metrics.push_back(m);
    if (metrics_file.is_open()) metrics_file << metrics_to_json_line(m) << '\n';

    if (!output_dir.empty() && train_cfg.checkpoint_every > 0 &&
        (step + 1) % train_cfg.checkpoint_every == 0 && step + 1 < train_cfg.total_steps)
      save_train_state(enc_cfg, result.state, output_dir, std::to_string(step + 1));
  }

  if (!output_dir.empty()) {
    save_train_state(enc_cfg, result.state, output_dir, "final");
    metrics_file.close();
  }
  return result;
}

MaskedEval eval_masked_accuracy(const Dataset& dataset,
                                const std::array<ClusterModel, kNumChannels>& cluster_models,
                                const EncoderConfig& enc_cfg, const EncoderParams<float>& params,
                                const TrainConfig& train_cfg, std::uint64_t seed) {
  MaskedEval out;
  std::array<std::int64_t, kNumChannels> correct{};
  for (std::size_t si = 0; si < dataset.size(); ++si) {
    const FeatureSequence seq = interpolate_all(dataset.sequences[si]);
    const ClusterAssignments targets = assign_all(cluster_models, seq);
    const MaskPlan plan =
        make_mask_plan(seq.frames(), train_cfg.mask_strategy, train_cfg.mask_ratio,
                       train_cfg.mask_span, derive_seed(seed, "eval_mask", si));
    if (plan.masked_count_total() == 0) continue;
    const auto fwd = encoder_forward(enc_cfg, params, seq, &plan);
    const LossBreakdown lb = masked_ce_loss(fwd.logits, targets, plan);
    for (int c = 0; c < kNumChannels; ++c) {
      out.masked_cells[c] += lb.masked_count[c];
      correct[c] += lb.correct_count[c];
    }
  }
  for (int c = 0; c < kNumChannels; ++c)
    out.accuracy[c] = out.masked_cells[c] > 0
                          ? static_cast<double>(correct[c]) /
                                static_cast<double>(out.masked_cells[c])
                          : 0.0;
  return out;
}

} // namespace signstream
