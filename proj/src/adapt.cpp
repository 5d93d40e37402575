// SPDX-License-Identifier: Apache-2.0

#include "signstream/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "signstream/rng.hpp"

namespace signstream {

namespace {

constexpr float kBnEps = 1e-5f;

VecF softmax_vec(const VecF& raw) {
  const float mx = raw.maxCoeff();
  Eigen::ArrayXf e = (raw.array() - mx).exp();
  return (e / e.sum()).matrix();
}

VecF pooled_mean(const MatF& frames) {
  return frames.colwise().mean().transpose();
}

VecF raw_concat_mean(const FeatureSequence& seq) {
  int total = 0;
  for (int c = 0; c < kNumChannels; ++c) total += static_cast<int>(seq.channels[c].cols());
  VecF out(total);
  int at = 0;
  for (int c = 0; c < kNumChannels; ++c) {
    const int dc = static_cast<int>(seq.channels[c].cols());
    out.segment(at, dc) = pooled_mean(seq.channels[c]);
    at += dc;
  }
  return out;
}

} // namespace

VecF LayerWeights::normalized() const { return softmax_vec(raw); }

MatF weighted_features(const std::vector<MatF>& layers, const LayerWeights& lw) {
  if (static_cast<int>(layers.size()) != lw.size())
    throw SchemaError("weighted_features: weight count != layer count");
  if (layers.empty()) throw SchemaError("weighted_features: no layers");
  const VecF alpha = lw.normalized();
  MatF out = MatF::Zero(layers[0].rows(), layers[0].cols());
  for (std::size_t l = 0; l < layers.size(); ++l) out += alpha(static_cast<int>(l)) * layers[l];
  return out;
}

ClassifierHead ClassifierHead::init(int input_dim, int n_classes, std::uint64_t seed,
                                    double label_smoothing) {
  if (n_classes < 2) throw ConfigError("classifier head: need at least two classes");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("classifier head: label smoothing outside [0, 1)");
  ClassifierHead head;
  head.input_dim = input_dim;
  head.n_classes = n_classes;
  head.bn_gamma = VecF::Ones(input_dim);
  head.bn_beta = VecF::Zero(input_dim);
  head.bn_run_mean = VecF::Zero(input_dim);
  head.bn_run_var = VecF::Ones(input_dim);
  head.w = MatF(input_dim, n_classes);
  head.b = VecF::Zero(n_classes);
  head.label_smoothing = label_smoothing;
  Rng rng(derive_seed(seed, "head.init"));
  for (std::int64_t i = 0; i < head.w.size(); ++i)
    head.w.data()[i] = static_cast<float>(0.02 * rng.next_normal());
  return head;
}

MatF ClassifierHead::infer(const MatF& pooled) const {
  if (pooled.cols() != input_dim) throw SchemaError("classifier head: feature dim mismatch");
  MatF y(pooled.rows(), pooled.cols());
  for (std::int64_t i = 0; i < pooled.rows(); ++i)
    y.row(i) = ((pooled.row(i).transpose() - bn_run_mean).array() /
                (bn_run_var.array() + kBnEps).sqrt() * bn_gamma.array() +
                bn_beta.array())
                   .matrix()
                   .transpose();
  MatF logits = y * w;
  logits.rowwise() += b.transpose();
  return logits;
}

double smoothed_ce_floor(double s, int n_classes) {
  const double c = static_cast<double>(n_classes);
  const double p_true = 1.0 - s + s / c;
  const double p_other = s / c;
  double floor = -p_true * std::log(p_true);
  if (p_other > 0.0) floor -= (c - 1.0) * p_other * std::log(p_other);
  return floor;
}

const char* adapt_mode_name(AdaptMode m) {
  switch (m) {
    case AdaptMode::Raw: return "raw";
    case AdaptMode::FrozenLast: return "frozen-last";
    case AdaptMode::FrozenWeighted: return "frozen-weighted";
    case AdaptMode::Finetune: return "finetune";
    case AdaptMode::Lora: return "lora";
  }
  return "?";
}

AdaptMode adapt_mode_from_name(const std::string& name) {
  if (name == "raw") return AdaptMode::Raw;
  if (name == "frozen-last") return AdaptMode::FrozenLast;
  if (name == "frozen-weighted") return AdaptMode::FrozenWeighted;
  if (name == "finetune") return AdaptMode::Finetune;
  if (name == "lora") return AdaptMode::Lora;
  throw ArgumentError("unknown adaptation mode: " + name);
}

double lora_param_fraction(const EncoderConfig& cfg) {
  return static_cast<double>(lora_param_count(cfg)) / static_cast<double>(param_count(cfg));
}

void DownstreamConfig::validate() const {
  if (max_epochs < 1) throw ConfigError("downstream: max_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("downstream: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("downstream: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("downstream: weight_decay must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("downstream: label smoothing outside [0, 1)");
  if (patience < 1) throw ConfigError("downstream: patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("downstream: validation split must be a fraction in (0, 1)");
}

double recall_at_k(const MatF& logits, const std::vector<int>& labels, int k) {
  if (logits.rows() == 0) throw ArgumentError("recall_at_k: no rows");
  if (k < 1) throw ArgumentError("recall_at_k: k must be >= 1");
  if (static_cast<std::int64_t>(labels.size()) != logits.rows())
    throw SchemaError("recall_at_k: label count != row count");
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < logits.rows(); ++i) {
    const int truth = labels[static_cast<std::size_t>(i)];
    if (truth < 0 || truth >= logits.cols()) throw DataError("recall_at_k: label out of range");
    const float lt = logits(i, truth);
    // rank with ties resolved toward the lowest class index
    int rank = 1;
    for (std::int64_t j = 0; j < logits.cols(); ++j) {
      if (j == truth) continue;
      if (logits(i, j) > lt || (logits(i, j) == lt && j < truth)) ++rank;
    }
    if (rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

// ---------------------------------------------------------------------------
// Downstream training engine
// ---------------------------------------------------------------------------

namespace {

// One trainable tensor with its gradient buffer and Adam moments.
struct Trainable {
  float* data = nullptr;
  std::int64_t size = 0;
  double lr_scale = 1.0;
  std::vector<float> grad;
  std::vector<double> m, v;
};

struct Optimizer {
  std::vector<Trainable> items;
  std::int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  std::size_t add(float* data, std::int64_t size, double lr_scale = 1.0) {
    Trainable tr;
    tr.data = data;
    tr.size = size;
    tr.lr_scale = lr_scale;
    tr.grad.assign(static_cast<std::size_t>(size), 0.0f);
    tr.m.assign(static_cast<std::size_t>(size), 0.0);
    tr.v.assign(static_cast<std::size_t>(size), 0.0);
    items.push_back(std::move(tr));
    return items.size() - 1;
  }

  void zero_grads() {
    for (auto& tr : items) std::fill(tr.grad.begin(), tr.grad.end(), 0.0f);
  }

  void step(double lr, double weight_decay) {
    t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& tr : items) {
      for (std::int64_t j = 0; j < tr.size; ++j) {
        const double g =
            static_cast<double>(tr.grad[static_cast<std::size_t>(j)]) +
            weight_decay * static_cast<double>(tr.data[j]);
        tr.m[static_cast<std::size_t>(j)] = beta1 * tr.m[static_cast<std::size_t>(j)] + (1.0 - beta1) * g;
        tr.v[static_cast<std::size_t>(j)] = beta2 * tr.v[static_cast<std::size_t>(j)] + (1.0 - beta2) * g * g;
        const double mhat = tr.m[static_cast<std::size_t>(j)] / bc1;
        const double vhat = tr.v[static_cast<std::size_t>(j)] / bc2;
        tr.data[j] -= static_cast<float>(lr * tr.lr_scale * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// Cached frozen-mode features of one sequence.
struct FrozenFeatures {
  MatF pooled_layers; // (n_blocks + 1) x model_dim
  VecF raw_mean;
};

struct HeadGradSlots {
  std::size_t bn_gamma, bn_beta, w, b;
};

// Train-mode batch-norm forward, caching what backward needs.
struct BnCache {
  MatF xhat;
  VecF rstd;
};

MatF bn_train_forward(ClassifierHead& head, const MatF& pooled, BnCache& cache) {
  const std::int64_t b = pooled.rows();
  const std::int64_t f = pooled.cols();
  VecF mu = pooled.colwise().mean().transpose();
  VecF var = VecF::Zero(f);
  for (std::int64_t i = 0; i < b; ++i) {
    const VecF d = pooled.row(i).transpose() - mu;
    var += d.cwiseProduct(d);
  }
  var /= static_cast<float>(b);
  cache.rstd = (var.array() + kBnEps).rsqrt().matrix();
  cache.xhat.resize(b, f);
  MatF out(b, f);
  for (std::int64_t i = 0; i < b; ++i) {
    cache.xhat.row(i) =
        ((pooled.row(i).transpose() - mu).array() * cache.rstd.array()).matrix().transpose();
    out.row(i) = (cache.xhat.row(i).transpose().array() * head.bn_gamma.array() +
                  head.bn_beta.array())
                     .matrix()
                     .transpose();
  }
  head.bn_run_mean = (1.0f - head.bn_momentum) * head.bn_run_mean + head.bn_momentum * mu;
  head.bn_run_var = (1.0f - head.bn_momentum) * head.bn_run_var + head.bn_momentum * var;
  return out;
}

// dy -> dpooled; gradient buffers accumulate bn gamma/beta.
MatF bn_backward(const ClassifierHead& head, const BnCache& cache, const MatF& dy,
                 std::vector<float>& dgamma, std::vector<float>& dbeta) {
  const std::int64_t b = dy.rows();
  const std::int64_t f = dy.cols();
  for (std::int64_t j = 0; j < f; ++j) {
    double dg = 0.0, db = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
      dg += static_cast<double>(dy(i, j)) * static_cast<double>(cache.xhat(i, j));
      db += static_cast<double>(dy(i, j));
    }
    dgamma[static_cast<std::size_t>(j)] += static_cast<float>(dg);
    dbeta[static_cast<std::size_t>(j)] += static_cast<float>(db);
  }
  MatF dx(b, f);
  for (std::int64_t j = 0; j < f; ++j) {
    double m1 = 0.0, m2 = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
      const double dxh = static_cast<double>(dy(i, j)) * static_cast<double>(head.bn_gamma(j));
      m1 += dxh;
      m2 += dxh * static_cast<double>(cache.xhat(i, j));
    }
    m1 /= static_cast<double>(b);
    m2 /= static_cast<double>(b);
    for (std::int64_t i = 0; i < b; ++i) {
      const double dxh = static_cast<double>(dy(i, j)) * static_cast<double>(head.bn_gamma(j));
      dx(i, j) = static_cast<float>(static_cast<double>(cache.rstd(j)) *
                                    (dxh - m1 - static_cast<double>(cache.xhat(i, j)) * m2));
    }
  }
  return dx;
}

} // namespace

DownstreamResult train_downstream(const EncoderConfig& cfg, const EncoderParams<float>& base,
                                  const std::vector<const Dataset*>& datasets,
                                  const std::vector<TaskDef>& tasks,
                                  const DownstreamConfig& opts) {
  cfg.validate();
  opts.validate();
  if (datasets.empty() || tasks.empty())
    throw ConfigError("train_downstream: need at least one dataset and one task");
  for (const auto& task : tasks) {
    if (task.dataset_index < 0 || task.dataset_index >= static_cast<int>(datasets.size()))
      throw ConfigError("train_downstream: task references unknown dataset");
    const Dataset& ds = *datasets[static_cast<std::size_t>(task.dataset_index)];
    if (task.labels.size() != ds.size())
      throw SchemaError("train_downstream: task label count != dataset size");
    if (task.n_classes < 2) throw ConfigError("train_downstream: task needs >= 2 classes");
    for (const int l : task.labels)
      if (l < 0 || l >= task.n_classes)
        throw DataError("train_downstream: label out of range in task " + task.name);
  }

  const int n_layers = cfg.n_blocks + 1;
  int raw_dim = 0;
  for (const int dc : cfg.channel_dims) raw_dim += dc;
  const int feat_dim = opts.mode == AdaptMode::Raw ? raw_dim : cfg.model_dim;

  DownstreamResult result;
  result.encoder_params = base;
  result.layer_weights = LayerWeights::uniform(n_layers);
  if (opts.mode == AdaptMode::Lora)
    result.lora = init_lora<float>(cfg, derive_seed(opts.seed, "lora.init"));
  if (opts.mode == AdaptMode::Finetune && opts.reinit_last_block && cfg.n_blocks > 0) {
    // Fresh final transformer block before tuning.
    const auto fresh = init_params<float>(cfg, derive_seed(opts.seed, "reinit.last"));
    result.encoder_params.blocks.back() = fresh.blocks.back();
  }
  result.heads.reserve(tasks.size());
  for (std::size_t ti = 0; ti < tasks.size(); ++ti)
    result.heads.push_back(ClassifierHead::init(feat_dim, tasks[ti].n_classes,
                                                derive_seed(opts.seed, "head", ti),
                                                opts.label_smoothing));

  const bool frozen_encoder = opts.mode == AdaptMode::Raw ||
                              opts.mode == AdaptMode::FrozenLast ||
                              opts.mode == AdaptMode::FrozenWeighted;

  // Frozen-mode features are extracted once per sequence.
  std::vector<std::vector<FrozenFeatures>> frozen(datasets.size());
  if (frozen_encoder) {
    for (std::size_t di = 0; di < datasets.size(); ++di) {
      frozen[di].resize(datasets[di]->size());
      for (std::size_t si = 0; si < datasets[di]->size(); ++si) {
        const FeatureSequence seq = interpolate_all(datasets[di]->sequences[si]);
        if (opts.mode == AdaptMode::Raw) {
          frozen[di][si].raw_mean = raw_concat_mean(seq);
        } else {
          const auto fwd = encoder_forward(cfg, result.encoder_params, seq);
          frozen[di][si].pooled_layers.resize(n_layers, cfg.model_dim);
          for (int l = 0; l < n_layers; ++l)
            frozen[di][si].pooled_layers.row(l) =
                pooled_mean(fwd.layers[static_cast<std::size_t>(l)]).transpose();
        }
      }
    }
  }
  std::vector<std::vector<FeatureSequence>> prepared(datasets.size());
  if (!frozen_encoder) {
    for (std::size_t di = 0; di < datasets.size(); ++di) {
      prepared[di].reserve(datasets[di]->size());
      for (const auto& seq : datasets[di]->sequences)
        prepared[di].push_back(interpolate_all(seq));
    }
  }

  // Deterministic train/validation split per dataset.
  std::vector<std::vector<std::size_t>> train_idx(datasets.size()), val_idx(datasets.size());
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    const std::size_t n = datasets[di]->size();
    if (n < 2) throw ConfigError("train_downstream: dataset too small to split");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(derive_seed(opts.seed, "split", di));
    rng.shuffle(perm);
    std::size_t n_val = static_cast<std::size_t>(
        std::ceil(opts.val_fraction * static_cast<double>(n)));
    n_val = std::min(n_val, n - 1);
    if (n_val == 0) throw ConfigError("train_downstream: empty validation split");
    val_idx[di].assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx[di].assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  }

  // Optimizer registration. Pointers stay valid: heads are pre-sized and
  // Eigen storage is never reshaped during training.
  Optimizer optim;
  std::vector<HeadGradSlots> head_slots;
  for (auto& head : result.heads) {
    HeadGradSlots slots;
    slots.bn_gamma = optim.add(head.bn_gamma.data(), head.bn_gamma.size());
    slots.bn_beta = optim.add(head.bn_beta.data(), head.bn_beta.size());
    slots.w = optim.add(head.w.data(), head.w.size());
    slots.b = optim.add(head.b.data(), head.b.size());
    head_slots.push_back(slots);
  }
  std::size_t lw_slot = 0;
  if (opts.mode == AdaptMode::FrozenWeighted)
    lw_slot = optim.add(result.layer_weights.raw.data(), result.layer_weights.raw.size());
  std::vector<std::size_t> encoder_slots;
  if (opts.mode == AdaptMode::Finetune)
    for (auto& ref : collect_params(result.encoder_params))
      encoder_slots.push_back(optim.add(ref.data, ref.size));
  std::vector<std::pair<std::size_t, std::size_t>> lora_slots; // (a, b) per entry
  if (opts.mode == AdaptMode::Lora)
    for (auto& e : result.lora.entries)
      lora_slots.emplace_back(optim.add(e.a.data(), e.a.size(), opts.lora_lr_scale),
                              optim.add(e.b.data(), e.b.size(), opts.lora_lr_scale));

  // Task list per dataset for shared forward passes.
  std::vector<std::vector<std::size_t>> tasks_of(datasets.size());
  for (std::size_t ti = 0; ti < tasks.size(); ++ti)
    tasks_of[static_cast<std::size_t>(tasks[ti].dataset_index)].push_back(ti);

  const double task_weight = 1.0 / static_cast<double>(tasks.size());

  auto eval_validation = [&]() {
    double mean_recall = 0.0;
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
      const auto di = static_cast<std::size_t>(tasks[ti].dataset_index);
      const auto& idx = val_idx[di];
      MatF logits(static_cast<std::int64_t>(idx.size()), tasks[ti].n_classes);
      std::vector<int> labels;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        VecF feat;
        switch (opts.mode) {
          case AdaptMode::Raw: feat = frozen[di][idx[r]].raw_mean; break;
          case AdaptMode::FrozenLast:
            feat = frozen[di][idx[r]].pooled_layers.row(n_layers - 1).transpose();
            break;
          case AdaptMode::FrozenWeighted: {
            const VecF alpha = result.layer_weights.normalized();
            feat = (alpha.transpose() * frozen[di][idx[r]].pooled_layers).transpose();
            break;
          }
          case AdaptMode::Finetune: {
            const auto fwd = encoder_forward(cfg, result.encoder_params, prepared[di][idx[r]]);
            feat = pooled_mean(fwd.layers.back());
            break;
          }
          case AdaptMode::Lora: {
            const auto fwd = encoder_forward<float>(cfg, result.encoder_params,
                                                    prepared[di][idx[r]], nullptr, nullptr,
                                                    &result.lora);
            feat = pooled_mean(fwd.layers.back());
            break;
          }
        }
        logits.row(r) = result.heads[ti].infer(feat.transpose()).row(0);
        labels.push_back(tasks[ti].labels[idx[r]]);
      }
      mean_recall += recall_at_k(logits, labels, 1);
    }
    return mean_recall / static_cast<double>(tasks.size());
  };

  struct Snapshot {
    std::vector<ClassifierHead> heads;
    LayerWeights lw;
    EncoderParams<float> encoder;
    LoraSet<float> lora;
  };
  Snapshot best;
  double best_metric = -1.0;
  int since_best = 0;

  EncoderParams<float> enc_grads = make_params<float>(cfg); // finetune scratch

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    // one shuffled batch stream per dataset; steps pull one batch from each
    std::vector<std::vector<std::size_t>> order(datasets.size());
    std::size_t max_batches = 0;
    for (std::size_t di = 0; di < datasets.size(); ++di) {
      order[di] = train_idx[di];
      Rng rng(derive_seed(opts.seed, "shuffle", static_cast<std::uint64_t>(epoch), di));
      rng.shuffle(order[di]);
      const std::size_t nb =
          (order[di].size() + static_cast<std::size_t>(opts.batch_size) - 1) /
          static_cast<std::size_t>(opts.batch_size);
      max_batches = std::max(max_batches, nb);
    }

    for (std::size_t step = 0; step < max_batches; ++step) {
      optim.zero_grads();
      for (std::size_t di = 0; di < datasets.size(); ++di) {
        if (tasks_of[di].empty()) continue;
        const auto& ord = order[di];
        const std::size_t begin =
            (step * static_cast<std::size_t>(opts.batch_size)) % ord.size();
        std::vector<std::size_t> batch;
        for (int i = 0; i < opts.batch_size && batch.size() < ord.size(); ++i)
          batch.push_back(ord[(begin + static_cast<std::size_t>(i)) % ord.size()]);
        const auto b = static_cast<std::int64_t>(batch.size());

        // Features (one encoder pass per sequence, shared by all tasks).
        MatF pooled(b, feat_dim);
        std::vector<ForwardCache<float>> caches;
        std::vector<std::int64_t> frame_counts;
        if (!frozen_encoder) caches.resize(batch.size());
        for (std::int64_t r = 0; r < b; ++r) {
          const std::size_t si = batch[static_cast<std::size_t>(r)];
          switch (opts.mode) {
            case AdaptMode::Raw: pooled.row(r) = frozen[di][si].raw_mean.transpose(); break;
            case AdaptMode::FrozenLast:
              pooled.row(r) = frozen[di][si].pooled_layers.row(n_layers - 1);
              break;
            case AdaptMode::FrozenWeighted: {
              const VecF alpha = result.layer_weights.normalized();
              pooled.row(r) = alpha.transpose() * frozen[di][si].pooled_layers;
              break;
            }
            case AdaptMode::Finetune:
            case AdaptMode::Lora: {
              const LoraSet<float>* lora =
                  opts.mode == AdaptMode::Lora ? &result.lora : nullptr;
              const auto fwd = encoder_forward<float>(
                  cfg, result.encoder_params, prepared[di][si], nullptr,
                  &caches[static_cast<std::size_t>(r)], lora);
              result.encoder_forward_calls += 1;
              pooled.row(r) = pooled_mean(fwd.layers.back()).transpose();
              frame_counts.push_back(fwd.layers.back().rows());
              break;
            }
          }
        }

        MatF dpooled = MatF::Zero(b, feat_dim);
        for (const std::size_t ti : tasks_of[di]) {
          auto& head = result.heads[ti];
          const auto& slots = head_slots[ti];
          BnCache bn;
          const MatF y = bn_train_forward(head, pooled, bn);
          MatF logits = y * head.w;
          logits.rowwise() += head.b.transpose();

          // label-smoothed softmax cross-entropy
          const double s = head.label_smoothing;
          const int classes = head.n_classes;
          MatF dlogits(b, classes);
          for (std::int64_t r = 0; r < b; ++r) {
            const int truth = tasks[ti].labels[batch[static_cast<std::size_t>(r)]];
            const float mx = logits.row(r).maxCoeff();
            Eigen::ArrayXf e = (logits.row(r).transpose().array() - mx).exp();
            const Eigen::ArrayXf p = e / e.sum();
            for (int j = 0; j < classes; ++j) {
              const double target =
                  s / classes + (j == truth ? 1.0 - s : 0.0);
              dlogits(r, j) = static_cast<float>(
                  task_weight * (static_cast<double>(p(j)) - target) / static_cast<double>(b));
            }
          }

          // linear backward into the head buffers
          {
            const MatF dw = y.transpose() * dlogits;
            const VecF db = dlogits.colwise().sum().transpose();
            auto& gw = optim.items[slots.w].grad;
            for (std::int64_t j = 0; j < dw.size(); ++j) gw[static_cast<std::size_t>(j)] += dw.data()[j];
            auto& gb = optim.items[slots.b].grad;
            for (std::int64_t j = 0; j < db.size(); ++j) gb[static_cast<std::size_t>(j)] += db(j);
          }
          const MatF dy = dlogits * head.w.transpose();
          dpooled += bn_backward(head, bn, dy, optim.items[slots.bn_gamma].grad,
                                 optim.items[slots.bn_beta].grad);
        }

        // feature backward
        if (opts.mode == AdaptMode::FrozenWeighted) {
          const VecF alpha = result.layer_weights.normalized();
          VecF dalpha = VecF::Zero(n_layers);
          for (std::int64_t r = 0; r < b; ++r) {
            const std::size_t si = batch[static_cast<std::size_t>(r)];
            dalpha += frozen[di][si].pooled_layers * dpooled.row(r).transpose();
          }
          const float dot = alpha.dot(dalpha);
          auto& glw = optim.items[lw_slot].grad;
          for (int l = 0; l < n_layers; ++l)
            glw[static_cast<std::size_t>(l)] += alpha(l) * (dalpha(l) - dot);
        } else if (opts.mode == AdaptMode::Finetune || opts.mode == AdaptMode::Lora) {
          LoraSet<float> lora_grads;
          if (opts.mode == AdaptMode::Lora) lora_grads = zero_lora_like(result.lora);
          zero_params(enc_grads);
          for (std::int64_t r = 0; r < b; ++r) {
            const std::int64_t t = frame_counts[static_cast<std::size_t>(r)];
            Mat<float> dlast(t, cfg.model_dim);
            for (std::int64_t f = 0; f < t; ++f)
              dlast.row(f) = dpooled.row(r) / static_cast<float>(t);
            if (opts.mode == AdaptMode::Finetune) {
              encoder_backward_from_last(cfg, result.encoder_params,
                                         caches[static_cast<std::size_t>(r)], dlast, &enc_grads);
            } else {
              encoder_backward_from_last<float>(cfg, result.encoder_params,
                                                caches[static_cast<std::size_t>(r)], dlast,
                                                nullptr, &result.lora, &lora_grads);
            }
          }
          if (opts.mode == AdaptMode::Finetune) {
            const auto refs = collect_params(enc_grads);
            for (std::size_t i = 0; i < encoder_slots.size(); ++i) {
              auto& g = optim.items[encoder_slots[i]].grad;
              for (std::int64_t j = 0; j < refs[i].size; ++j)
                g[static_cast<std::size_t>(j)] += refs[i].data[j];
            }
          } else {
            for (std::size_t i = 0; i < lora_slots.size(); ++i) {
              auto& ga = optim.items[lora_slots[i].first].grad;
              for (std::int64_t j = 0; j < lora_grads.entries[i].a.size(); ++j)
                ga[static_cast<std::size_t>(j)] += lora_grads.entries[i].a(j);
              auto& gb = optim.items[lora_slots[i].second].grad;
              for (std::int64_t j = 0; j < lora_grads.entries[i].b.size(); ++j)
                gb[static_cast<std::size_t>(j)] += lora_grads.entries[i].b(j);
            }
          }
        }
      }
      optim.step(opts.lr, opts.weight_decay);
    }

    const double metric = eval_validation();
    result.val_history.push_back(metric);
    if (metric > best_metric) {
      best_metric = metric;
      result.best_epoch = epoch;
      best.heads = result.heads;
      best.lw = result.layer_weights;
      best.lora = result.lora;
      if (opts.mode == AdaptMode::Finetune) best.encoder = result.encoder_params;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }

  result.heads = best.heads;
  result.layer_weights = best.lw;
  result.lora = best.lora;
  if (opts.mode == AdaptMode::Finetune) result.encoder_params = best.encoder;
  return result;
}

VecF classify(const EncoderConfig& cfg, const EncoderParams<float>& params,
              const ClassifierHead& head, const FeatureSequence& seq, AdaptMode mode,
              const LayerWeights* lw, const LoraSet<float>* lora) {
  if (mode == AdaptMode::FrozenWeighted && !lw)
    throw ConfigError("classify: weighted mode needs layer weights");
  if (mode == AdaptMode::Lora && !lora)
    throw ConfigError("classify: lora mode needs an adapter set");
  if (mode != AdaptMode::Lora && lora)
    throw ConfigError("classify: adapter set supplied for a non-lora mode");

  const FeatureSequence prep = interpolate_all(seq);
  VecF feat;
  switch (mode) {
    case AdaptMode::Raw: feat = raw_concat_mean(prep); break;
    case AdaptMode::FrozenLast:
    case AdaptMode::Finetune: {
      const auto fwd = encoder_forward(cfg, params, prep);
      feat = pooled_mean(fwd.layers.back());
      break;
    }
    case AdaptMode::FrozenWeighted: {
      const auto fwd = encoder_forward(cfg, params, prep);
      if (lw->size() != static_cast<int>(fwd.layers.size()))
        throw SchemaError("classify: layer weight count != layer count");
      const VecF alpha = lw->normalized();
      feat = VecF::Zero(cfg.model_dim);
      for (std::size_t l = 0; l < fwd.layers.size(); ++l)
        feat += alpha(static_cast<int>(l)) * pooled_mean(fwd.layers[l]);
      break;
    }
    case AdaptMode::Lora: {
      const auto fwd = encoder_forward<float>(cfg, params, prep, nullptr, nullptr, lora);
      feat = pooled_mean(fwd.layers.back());
      break;
    }
  }
  return head.infer(feat.transpose()).row(0).transpose();
}

MatF classify_dataset(const EncoderConfig& cfg, const EncoderParams<float>& params,
                      const ClassifierHead& head, const Dataset& data, AdaptMode mode,
                      const LayerWeights* lw, const LoraSet<float>* lora) {
  MatF logits(static_cast<std::int64_t>(data.size()), head.n_classes);
  for (std::size_t i = 0; i < data.size(); ++i)
    logits.row(static_cast<std::int64_t>(i)) =
        classify(cfg, params, head, data.sequences[i], mode, lw, lora).transpose();
  return logits;
}

ExportManifest export_features(const EncoderConfig& cfg, const EncoderParams<float>& params,
                               const LayerWeights& lw, const Dataset& data,
                               const std::filesystem::path& out_dir) {
  if (lw.size() != cfg.n_blocks + 1)
    throw SchemaError("export_features: layer weight count != layer count");
  std::filesystem::create_directories(out_dir);
  ExportManifest manifest;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name =
        (i < data.ids.size() && !data.ids[i].empty() ? data.ids[i]
                                                     : "seq_" + std::to_string(i)) +
        ".feat.msf";
    try {
      const FeatureSequence prep = interpolate_all(data.sequences[i]);
      const auto fwd = encoder_forward(cfg, params, prep);
      const MatF mixed = weighted_features(fwd.layers, lw);
      MsfPayload payload;
      payload.dims = {static_cast<std::uint32_t>(cfg.model_dim)};
      payload.num_frames = static_cast<std::uint64_t>(mixed.rows());
      payload.frame_rate_hint = prep.frame_rate_hint;
      payload.presence.assign(static_cast<std::size_t>(mixed.rows()), 1);
      payload.data.assign(mixed.data(), mixed.data() + mixed.size());
      write_msf_raw(payload, out_dir / name);
      manifest.written.push_back(out_dir / name);
    } catch (const Error& e) {
      manifest.failures.push_back(name + ": " + e.what());
    }
  }
  return manifest;
}

std::vector<PhonologicalFeature> load_phonological_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open phonological config: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("phonological config: " + std::string(e.what()));
  }
  if (!j.is_array()) throw ConfigError("phonological config: expected a JSON array");
  std::vector<PhonologicalFeature> out;
  for (const auto& item : j) {
    PhonologicalFeature feat;
    feat.name = item.at("name").get<std::string>();
    feat.num_classes = item.at("num_classes").get<int>();
    if (feat.num_classes < 2)
      throw ConfigError("phonological config: feature " + feat.name + " needs >= 2 classes");
    out.push_back(std::move(feat));
  }
  return out;
}

} // namespace signstream
