// SPDX-License-Identifier: Apache-2.0

// Central finite-difference oracle for the analytic gradients. Everything
// here runs in float64: truncation error at h = 1e-4 is far below the
// 1e-3 relative-error gate.

#include <doctest.h>

#include <cmath>

#include "signstream/encoder.hpp"
#include "signstream/rng.hpp"

using namespace signstream;

namespace {

EncoderConfig grad_config() {
  EncoderConfig cfg;
  cfg.n_blocks = 2;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.n_heads = 2;
  cfg.channel_proj_dim = 4;
  cfg.k_per_channel = 4;
  cfg.channel_dims = {3, 3, 3, 2};
  return cfg;
}

FeatureSequence random_input(const EncoderConfig& cfg, std::int64_t t, std::uint64_t seed) {
  FeatureSequence seq = zero_sequence(t, cfg.channel_dims, 12.5f);
  Rng rng(seed);
  for (int c = 0; c < kNumChannels; ++c)
    for (std::int64_t i = 0; i < t; ++i)
      for (int j = 0; j < cfg.channel_dims[c]; ++j)
        seq.channels[c](i, j) = static_cast<float>(rng.next_normal());
  return seq;
}

ClusterAssignments random_targets(const EncoderConfig& cfg, std::int64_t t, std::uint64_t seed) {
  ClusterAssignments targets;
  Rng rng(seed);
  for (int c = 0; c < kNumChannels; ++c) {
    targets.labels[c].resize(static_cast<std::size_t>(t));
    for (std::int64_t i = 0; i < t; ++i)
      targets.labels[c][static_cast<std::size_t>(i)] =
          static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.k_per_channel)));
  }
  return targets;
}

double loss_at(const EncoderConfig& cfg, const EncoderParams<double>& params,
               const FeatureSequence& seq, const MaskPlan& plan,
               const ClusterAssignments& targets, const LoraSet<double>* lora = nullptr) {
  const auto fwd = encoder_forward<double>(cfg, params, seq, &plan, nullptr, lora);
  return masked_ce_loss(fwd.logits, targets, plan).loss;
}

struct GradCheckStats {
  double max_rel_err = 0.0;
  std::string worst;
};

double rel_err(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
  return std::abs(analytic - numeric) / scale;
}

} // namespace

TEST_CASE("gradcheck: analytic encoder gradients match central differences (5 seeds)") {
  const EncoderConfig cfg = grad_config();
  REQUIRE(param_count(cfg) <= 10000);
  const double h = 1e-4;

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto params = init_params<double>(cfg, seed);
    const std::int64_t t = 6;
    const FeatureSequence seq = random_input(cfg, t, seed * 31 + 1);
    const MaskPlan plan = make_mask_plan(t, MaskStrategy::Random, 0.5, 2, seed * 17 + 3);
    REQUIRE(plan.masked_count_total() > 0);
    const ClusterAssignments targets = random_targets(cfg, t, seed * 13 + 7);

    ForwardCache<double> cache;
    const auto fwd = encoder_forward(cfg, params, seq, &plan, &cache);
    auto grads = make_params<double>(cfg);
    encoder_backward(cfg, params, fwd, cache, targets, &grads);

    GradCheckStats stats;
    auto prefs = collect_params(params);
    auto grefs = collect_params(grads);
    REQUIRE(prefs.size() == grefs.size());
    for (std::size_t ti = 0; ti < prefs.size(); ++ti) {
      for (std::int64_t j = 0; j < prefs[ti].size; ++j) {
        const double saved = prefs[ti].data[j];
        prefs[ti].data[j] = saved + h;
        const double lp = loss_at(cfg, params, seq, plan, targets);
        prefs[ti].data[j] = saved - h;
        const double lm = loss_at(cfg, params, seq, plan, targets);
        prefs[ti].data[j] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double err = rel_err(grefs[ti].data[j], numeric);
        if (err > stats.max_rel_err) {
          stats.max_rel_err = err;
          stats.worst = prefs[ti].name + "[" + std::to_string(j) + "]";
        }
      }
    }
    INFO("seed ", seed, " worst tensor entry: ", stats.worst);
    CHECK(stats.max_rel_err <= 1e-3);
  }
}

TEST_CASE("gradcheck: rank-1 adapter gradients match central differences") {
  const EncoderConfig cfg = grad_config();
  const double h = 1e-4;
  auto params = init_params<double>(cfg, 99);
  auto lora = init_lora<double>(cfg, 4);
  Rng rng(8);
  for (auto& e : lora.entries)
    for (std::int64_t i = 0; i < e.b.size(); ++i) e.b(i) = 0.05 * rng.next_normal();

  const std::int64_t t = 5;
  const FeatureSequence seq = random_input(cfg, t, 12);
  const MaskPlan plan = make_mask_plan(t, MaskStrategy::Random, 0.6, 2, 77);
  const ClusterAssignments targets = random_targets(cfg, t, 6);

  ForwardCache<double> cache;
  const auto fwd = encoder_forward<double>(cfg, params, seq, &plan, &cache, &lora);
  auto lg = zero_lora_like(lora);
  // adapter-only mode: base gradients are not even accumulated
  encoder_backward<double>(cfg, params, fwd, cache, targets, nullptr, {}, &lora, &lg);

  double max_err = 0.0;
  for (std::size_t ei = 0; ei < lora.entries.size(); ++ei) {
    auto check_vec = [&](Vec<double>& v, const Vec<double>& g) {
      for (std::int64_t j = 0; j < v.size(); ++j) {
        const double saved = v(j);
        v(j) = saved + h;
        const double lp = loss_at(cfg, params, seq, plan, targets, &lora);
        v(j) = saved - h;
        const double lm = loss_at(cfg, params, seq, plan, targets, &lora);
        v(j) = saved;
        max_err = std::max(max_err, rel_err(g(j), (lp - lm) / (2.0 * h)));
      }
    };
    check_vec(lora.entries[ei].a, lg.entries[ei].a);
    check_vec(lora.entries[ei].b, lg.entries[ei].b);
  }
  CHECK(max_err <= 1e-3);
}
