// SPDX-License-Identifier: Apache-2.0

#include "signstream/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "signstream/rng.hpp"

namespace signstream {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr char kMagic[4] = {'S', 'H', 'B', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
S gelu(S x) {
  const double xd = static_cast<double>(x);
  return static_cast<S>(0.5 * xd * (1.0 + std::erf(xd * 0.7071067811865475244)));
}

template <typename S>
S gelu_grad(S x) {
  const double xd = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475244));
  const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014326779; // 1/sqrt(2*pi)
  return static_cast<S>(cdf + xd * pdf);
}

// Walks every parameter tensor in canonical registry order.
template <typename P, typename F>
void visit_params(P& p, F&& f) {
  for (int c = 0; c < kNumChannels; ++c) {
    const std::string ch = channel_name(static_cast<ChannelId>(c));
    f("chan_norm." + ch + ".gamma", p.chan_norm[c].gamma);
    f("chan_norm." + ch + ".beta", p.chan_norm[c].beta);
  }
  for (int c = 0; c < kNumChannels; ++c) {
    const std::string ch = channel_name(static_cast<ChannelId>(c));
    f("chan_proj." + ch + ".weight", p.chan_proj[c].w);
    f("chan_proj." + ch + ".bias", p.chan_proj[c].b);
  }
  for (int c = 0; c < kNumChannels; ++c)
    f("mask_embed." + std::string(channel_name(static_cast<ChannelId>(c))), p.mask_embed[c]);
  f("fusion.weight", p.fusion.w);
  f("fusion.bias", p.fusion.b);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string blk = "block" + std::to_string(i) + ".";
    auto& b = p.blocks[i];
    f(blk + "ln1.gamma", b.ln1.gamma);
    f(blk + "ln1.beta", b.ln1.beta);
    f(blk + "attn.wq.weight", b.wq.w);
    f(blk + "attn.wq.bias", b.wq.b);
    f(blk + "attn.wk.weight", b.wk.w);
    f(blk + "attn.wk.bias", b.wk.b);
    f(blk + "attn.wv.weight", b.wv.w);
    f(blk + "attn.wv.bias", b.wv.b);
    f(blk + "attn.wo.weight", b.wo.w);
    f(blk + "attn.wo.bias", b.wo.b);
    f(blk + "ln2.gamma", b.ln2.gamma);
    f(blk + "ln2.beta", b.ln2.beta);
    f(blk + "ffn.w1.weight", b.ffn1.w);
    f(blk + "ffn.w1.bias", b.ffn1.b);
    f(blk + "ffn.w2.weight", b.ffn2.w);
    f(blk + "ffn.w2.bias", b.ffn2.b);
  }
  for (int c = 0; c < kNumChannels; ++c) {
    const std::string ch = channel_name(static_cast<ChannelId>(c));
    f("head." + ch + ".weight", p.heads[c].w);
    f("head." + ch + ".bias", p.heads[c].b);
  }
}

// Layer norm over the last dimension, caching what backward needs.
template <typename S>
void layer_norm_forward(const Mat<S>& x, const NormParam<S>& np, Mat<S>& xhat, Vec<S>& rstd,
                        Mat<S>& out) {
  const std::int64_t t = x.rows();
  const std::int64_t d = x.cols();
  xhat.resize(t, d);
  rstd.resize(t);
  out.resize(t, d);
  for (std::int64_t i = 0; i < t; ++i) {
    const S mu = x.row(i).mean();
    S var = S(0);
    for (std::int64_t j = 0; j < d; ++j) {
      const S dv = x(i, j) - mu;
      var += dv * dv;
    }
    var /= static_cast<S>(d);
    const S r = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    rstd(i) = r;
    xhat.row(i) = (x.row(i).array() - mu) * r;
    out.row(i) = xhat.row(i).cwiseProduct(np.gamma.transpose()) + np.beta.transpose();
  }
}

// dy -> dx; accumulates dgamma/dbeta when a grad target is present.
template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat, const Vec<S>& rstd,
                           const NormParam<S>& np, NormParam<S>* grad) {
  const std::int64_t t = dy.rows();
  const std::int64_t d = dy.cols();
  Mat<S> dx(t, d);
  for (std::int64_t i = 0; i < t; ++i) {
    Eigen::Array<S, Eigen::Dynamic, 1> dxhat =
        dy.row(i).transpose().array() * np.gamma.array();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * xhat.row(i).transpose().array()).mean();
    dx.row(i) =
        (rstd(i) * (dxhat - m1 - xhat.row(i).transpose().array() * m2)).matrix().transpose();
  }
  if (grad) {
    grad->gamma += (dy.cwiseProduct(xhat)).colwise().sum().transpose();
    grad->beta += dy.colwise().sum().transpose();
  }
  return dx;
}

// y = x * w + b, optionally with a rank-1 adapter on w.
template <typename S>
Mat<S> linear_forward(const Mat<S>& x, const LinearParam<S>& lin, const LoraEntry<S>* le) {
  Mat<S> y = x * lin.w;
  y.rowwise() += lin.b.transpose();
  if (le) y += (x * le->a) * le->b.transpose();
  return y;
}

// dy -> dx; accumulates weight grads (when grad) and adapter grads (when lg).
template <typename S>
Mat<S> linear_backward(const Mat<S>& x, const Mat<S>& dy, const LinearParam<S>& lin,
                       LinearParam<S>* grad, const LoraEntry<S>* le, LoraEntry<S>* lg) {
  if (grad) {
    grad->w += x.transpose() * dy;
    grad->b += dy.colwise().sum().transpose();
  }
  Mat<S> dx = dy * lin.w.transpose();
  if (le) {
    const Vec<S> u = dy * le->b; // T
    dx += u * le->a.transpose();
    if (lg) {
      lg->a += x.transpose() * u;
      lg->b += dy.transpose() * (x * le->a);
    }
  }
  return dx;
}

template <typename S>
Mat<S> positional_encoding(std::int64_t t, int d) {
  Mat<S> pe(t, d);
  for (std::int64_t i = 0; i < t; ++i) {
    for (int j = 0; j < d; j += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
      const double angle = static_cast<double>(i) * freq;
      pe(i, j) = static_cast<S>(std::sin(angle));
      if (j + 1 < d) pe(i, j + 1) = static_cast<S>(std::cos(angle));
    }
  }
  return pe;
}

// Adapter entry index per linear, following adapted_linear_names order.
int lora_index_chan_proj(int c) { return c; }
int lora_index_fusion() { return kNumChannels; }
int lora_index_block(int block, int which /*0=q 1=k 2=v 3=o 4=ffn1 5=ffn2*/) {
  return kNumChannels + 1 + block * 6 + which;
}

template <typename S>
const LoraEntry<S>* lora_at(const LoraSet<S>* set, int idx) {
  return set ? &set->entries[static_cast<std::size_t>(idx)] : nullptr;
}

template <typename S>
LoraEntry<S>* lora_grad_at(LoraSet<S>* set, int idx) {
  return set ? &set->entries[static_cast<std::size_t>(idx)] : nullptr;
}

} // namespace

void EncoderConfig::validate() const {
  if (n_blocks < 0) throw ConfigError("encoder: n_blocks must be >= 0");
  if (model_dim < 1 || ffn_dim < 1 || n_heads < 1 || channel_proj_dim < 1 || k_per_channel < 1)
    throw ConfigError("encoder: dimensions must be positive");
  if (model_dim % n_heads != 0) throw ConfigError("encoder: model_dim must divide by n_heads");
  for (const int d : channel_dims)
    if (d < 1) throw ConfigError("encoder: channel dims must be positive");
}

std::int64_t param_count(const EncoderConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.model_dim;
  const std::int64_t f = cfg.ffn_dim;
  const std::int64_t p = cfg.channel_proj_dim;
  const std::int64_t k = cfg.k_per_channel;
  std::int64_t total = 0;
  for (const int dc : cfg.channel_dims) total += 2 * dc;            // channel norms
  for (const int dc : cfg.channel_dims) total += dc * p + p;        // channel projections
  total += kNumChannels * p;                                        // mask embeddings
  total += kNumChannels * p * d + d;                                // fusion
  const std::int64_t per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  total += cfg.n_blocks * per_block;
  total += kNumChannels * (d * k + k);                              // prediction heads
  return total;
}

template <typename S>
std::vector<TensorRef<S>> collect_params(EncoderParams<S>& p) {
  std::vector<TensorRef<S>> out;
  visit_params(p, [&out](const std::string& name, auto& tensor) {
    out.push_back({name, tensor.data(), static_cast<std::int64_t>(tensor.size())});
  });
  return out;
}

template <typename S>
EncoderParams<S> make_params(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderParams<S> p;
  const int d = cfg.model_dim;
  const int pf = cfg.channel_proj_dim;
  for (int c = 0; c < kNumChannels; ++c) {
    const int dc = cfg.channel_dims[c];
    p.chan_norm[c].gamma = Vec<S>::Zero(dc);
    p.chan_norm[c].beta = Vec<S>::Zero(dc);
    p.chan_proj[c].w = Mat<S>::Zero(dc, pf);
    p.chan_proj[c].b = Vec<S>::Zero(pf);
    p.mask_embed[c] = Vec<S>::Zero(pf);
    p.heads[c].w = Mat<S>::Zero(d, cfg.k_per_channel);
    p.heads[c].b = Vec<S>::Zero(cfg.k_per_channel);
  }
  p.fusion.w = Mat<S>::Zero(cfg.fusion_in_dim(), d);
  p.fusion.b = Vec<S>::Zero(d);
  p.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  for (auto& b : p.blocks) {
    b.ln1.gamma = Vec<S>::Zero(d);
    b.ln1.beta = Vec<S>::Zero(d);
    b.wq.w = Mat<S>::Zero(d, d);
    b.wq.b = Vec<S>::Zero(d);
    b.wk.w = Mat<S>::Zero(d, d);
    b.wk.b = Vec<S>::Zero(d);
    b.wv.w = Mat<S>::Zero(d, d);
    b.wv.b = Vec<S>::Zero(d);
    b.wo.w = Mat<S>::Zero(d, d);
    b.wo.b = Vec<S>::Zero(d);
    b.ln2.gamma = Vec<S>::Zero(d);
    b.ln2.beta = Vec<S>::Zero(d);
    b.ffn1.w = Mat<S>::Zero(d, cfg.ffn_dim);
    b.ffn1.b = Vec<S>::Zero(cfg.ffn_dim);
    b.ffn2.w = Mat<S>::Zero(cfg.ffn_dim, d);
    b.ffn2.b = Vec<S>::Zero(d);
  }
  return p;
}

template <typename S>
void zero_params(EncoderParams<S>& p) {
  visit_params(p, [](const std::string&, auto& tensor) { tensor.setZero(); });
}

template <typename S>
EncoderParams<S> init_params(const EncoderConfig& cfg, std::uint64_t seed, bool zero_heads) {
  EncoderParams<S> p = make_params<S>(cfg);
  visit_params(p, [&](const std::string& name, auto& tensor) {
    const bool is_gamma = name.ends_with(".gamma");
    const bool is_beta = name.ends_with(".beta");
    const bool is_bias = name.ends_with(".bias");
    const bool is_head = name.starts_with("head.");
    if (is_gamma) {
      tensor.setOnes();
      return;
    }
    if (is_beta || is_bias) {
      tensor.setZero();
      return;
    }
    if (is_head && zero_heads) {
      tensor.setZero();
      return;
    }
    Rng rng(derive_seed(seed, name));
    for (std::int64_t i = 0; i < tensor.size(); ++i)
      tensor.data()[i] = static_cast<S>(kInitStd * rng.next_normal());
  });
  return p;
}

std::vector<std::string> adapted_linear_names(const EncoderConfig& cfg) {
  std::vector<std::string> names;
  for (int c = 0; c < kNumChannels; ++c)
    names.push_back("chan_proj." + std::string(channel_name(static_cast<ChannelId>(c))) +
                    ".weight");
  names.push_back("fusion.weight");
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const std::string blk = "block" + std::to_string(i) + ".";
    names.push_back(blk + "attn.wq.weight");
    names.push_back(blk + "attn.wk.weight");
    names.push_back(blk + "attn.wv.weight");
    names.push_back(blk + "attn.wo.weight");
    names.push_back(blk + "ffn.w1.weight");
    names.push_back(blk + "ffn.w2.weight");
  }
  return names;
}

std::int64_t lora_param_count(const EncoderConfig& cfg) {
  cfg.validate();
  std::int64_t total = 0;
  for (const int dc : cfg.channel_dims) total += dc + cfg.channel_proj_dim;
  total += cfg.fusion_in_dim() + cfg.model_dim;
  const std::int64_t d = cfg.model_dim;
  const std::int64_t f = cfg.ffn_dim;
  total += cfg.n_blocks * (4 * (d + d) + (d + f) + (f + d));
  return total;
}

template <typename S>
LoraSet<S> init_lora(const EncoderConfig& cfg, std::uint64_t seed) {
  LoraSet<S> set;
  EncoderParams<S> shapes = make_params<S>(cfg);
  std::unordered_map<std::string, std::pair<std::int64_t, std::int64_t>> dims;
  visit_params(shapes, [&dims](const std::string& name, auto& tensor) {
    dims[name] = {tensor.rows(), tensor.cols()};
  });
  for (const auto& name : adapted_linear_names(cfg)) {
    const auto [in, out] = dims.at(name);
    LoraEntry<S> e;
    e.name = name;
    e.a = Vec<S>::Zero(in);
    e.b = Vec<S>::Zero(out);
    Rng rng(derive_seed(seed, "lora." + name));
    for (std::int64_t i = 0; i < in; ++i) e.a(i) = static_cast<S>(kInitStd * rng.next_normal());
    set.entries.push_back(std::move(e));
  }
  return set;
}

template <typename S>
LoraSet<S> zero_lora_like(const LoraSet<S>& set) {
  LoraSet<S> out;
  for (const auto& e : set.entries) {
    LoraEntry<S> z;
    z.name = e.name;
    z.a = Vec<S>::Zero(e.a.size());
    z.b = Vec<S>::Zero(e.b.size());
    out.entries.push_back(std::move(z));
  }
  return out;
}

template <typename S>
ForwardResult<S> encoder_forward(const EncoderConfig& cfg, const EncoderParams<S>& params,
                                 const FeatureSequence& seq, const MaskPlan* plan,
                                 ForwardCache<S>* cache, const LoraSet<S>* lora) {
  cfg.validate();
  seq.validate(&cfg.channel_dims);
  for (int c = 0; c < kNumChannels; ++c)
    for (const auto pr : seq.presence[c])
      if (!pr) throw PreconditionError("encoder_forward: sequence not fully interpolated");
  const std::int64_t t = seq.frames();
  if (plan && plan->frames() != t)
    throw SchemaError("encoder_forward: mask plan length != sequence length");
  if (lora &&
      lora->entries.size() != adapted_linear_names(cfg).size())
    throw ConfigError("encoder_forward: adapter set does not match the config");

  const int d = cfg.model_dim;
  const int pdim = cfg.channel_proj_dim;

  ForwardCache<S> local_cache;
  ForwardCache<S>& cc = cache ? *cache : local_cache;
  if (plan) {
    cc.plan = *plan;
    cc.has_plan = true;
  } else {
    cc.plan = MaskPlan{};
    for (int c = 0; c < kNumChannels; ++c)
      cc.plan.grid[c].assign(static_cast<std::size_t>(t), 0);
    cc.has_plan = false;
  }

  // Channel stage: per-channel layer norm, projection to pdim, mask-token
  // substitution, then concatenation.
  cc.fused_in.resize(t, cfg.fusion_in_dim());
  for (int c = 0; c < kNumChannels; ++c) {
    const Mat<S> x = seq.channels[c].template cast<S>();
    layer_norm_forward(x, params.chan_norm[c], cc.ln_xhat[c], cc.ln_rstd[c], cc.ln_out[c]);
    Mat<S> proj = linear_forward(cc.ln_out[c], params.chan_proj[c],
                                 lora_at(lora, lora_index_chan_proj(c)));
    if (plan)
      for (std::int64_t i = 0; i < t; ++i)
        if (plan->masked(c, i)) proj.row(i) = params.mask_embed[c].transpose();
    cc.fused_in.middleCols(c * pdim, pdim) = proj;
  }

  ForwardResult<S> result;
  result.layers.reserve(static_cast<std::size_t>(cfg.n_blocks) + 1);
  Mat<S> x = linear_forward(cc.fused_in, params.fusion, lora_at(lora, lora_index_fusion()));
  if (cfg.use_positional_encoding) x += positional_encoding<S>(t, d);
  result.layers.push_back(x);

  const int dh = cfg.head_dim();
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  cc.blocks.clear();
  cc.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  for (int blk = 0; blk < cfg.n_blocks; ++blk) {
    auto& bc = cc.blocks[static_cast<std::size_t>(blk)];
    const auto& bp = params.blocks[static_cast<std::size_t>(blk)];
    bc.x_in = x;

    layer_norm_forward(bc.x_in, bp.ln1, bc.ln1_xhat, bc.ln1_rstd, bc.ln1_out);
    bc.q = linear_forward(bc.ln1_out, bp.wq, lora_at(lora, lora_index_block(blk, 0)));
    bc.k = linear_forward(bc.ln1_out, bp.wk, lora_at(lora, lora_index_block(blk, 1)));
    bc.v = linear_forward(bc.ln1_out, bp.wv, lora_at(lora, lora_index_block(blk, 2)));

    bc.attn_concat.resize(t, d);
    bc.attn_probs.assign(static_cast<std::size_t>(cfg.n_heads), Mat<S>());
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto qh = bc.q.middleCols(h * dh, dh);
      const auto kh = bc.k.middleCols(h * dh, dh);
      const auto vh = bc.v.middleCols(h * dh, dh);
      Mat<S> scores = (qh * kh.transpose()) * inv_sqrt_dh;
      for (std::int64_t i = 0; i < t; ++i) {
        const S row_max = scores.row(i).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (scores.row(i).array() - row_max).exp();
        scores.row(i) = (e / e.sum()).matrix();
      }
      bc.attn_probs[static_cast<std::size_t>(h)] = scores;
      bc.attn_concat.middleCols(h * dh, dh) = scores * vh;
    }
    Mat<S> attn_out =
        linear_forward(bc.attn_concat, bp.wo, lora_at(lora, lora_index_block(blk, 3)));
    bc.x_mid = bc.x_in + attn_out;

    layer_norm_forward(bc.x_mid, bp.ln2, bc.ln2_xhat, bc.ln2_rstd, bc.ln2_out);
    bc.ffn_pre = linear_forward(bc.ln2_out, bp.ffn1, lora_at(lora, lora_index_block(blk, 4)));
    bc.ffn_act = bc.ffn_pre.unaryExpr([](S v) { return gelu(v); });
    Mat<S> ffn_out =
        linear_forward(bc.ffn_act, bp.ffn2, lora_at(lora, lora_index_block(blk, 5)));
    x = bc.x_mid + ffn_out;
    result.layers.push_back(x);
  }

  for (int c = 0; c < kNumChannels; ++c)
    result.logits[c] = linear_forward(result.layers.back(), params.heads[c],
                                      static_cast<const LoraEntry<S>*>(nullptr));
  return result;
}

template <typename S>
LossBreakdown masked_ce_loss(const std::array<Mat<S>, kNumChannels>& logits,
                             const ClusterAssignments& targets, const MaskPlan& plan,
                             double cell_weight) {
  const std::int64_t t = plan.frames();
  LossBreakdown out;
  for (int c = 0; c < kNumChannels; ++c) {
    if (logits[c].rows() != t) throw SchemaError("masked_ce_loss: logits length != plan length");
    if (static_cast<std::int64_t>(targets.labels[c].size()) != t)
      throw SchemaError("masked_ce_loss: target length != plan length");
  }
  if (plan.masked_count_total() == 0)
    throw NoTargetError("masked_ce_loss: plan has no masked cells");

  int active = 0;
  for (int c = 0; c < kNumChannels; ++c) {
    const std::int64_t k = logits[c].cols();
    double sum = 0.0;
    std::int64_t count = 0;
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < t; ++i) {
      if (!plan.masked(c, i)) continue;
      const int target = targets.labels[c][static_cast<std::size_t>(i)];
      if (target < 0 || target >= k)
        throw DataError("masked_ce_loss: target out of range for channel " +
                        std::string(channel_name(static_cast<ChannelId>(c))));
      double row_max = -std::numeric_limits<double>::infinity();
      int argmax = 0;
      for (std::int64_t j = 0; j < k; ++j) {
        const double v = static_cast<double>(logits[c](i, j));
        if (v > row_max) {
          row_max = v;
          argmax = static_cast<int>(j);
        }
      }
      double denom = 0.0;
      for (std::int64_t j = 0; j < k; ++j)
        denom += std::exp(static_cast<double>(logits[c](i, j)) - row_max);
      const double lse = row_max + std::log(denom);
      sum += cell_weight * (lse - static_cast<double>(logits[c](i, target)));
      correct += argmax == target;
      ++count;
    }
    out.per_channel_sum[c] = sum;
    out.masked_count[c] = count;
    out.correct_count[c] = correct;
    if (count > 0) {
      out.per_channel[c] = sum / static_cast<double>(count);
      out.loss += out.per_channel[c];
      ++active;
    }
  }
  out.loss /= static_cast<double>(active);
  return out;
}

template <typename S>
void encoder_backward_from_last(const EncoderConfig& cfg, const EncoderParams<S>& params,
                                const ForwardCache<S>& cache, const Mat<S>& dlast,
                                EncoderParams<S>* grads, const LoraSet<S>* lora,
                                LoraSet<S>* lora_grads) {
  const std::int64_t t = dlast.rows();
  const int d = cfg.model_dim;
  const int dh = cfg.head_dim();
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Mat<S> dx = dlast;
  for (int blk = cfg.n_blocks - 1; blk >= 0; --blk) {
    const auto& bc = cache.blocks[static_cast<std::size_t>(blk)];
    const auto& bp = params.blocks[static_cast<std::size_t>(blk)];
    auto* bg = grads ? &grads->blocks[static_cast<std::size_t>(blk)] : nullptr;

    // x_out = x_mid + ffn2(gelu(ffn1(ln2(x_mid))))
    Mat<S> dffn_act = linear_backward(bc.ffn_act, dx, bp.ffn2, bg ? &bg->ffn2 : nullptr,
                                      lora_at(lora, lora_index_block(blk, 5)),
                                      lora_grad_at(lora_grads, lora_index_block(blk, 5)));
    Mat<S> dffn_pre =
        dffn_act.cwiseProduct(bc.ffn_pre.unaryExpr([](S v) { return gelu_grad(v); }));
    Mat<S> dln2_out = linear_backward(bc.ln2_out, dffn_pre, bp.ffn1, bg ? &bg->ffn1 : nullptr,
                                      lora_at(lora, lora_index_block(blk, 4)),
                                      lora_grad_at(lora_grads, lora_index_block(blk, 4)));
    Mat<S> dx_mid =
        dx + layer_norm_backward(dln2_out, bc.ln2_xhat, bc.ln2_rstd, bp.ln2,
                                 bg ? &bg->ln2 : nullptr);

    // x_mid = x_in + wo(attn)
    Mat<S> dattn_concat =
        linear_backward(bc.attn_concat, dx_mid, bp.wo, bg ? &bg->wo : nullptr,
                        lora_at(lora, lora_index_block(blk, 3)),
                        lora_grad_at(lora_grads, lora_index_block(blk, 3)));
    Mat<S> dq(t, d), dk(t, d), dv(t, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto qh = bc.q.middleCols(h * dh, dh);
      const auto kh = bc.k.middleCols(h * dh, dh);
      const auto vh = bc.v.middleCols(h * dh, dh);
      const Mat<S>& probs = bc.attn_probs[static_cast<std::size_t>(h)];
      const auto doh = dattn_concat.middleCols(h * dh, dh);
      Mat<S> dprobs = doh * vh.transpose();
      dv.middleCols(h * dh, dh) = probs.transpose() * doh;
      // softmax backward per row
      Mat<S> dscores(t, t);
      for (std::int64_t i = 0; i < t; ++i) {
        const S dot = probs.row(i).dot(dprobs.row(i));
        dscores.row(i) =
            (probs.row(i).array() * (dprobs.row(i).array() - dot)).matrix() * inv_sqrt_dh;
      }
      dq.middleCols(h * dh, dh) = dscores * kh;
      dk.middleCols(h * dh, dh) = dscores.transpose() * qh;
    }
    Mat<S> dln1_out = linear_backward(bc.ln1_out, dq, bp.wq, bg ? &bg->wq : nullptr,
                                      lora_at(lora, lora_index_block(blk, 0)),
                                      lora_grad_at(lora_grads, lora_index_block(blk, 0)));
    dln1_out += linear_backward(bc.ln1_out, dk, bp.wk, bg ? &bg->wk : nullptr,
                                lora_at(lora, lora_index_block(blk, 1)),
                                lora_grad_at(lora_grads, lora_index_block(blk, 1)));
    dln1_out += linear_backward(bc.ln1_out, dv, bp.wv, bg ? &bg->wv : nullptr,
                                lora_at(lora, lora_index_block(blk, 2)),
                                lora_grad_at(lora_grads, lora_index_block(blk, 2)));
    dx = dx_mid + layer_norm_backward(dln1_out, bc.ln1_xhat, bc.ln1_rstd, bp.ln1,
                                      bg ? &bg->ln1 : nullptr);
  }

  // Positional encoding is additive: gradient passes straight through.
  Mat<S> dfused = linear_backward(cache.fused_in, dx, params.fusion,
                                  grads ? &grads->fusion : nullptr,
                                  lora_at(lora, lora_index_fusion()),
                                  lora_grad_at(lora_grads, lora_index_fusion()));

  const int pdim = cfg.channel_proj_dim;
  for (int c = 0; c < kNumChannels; ++c) {
    Mat<S> dproj = dfused.middleCols(c * pdim, pdim);
    for (std::int64_t i = 0; i < t; ++i) {
      if (cache.plan.masked(c, i)) {
        if (grads) grads->mask_embed[c] += dproj.row(i).transpose();
        dproj.row(i).setZero(); // raw features at masked cells are dead
      }
    }
    Mat<S> dln_out = linear_backward(cache.ln_out[c], dproj, params.chan_proj[c],
                                     grads ? &grads->chan_proj[c] : nullptr,
                                     lora_at(lora, lora_index_chan_proj(c)),
                                     lora_grad_at(lora_grads, lora_index_chan_proj(c)));
    layer_norm_backward(dln_out, cache.ln_xhat[c], cache.ln_rstd[c], params.chan_norm[c],
                        grads ? &grads->chan_norm[c] : nullptr);
  }
}

template <typename S>
LossBreakdown encoder_backward(const EncoderConfig& cfg, const EncoderParams<S>& params,
                               const ForwardResult<S>& fwd, const ForwardCache<S>& cache,
                               const ClusterAssignments& targets, EncoderParams<S>* grads,
                               const BackwardOptions& opts, const LoraSet<S>* lora,
                               LoraSet<S>* lora_grads) {
  if (!cache.has_plan)
    throw PreconditionError("encoder_backward: forward ran without a mask plan");
  const MaskPlan& plan = cache.plan;
  const LossBreakdown breakdown = masked_ce_loss(fwd.logits, targets, plan, opts.cell_weight);

  int active = 0;
  for (int c = 0; c < kNumChannels; ++c) active += breakdown.masked_count[c] > 0;

  const std::int64_t t = plan.frames();
  const Mat<S>& last = fwd.layers.back();
  Mat<S> dlast = Mat<S>::Zero(t, cfg.model_dim);
  for (int c = 0; c < kNumChannels; ++c) {
    if (breakdown.masked_count[c] == 0) continue;
    const double wc =
        opts.channel_weight
            ? (*opts.channel_weight)[c]
            : 1.0 / (static_cast<double>(breakdown.masked_count[c]) * static_cast<double>(active));
    const std::int64_t k = fwd.logits[c].cols();
    Mat<S> dlogits = Mat<S>::Zero(t, k);
    for (std::int64_t i = 0; i < t; ++i) {
      if (!plan.masked(c, i)) continue;
      double row_max = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j)
        row_max = std::max(row_max, static_cast<double>(fwd.logits[c](i, j)));
      double denom = 0.0;
      for (std::int64_t j = 0; j < k; ++j)
        denom += std::exp(static_cast<double>(fwd.logits[c](i, j)) - row_max);
      const int target = targets.labels[c][static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < k; ++j) {
        const double p = std::exp(static_cast<double>(fwd.logits[c](i, j)) - row_max) / denom;
        const double y = j == target ? 1.0 : 0.0;
        dlogits(i, j) = static_cast<S>(opts.cell_weight * wc * (p - y));
      }
    }
    if (grads) {
      grads->heads[c].w += last.transpose() * dlogits;
      grads->heads[c].b += dlogits.colwise().sum().transpose();
    }
    dlast += dlogits * params.heads[c].w.transpose();
  }

  encoder_backward_from_last(cfg, params, cache, dlast, grads, lora, lora_grads);
  return breakdown;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

} // namespace

template <typename S>
void save_checkpoint(const EncoderConfig& cfg, const EncoderParams<S>& params,
                     const std::filesystem::path& path) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  append_u32(out, kCheckpointVersion);
  append_u32(out, static_cast<std::uint32_t>(cfg.n_blocks));
  append_u32(out, static_cast<std::uint32_t>(cfg.model_dim));
  append_u32(out, static_cast<std::uint32_t>(cfg.ffn_dim));
  append_u32(out, static_cast<std::uint32_t>(cfg.n_heads));
  append_u32(out, static_cast<std::uint32_t>(cfg.channel_proj_dim));
  append_u32(out, static_cast<std::uint32_t>(cfg.k_per_channel));
  for (const int dc : cfg.channel_dims) append_u32(out, static_cast<std::uint32_t>(dc));
  append_u32(out, cfg.use_positional_encoding ? 1u : 0u);

  std::uint32_t count = 0;
  visit_params(params, [&count](const std::string&, const auto&) { ++count; });
  append_u32(out, count);
  visit_params(params, [&out](const std::string& name, const auto& tensor) {
    append_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append_u64(out, static_cast<std::uint64_t>(tensor.size()));
    for (std::int64_t i = 0; i < tensor.size(); ++i) {
      const float v = static_cast<float>(tensor.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      append_u32(out, bits);
    }
  });

  // Atomic: write a sibling temp file, then rename over the target.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic");
  std::size_t pos = 4;
  auto get_u32 = [&bytes, &pos]() {
    if (pos + 4 > bytes.size()) throw LengthError("checkpoint: truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  auto get_u64 = [&bytes, &pos]() {
    if (pos + 8 > bytes.size()) throw LengthError("checkpoint: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  };

  if (get_u32() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.config.n_blocks = static_cast<int>(get_u32());
  ck.config.model_dim = static_cast<int>(get_u32());
  ck.config.ffn_dim = static_cast<int>(get_u32());
  ck.config.n_heads = static_cast<int>(get_u32());
  ck.config.channel_proj_dim = static_cast<int>(get_u32());
  ck.config.k_per_channel = static_cast<int>(get_u32());
  for (int c = 0; c < kNumChannels; ++c) ck.config.channel_dims[c] = static_cast<int>(get_u32());
  ck.config.use_positional_encoding = get_u32() != 0;
  ck.config.validate();
  ck.params = make_params<float>(ck.config);

  std::unordered_map<std::string, TensorRef<float>> registry;
  for (auto& ref : collect_params(ck.params)) registry.emplace(ref.name, ref);

  const std::uint32_t count = get_u32();
  if (count != registry.size())
    throw SchemaError("checkpoint: tensor count " + std::to_string(count) +
                      " != registry size " + std::to_string(registry.size()));
  std::size_t seen = 0;
  std::unordered_map<std::string, bool> filled;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32();
    if (pos + name_len > bytes.size()) throw LengthError("checkpoint: truncated name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const std::uint64_t n = get_u64();
    const auto it = registry.find(name);
    if (it == registry.end()) throw SchemaError("checkpoint: unknown tensor " + name);
    if (filled[name]) throw SchemaError("checkpoint: duplicate tensor " + name);
    if (static_cast<std::uint64_t>(it->second.size) != n)
      throw SchemaError("checkpoint: tensor " + name + " has wrong element count");
    for (std::uint64_t j = 0; j < n; ++j) {
      const std::uint32_t bits = get_u32();
      float v;
      std::memcpy(&v, &bits, 4);
      it->second.data[j] = v;
    }
    filled[name] = true;
    ++seen;
  }
  if (seen != registry.size()) throw SchemaError("checkpoint: missing tensors");
  if (pos != bytes.size()) throw LengthError("checkpoint: trailing bytes");
  return ck;
}

// Explicit instantiations: float for training, double for the
// finite-difference oracle.
template std::vector<TensorRef<float>> collect_params(EncoderParams<float>&);
template std::vector<TensorRef<double>> collect_params(EncoderParams<double>&);
template EncoderParams<float> make_params(const EncoderConfig&);
template EncoderParams<double> make_params(const EncoderConfig&);
template void zero_params(EncoderParams<float>&);
template void zero_params(EncoderParams<double>&);
template EncoderParams<float> init_params(const EncoderConfig&, std::uint64_t, bool);
template EncoderParams<double> init_params(const EncoderConfig&, std::uint64_t, bool);
template LoraSet<float> init_lora(const EncoderConfig&, std::uint64_t);
template LoraSet<double> init_lora(const EncoderConfig&, std::uint64_t);
template LoraSet<float> zero_lora_like(const LoraSet<float>&);
template LoraSet<double> zero_lora_like(const LoraSet<double>&);
template ForwardResult<float> encoder_forward(const EncoderConfig&, const EncoderParams<float>&,
                                              const FeatureSequence&, const MaskPlan*,
                                              ForwardCache<float>*, const LoraSet<float>*);
template ForwardResult<double> encoder_forward(const EncoderConfig&, const EncoderParams<double>&,
                                               const FeatureSequence&, const MaskPlan*,
                                               ForwardCache<double>*, const LoraSet<double>*);
template LossBreakdown masked_ce_loss(const std::array<Mat<float>, kNumChannels>&,
                                      const ClusterAssignments&, const MaskPlan&, double);
template LossBreakdown masked_ce_loss(const std::array<Mat<double>, kNumChannels>&,
                                      const ClusterAssignments&, const MaskPlan&, double);
template void encoder_backward_from_last(const EncoderConfig&, const EncoderParams<float>&,
                                         const ForwardCache<float>&, const Mat<float>&,
                                         EncoderParams<float>*, const LoraSet<float>*,
                                         LoraSet<float>*);
template void encoder_backward_from_last(const EncoderConfig&, const EncoderParams<double>&,
                                         const ForwardCache<double>&, const Mat<double>&,
                                         EncoderParams<double>*, const LoraSet<double>*,
                                         LoraSet<double>*);
template LossBreakdown encoder_backward(const EncoderConfig&, const EncoderParams<float>&,
                                        const ForwardResult<float>&, const ForwardCache<float>&,
                                        const ClusterAssignments&, EncoderParams<float>*,
                                        const BackwardOptions&, const LoraSet<float>*,
                                        LoraSet<float>*);
template LossBreakdown encoder_backward(const EncoderConfig&, const EncoderParams<double>&,
                                        const ForwardResult<double>&, const ForwardCache<double>&,
                                        const ClusterAssignments&, EncoderParams<double>*,
                                        const BackwardOptions&, const LoraSet<double>*,
                                        LoraSet<double>*);
template void save_checkpoint(const EncoderConfig&, const EncoderParams<float>&,
                              const std::filesystem::path&);
template void save_checkpoint(const EncoderConfig&, const EncoderParams<double>&,
                              const std::filesystem::path&);

} // namespace signstream
