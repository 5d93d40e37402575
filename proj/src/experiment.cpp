// SPDX-License-Identifier: Apache-2.0

#include "signstream/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "signstream/rng.hpp"

namespace signstream {

namespace {

// Collects every config problem before failing, so the operator sees all
// field-level messages at once.
struct ConfigParser {
  std::vector<std::string> errors;

  template <typename T>
  void read(const nlohmann::json& j, const std::string& prefix, const char* key, T& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    try {
      it->get_to(out);
    } catch (const nlohmann::json::exception&) {
      errors.push_back(prefix + key + ": wrong type");
    }
  }

  void read_dims(const nlohmann::json& j, const std::string& prefix, const char* key,
                 ChannelDims& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_array() || it->size() != kNumChannels) {
      errors.push_back(prefix + key + ": expected an array of 4 integers");
      return;
    }
    try {
      for (int c = 0; c < kNumChannels; ++c) out[c] = it->at(c).get<int>();
    } catch (const nlohmann::json::exception&) {
      errors.push_back(prefix + key + ": expected an array of 4 integers");
    }
  }

  void check_unknown(const nlohmann::json& j, const std::string& prefix,
                     std::initializer_list<std::string_view> known) {
    if (!j.is_object()) {
      errors.push_back(prefix.empty() ? "config root: expected an object"
                                      : prefix + ": expected an object");
      return;
    }
    for (const auto& [key, value] : j.items()) {
      (void)value;
      if (std::find(known.begin(), known.end(), key) == known.end())
        errors.push_back(prefix + key + ": unknown field");
    }
  }

  void finish() const {
    if (errors.empty()) return;
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
};

const nlohmann::json kEmptyObject = nlohmann::json::object();

const nlohmann::json& section(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? kEmptyObject : *it;
}

void require_path(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string("missing required path: ") + what);
}

std::filesystem::path prepare_output_dir(const ExperimentConfig& cfg) {
  require_path(cfg.paths.output_dir, "paths.output_dir");
  const std::filesystem::path dir(cfg.paths.output_dir);
  std::filesystem::create_directories(dir);
  write_resolved_config(cfg, dir / "config.resolved.json");
  return dir;
}

void write_report(const nlohmann::json& report, const std::filesystem::path& dir) {
  std::ofstream f(dir / "report.json", std::ios::trunc);
  f << report.dump(2) << '\n';
}

nlohmann::json vec_to_json(const VecF& v) {
  nlohmann::json out = nlohmann::json::array();
  for (std::int64_t i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

VecF vec_from_json(const nlohmann::json& j) {
  VecF v(static_cast<std::int64_t>(j.size()));
  for (std::int64_t i = 0; i < v.size(); ++i) v(i) = j.at(static_cast<std::size_t>(i)).get<float>();
  return v;
}

nlohmann::json mat_to_json(const MatF& m) {
  nlohmann::json out;
  out["rows"] = m.rows();
  out["cols"] = m.cols();
  nlohmann::json data = nlohmann::json::array();
  for (std::int64_t i = 0; i < m.size(); ++i) data.push_back(m.data()[i]);
  out["data"] = std::move(data);
  return out;
}

MatF mat_from_json(const nlohmann::json& j) {
  MatF m(j.at("rows").get<std::int64_t>(), j.at("cols").get<std::int64_t>());
  const auto& data = j.at("data");
  if (static_cast<std::int64_t>(data.size()) != m.size())
    throw ConfigError("adapter bundle: matrix size mismatch");
  for (std::int64_t i = 0; i < m.size(); ++i)
    m.data()[i] = data.at(static_cast<std::size_t>(i)).get<float>();
  return m;
}

// Labeled view: sequences with labels for one task; keeps dataset order.
struct LabeledView {
  Dataset data;
  std::vector<int> labels;
  int n_classes = 0;
};

LabeledView labeled_view(const Dataset& ds) {
  LabeledView view;
  view.data = ds;
  view.labels = ds.labels;
  view.n_classes = ds.num_classes;
  for (const int l : view.labels)
    if (l < 0) throw DataError("dataset is missing labels for some sequences");
  if (view.n_classes < 2) throw DataError("labeled dataset needs at least two classes");
  return view;
}

} // namespace

DownstreamConfig AdapterConfig::to_downstream(std::uint64_t seed) const {
  DownstreamConfig d;
  d.mode = adapt_mode_from_name(mode);
  d.max_epochs = max_epochs;
  d.batch_size = batch_size;
  d.lr = lr;
  d.weight_decay = weight_decay;
  d.label_smoothing = label_smoothing;
  d.lora_lr_scale = lora_lr_scale;
  d.patience = patience;
  d.val_fraction = val_fraction;
  d.reinit_last_block = reinit_last_block;
  d.seed = seed;
  return d;
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ConfigParser p;
  ExperimentConfig cfg;
  p.check_unknown(j, "", {"schema_version", "seed", "paths", "synthetic", "encoder", "cluster",
                          "train", "adapter"});

  p.read(j, "", "schema_version", cfg.schema_version);
  p.read(j, "", "seed", cfg.seed);

  const auto& paths = section(j, "paths");
  p.check_unknown(paths, "paths.", {"dataset_dir", "output_dir", "models_dir", "checkpoint",
                                    "adapter", "layer_weights"});
  p.read(paths, "paths.", "dataset_dir", cfg.paths.dataset_dir);
  p.read(paths, "paths.", "output_dir", cfg.paths.output_dir);
  p.read(paths, "paths.", "models_dir", cfg.paths.models_dir);
  p.read(paths, "paths.", "checkpoint", cfg.paths.checkpoint);
  p.read(paths, "paths.", "adapter", cfg.paths.adapter);
  p.read(paths, "paths.", "layer_weights", cfg.paths.layer_weights);

  const auto& synth = section(j, "synthetic");
  p.check_unknown(synth, "synthetic.",
                  {"num_seqs", "t_min", "t_max", "num_latent_gestures", "motifs_per_gesture",
                   "latent_dim", "latent_sigma", "noise_sigma", "motif_scale", "span_min",
                   "span_max", "single_gesture_per_seq", "channel_dims", "frame_rate_hint"});
  p.read(synth, "synthetic.", "num_seqs", cfg.synthetic.num_seqs);
  p.read(synth, "synthetic.", "t_min", cfg.synthetic.t_min);
  p.read(synth, "synthetic.", "t_max", cfg.synthetic.t_max);
  p.read(synth, "synthetic.", "num_latent_gestures", cfg.synthetic.num_latent_gestures);
  p.read(synth, "synthetic.", "motifs_per_gesture", cfg.synthetic.motifs_per_gesture);
  p.read(synth, "synthetic.", "latent_dim", cfg.synthetic.latent_dim);
  p.read(synth, "synthetic.", "latent_sigma", cfg.synthetic.latent_sigma);
  p.read(synth, "synthetic.", "noise_sigma", cfg.synthetic.noise_sigma);
  p.read(synth, "synthetic.", "motif_scale", cfg.synthetic.motif_scale);
  p.read(synth, "synthetic.", "span_min", cfg.synthetic.span_min);
  p.read(synth, "synthetic.", "span_max", cfg.synthetic.span_max);
  p.read(synth, "synthetic.", "single_gesture_per_seq", cfg.synthetic.single_gesture_per_seq);
  p.read_dims(synth, "synthetic.", "channel_dims", cfg.synthetic.dims);
  p.read(synth, "synthetic.", "frame_rate_hint", cfg.synthetic.frame_rate_hint);

  const auto& enc = section(j, "encoder");
  p.check_unknown(enc, "encoder.",
                  {"n_blocks", "model_dim", "ffn_dim", "n_heads", "channel_proj_dim",
                   "k_per_channel", "channel_dims", "use_positional_encoding"});
  p.read(enc, "encoder.", "n_blocks", cfg.encoder.n_blocks);
  p.read(enc, "encoder.", "model_dim", cfg.encoder.model_dim);
  p.read(enc, "encoder.", "ffn_dim", cfg.encoder.ffn_dim);
  p.read(enc, "encoder.", "n_heads", cfg.encoder.n_heads);
  p.read(enc, "encoder.", "channel_proj_dim", cfg.encoder.channel_proj_dim);
  p.read(enc, "encoder.", "k_per_channel", cfg.encoder.k_per_channel);
  p.read_dims(enc, "encoder.", "channel_dims", cfg.encoder.channel_dims);
  p.read(enc, "encoder.", "use_positional_encoding", cfg.encoder.use_positional_encoding);

  const auto& cluster = section(j, "cluster");
  p.check_unknown(cluster, "cluster.", {"k", "fraction", "max_iters", "tol", "restarts"});
  p.read(cluster, "cluster.", "k", cfg.cluster.k);
  p.read(cluster, "cluster.", "fraction", cfg.cluster.fraction);
  p.read(cluster, "cluster.", "max_iters", cfg.cluster.max_iters);
  p.read(cluster, "cluster.", "tol", cfg.cluster.tol);
  p.read(cluster, "cluster.", "restarts", cfg.cluster.restarts);

  const auto& train = section(j, "train");
  p.check_unknown(train, "train.",
                  {"total_steps", "peak_lr", "warmup_fraction", "frame_budget", "adam_beta1",
                   "adam_beta2", "adam_eps", "mask_strategy", "mask_ratio", "mask_span",
                   "checkpoint_every", "clip_grad_norm", "deterministic_timing"});
  p.read(train, "train.", "total_steps", cfg.train.total_steps);
  p.read(train, "train.", "peak_lr", cfg.train.peak_lr);
  p.read(train, "train.", "warmup_fraction", cfg.train.warmup_fraction);
  p.read(train, "train.", "frame_budget", cfg.train.frame_budget);
  p.read(train, "train.", "adam_beta1", cfg.train.adam_beta1);
  p.read(train, "train.", "adam_beta2", cfg.train.adam_beta2);
  p.read(train, "train.", "adam_eps", cfg.train.adam_eps);
  std::string strategy = mask_strategy_name(cfg.train.mask_strategy);
  p.read(train, "train.", "mask_strategy", strategy);
  p.read(train, "train.", "mask_ratio", cfg.train.mask_ratio);
  p.read(train, "train.", "mask_span", cfg.train.mask_span);
  p.read(train, "train.", "checkpoint_every", cfg.train.checkpoint_every);
  p.read(train, "train.", "clip_grad_norm", cfg.train.clip_grad_norm);
  p.read(train, "train.", "deterministic_timing", cfg.train.deterministic_timing);

  const auto& adapter = section(j, "adapter");
  p.check_unknown(adapter, "adapter.",
                  {"mode", "max_epochs", "batch_size", "lr", "weight_decay", "label_smoothing",
                   "lora_lr_scale", "patience", "val_fraction", "reinit_last_block", "task",
                   "eval_fraction"});
  p.read(adapter, "adapter.", "mode", cfg.adapter.mode);
  p.read(adapter, "adapter.", "max_epochs", cfg.adapter.max_epochs);
  p.read(adapter, "adapter.", "batch_size", cfg.adapter.batch_size);
  p.read(adapter, "adapter.", "lr", cfg.adapter.lr);
  p.read(adapter, "adapter.", "weight_decay", cfg.adapter.weight_decay);
  p.read(adapter, "adapter.", "label_smoothing", cfg.adapter.label_smoothing);
  p.read(adapter, "adapter.", "lora_lr_scale", cfg.adapter.lora_lr_scale);
  p.read(adapter, "adapter.", "patience", cfg.adapter.patience);
  p.read(adapter, "adapter.", "val_fraction", cfg.adapter.val_fraction);
  p.read(adapter, "adapter.", "reinit_last_block", cfg.adapter.reinit_last_block);
  p.read(adapter, "adapter.", "task", cfg.adapter.task);
  p.read(adapter, "adapter.", "eval_fraction", cfg.adapter.eval_fraction);

  if (cfg.schema_version != 1)
    p.errors.push_back("schema_version: unsupported (expected 1)");
  try {
    cfg.train.mask_strategy = mask_strategy_from_name(strategy);
  } catch (const ArgumentError&) {
    p.errors.push_back("train.mask_strategy: must be channel, time or random");
  }
  try {
    adapt_mode_from_name(cfg.adapter.mode);
  } catch (const ArgumentError&) {
    p.errors.push_back("adapter.mode: must be raw, frozen-last, frozen-weighted, finetune or lora");
  }
  p.finish();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }
  return parse_experiment_config(j);
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = cfg.schema_version;
  j["seed"] = cfg.seed;
  j["paths"] = {{"dataset_dir", cfg.paths.dataset_dir},
                {"output_dir", cfg.paths.output_dir},
                {"models_dir", cfg.paths.models_dir},
                {"checkpoint", cfg.paths.checkpoint},
                {"adapter", cfg.paths.adapter},
                {"layer_weights", cfg.paths.layer_weights}};
  j["synthetic"] = {{"num_seqs", cfg.synthetic.num_seqs},
                    {"t_min", cfg.synthetic.t_min},
                    {"t_max", cfg.synthetic.t_max},
                    {"num_latent_gestures", cfg.synthetic.num_latent_gestures},
                    {"motifs_per_gesture", cfg.synthetic.motifs_per_gesture},
                    {"latent_dim", cfg.synthetic.latent_dim},
                    {"latent_sigma", cfg.synthetic.latent_sigma},
                    {"noise_sigma", cfg.synthetic.noise_sigma},
                    {"motif_scale", cfg.synthetic.motif_scale},
                    {"span_min", cfg.synthetic.span_min},
                    {"span_max", cfg.synthetic.span_max},
                    {"single_gesture_per_seq", cfg.synthetic.single_gesture_per_seq},
                    {"channel_dims", cfg.synthetic.dims},
                    {"frame_rate_hint", cfg.synthetic.frame_rate_hint}};
  j["encoder"] = {{"n_blocks", cfg.encoder.n_blocks},
                  {"model_dim", cfg.encoder.model_dim},
                  {"ffn_dim", cfg.encoder.ffn_dim},
                  {"n_heads", cfg.encoder.n_heads},
                  {"channel_proj_dim", cfg.encoder.channel_proj_dim},
                  {"k_per_channel", cfg.encoder.k_per_channel},
                  {"channel_dims", cfg.encoder.channel_dims},
                  {"use_positional_encoding", cfg.encoder.use_positional_encoding}};
  j["cluster"] = {{"k", cfg.cluster.k},
                  {"fraction", cfg.cluster.fraction},
                  {"max_iters", cfg.cluster.max_iters},
                  {"tol", cfg.cluster.tol},
                  {"restarts", cfg.cluster.restarts}};
  j["train"] = {{"total_steps", cfg.train.total_steps},
                {"peak_lr", cfg.train.peak_lr},
                {"warmup_fraction", cfg.train.warmup_fraction},
                {"frame_budget", cfg.train.frame_budget},
                {"adam_beta1", cfg.train.adam_beta1},
                {"adam_beta2", cfg.train.adam_beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"mask_strategy", mask_strategy_name(cfg.train.mask_strategy)},
                {"mask_ratio", cfg.train.mask_ratio},
                {"mask_span", cfg.train.mask_span},
                {"checkpoint_every", cfg.train.checkpoint_every},
                {"clip_grad_norm", cfg.train.clip_grad_norm},
                {"deterministic_timing", cfg.train.deterministic_timing}};
  j["adapter"] = {{"mode", cfg.adapter.mode},
                  {"max_epochs", cfg.adapter.max_epochs},
                  {"batch_size", cfg.adapter.batch_size},
                  {"lr", cfg.adapter.lr},
                  {"weight_decay", cfg.adapter.weight_decay},
                  {"label_smoothing", cfg.adapter.label_smoothing},
                  {"lora_lr_scale", cfg.adapter.lora_lr_scale},
                  {"patience", cfg.adapter.patience},
                  {"val_fraction", cfg.adapter.val_fraction},
                  {"reinit_last_block", cfg.adapter.reinit_last_block},
                  {"task", cfg.adapter.task},
                  {"eval_fraction", cfg.adapter.eval_fraction}};
  return j;
}

void write_resolved_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write resolved config: " + path.string());
  f << experiment_config_to_json(cfg).dump(2) << '\n';
}

std::uint64_t stage_seed(const ExperimentConfig& cfg, const std::string& stage) {
  return derive_seed(cfg.seed, "stage." + stage);
}

std::string render_table(const std::vector<std::string>& columns,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& c : columns) widths.push_back(c.size());
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size() && i < widths.size(); ++i)
      widths[i] = std::max(widths[i], row[i].size());
  std::ostringstream out;
  auto emit_row = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string& cell = i < row.size() ? row[i] : "";
      out << cell << std::string(widths[i] - cell.size() + 2, ' ');
    }
    out << '\n';
  };
  emit_row(columns);
  for (std::size_t i = 0; i < widths.size(); ++i)
    out << std::string(widths[i], '-') << "  ";
  out << '\n';
  for (const auto& row : rows) emit_row(row);
  return out.str();
}

void save_cluster_models(const std::array<ClusterModel, kNumChannels>& models,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (int c = 0; c < kNumChannels; ++c)
    write_cluster_model(models[c],
                        dir / (std::string(channel_name(static_cast<ChannelId>(c))) + ".kmc"));
}

std::array<ClusterModel, kNumChannels> load_cluster_models(const std::filesystem::path& dir) {
  std::array<ClusterModel, kNumChannels> models;
  for (int c = 0; c < kNumChannels; ++c) {
    models[c] = read_cluster_model(
        dir / (std::string(channel_name(static_cast<ChannelId>(c))) + ".kmc"));
    if (models[c].channel_id != static_cast<ChannelId>(c))
      throw SchemaError("cluster model file has the wrong channel id");
  }
  return models;
}

void save_adapter_bundle(const DownstreamResult& result, AdaptMode mode,
                         const std::vector<std::string>& task_names,
                         const std::filesystem::path& path) {
  nlohmann::json j;
  j["mode"] = adapt_mode_name(mode);
  j["tasks"] = task_names;
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& head : result.heads) {
    nlohmann::json h;
    h["input_dim"] = head.input_dim;
    h["n_classes"] = head.n_classes;
    h["label_smoothing"] = head.label_smoothing;
    h["bn_gamma"] = vec_to_json(head.bn_gamma);
    h["bn_beta"] = vec_to_json(head.bn_beta);
    h["bn_run_mean"] = vec_to_json(head.bn_run_mean);
    h["bn_run_var"] = vec_to_json(head.bn_run_var);
    h["w"] = mat_to_json(head.w);
    h["b"] = vec_to_json(head.b);
    heads.push_back(std::move(h));
  }
  j["heads"] = std::move(heads);
  j["layer_weights"] = vec_to_json(result.layer_weights.raw);
  nlohmann::json lora = nlohmann::json::array();
  if (mode == AdaptMode::Lora)
    for (const auto& e : result.lora.entries) {
      nlohmann::json entry;
      entry["name"] = e.name;
      entry["a"] = vec_to_json(e.a);
      entry["b"] = vec_to_json(e.b);
      lora.push_back(std::move(entry));
    }
  j["lora"] = std::move(lora);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write adapter bundle: " + path.string());
  f << j.dump() << '\n';
}

AdapterBundle load_adapter_bundle(const std::filesystem::path& path, const EncoderConfig& cfg) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open adapter bundle: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("adapter bundle parse error: " + std::string(e.what()));
  }
  AdapterBundle bundle;
  bundle.mode = adapt_mode_from_name(j.at("mode").get<std::string>());
  bundle.task_names = j.at("tasks").get<std::vector<std::string>>();
  for (const auto& h : j.at("heads")) {
    ClassifierHead head = ClassifierHead::init(h.at("input_dim").get<int>(),
                                               h.at("n_classes").get<int>(), 0,
                                               h.at("label_smoothing").get<double>());
    head.bn_gamma = vec_from_json(h.at("bn_gamma"));
    head.bn_beta = vec_from_json(h.at("bn_beta"));
    head.bn_run_mean = vec_from_json(h.at("bn_run_mean"));
    head.bn_run_var = vec_from_json(h.at("bn_run_var"));
    head.w = mat_from_json(h.at("w"));
    head.b = vec_from_json(h.at("b"));
    bundle.heads.push_back(std::move(head));
  }
  bundle.layer_weights.raw = vec_from_json(j.at("layer_weights"));
  if (bundle.mode == AdaptMode::Lora) {
    const auto names = adapted_linear_names(cfg);
    for (const auto& entry : j.at("lora")) {
      LoraEntry<float> e;
      e.name = entry.at("name").get<std::string>();
      e.a = vec_from_json(entry.at("a"));
      e.b = vec_from_json(entry.at("b"));
      bundle.lora.entries.push_back(std::move(e));
    }
    if (bundle.lora.entries.size() != names.size())
      throw SchemaError("adapter bundle: adapter entry count does not match the encoder");
    for (std::size_t i = 0; i < names.size(); ++i)
      if (bundle.lora.entries[i].name != names[i])
        throw SchemaError("adapter bundle: adapter entries out of order");
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Command runners
// ---------------------------------------------------------------------------

nlohmann::json run_gen_synthetic(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  SyntheticSpec spec = cfg.synthetic;
  spec.seed = stage_seed(cfg, "synthetic");
  Dataset ds = dataset_from_synthetic(gen_synthetic(spec));
  save_dataset(ds, cfg.paths.dataset_dir, cfg.adapter.task);

  nlohmann::json report;
  report["command"] = "gen-synthetic";
  report["num_sequences"] = ds.size();
  report["num_classes"] = ds.num_classes;
  report["dataset_dir"] = cfg.paths.dataset_dir;
  write_report(report, out_dir);
  return report;
}

nlohmann::json run_kmeans_fit(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.models_dir, "paths.models_dir");
  Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  for (auto& seq : ds.sequences) seq = interpolate_all(seq);

  std::array<ClusterModel, kNumChannels> models;
  nlohmann::json channels = nlohmann::json::array();
  for (int c = 0; c < kNumChannels; ++c) {
    const MatF data = collect_channel_frames(ds, static_cast<ChannelId>(c), cfg.cluster.fraction,
                                             stage_seed(cfg, "cluster.subsample"));
    KMeansOptions opts;
    opts.seed = derive_seed(stage_seed(cfg, "cluster"), "channel", c);
    opts.max_iters = cfg.cluster.max_iters;
    opts.tol = cfg.cluster.tol;
    opts.restarts = cfg.cluster.restarts;
    const KMeansFit fit = fit_kmeans(data, cfg.cluster.k, opts);
    models[c] = fit.model;
    models[c].channel_id = static_cast<ChannelId>(c);
    models[c].trained_on_fraction = static_cast<float>(cfg.cluster.fraction);
    channels.push_back({{"channel", channel_name(static_cast<ChannelId>(c))},
                        {"points", data.rows()},
                        {"k", cfg.cluster.k},
                        {"iterations", fit.iterations},
                        {"inertia", fit.inertia}});
  }
  save_cluster_models(models, cfg.paths.models_dir);

  nlohmann::json report;
  report["command"] = "kmeans-fit";
  report["channels"] = channels;
  report["models_dir"] = cfg.paths.models_dir;
  write_report(report, out_dir);
  return report;
}

nlohmann::json run_kmeans_assign(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.models_dir, "paths.models_dir");
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  const auto models = load_cluster_models(cfg.paths.models_dir);

  std::ofstream tsv(out_dir / "assignments.tsv", std::ios::trunc);
  tsv << "sequence\tframe\tface\tleft_hand\tright_hand\tbody_pose\n";
  std::int64_t frames = 0;
  for (std::size_t si = 0; si < ds.size(); ++si) {
    const FeatureSequence seq = interpolate_all(ds.sequences[si]);
    const ClusterAssignments a = assign_all(models, seq);
    for (std::size_t t = 0; t < a.frames(); ++t, ++frames) {
      tsv << ds.ids[si] << '\t' << t;
      for (int c = 0; c < kNumChannels; ++c) tsv << '\t' << a.labels[c][t];
      tsv << '\n';
    }
  }
  nlohmann::json report;
  report["command"] = "kmeans-assign";
  report["sequences"] = ds.size();
  report["frames"] = frames;
  write_report(report, out_dir);
  return report;
}

nlohmann::json run_pretrain(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.models_dir, "paths.models_dir");
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  const auto models = load_cluster_models(cfg.paths.models_dir);

  TrainConfig train = cfg.train;
  train.seed = stage_seed(cfg, "pretrain");
  const PretrainResult result = pretrain(ds, models, cfg.encoder, train, out_dir);

  nlohmann::json report;
  report["command"] = "pretrain";
  report["steps"] = result.state.step;
  report["parameters"] = param_count(cfg.encoder);
  if (!result.metrics.empty()) {
    const auto& last = result.metrics.back();
    report["final_loss"] = last.loss_total;
    report["final_acc_per_channel"] = last.acc_per_channel;
  }
  report["checkpoint"] = (out_dir / "checkpoint_final.shb").string();
  write_report(report, out_dir);
  return report;
}

namespace {

LayerWeights resolve_layer_weights(const ExperimentConfig& cfg, const EncoderConfig& enc) {
  const int n_layers = enc.n_blocks + 1;
  if (cfg.paths.layer_weights == "uniform") return LayerWeights::uniform(n_layers);
  if (cfg.paths.layer_weights == "last") return LayerWeights::one_hot(n_layers, enc.n_blocks);
  const AdapterBundle bundle = load_adapter_bundle(cfg.paths.layer_weights, enc);
  if (bundle.layer_weights.size() != n_layers)
    throw SchemaError("layer weights in adapter bundle do not match the encoder depth");
  return bundle.layer_weights;
}

} // namespace

nlohmann::json run_extract(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.checkpoint, "paths.checkpoint");
  const Checkpoint ck = load_checkpoint(cfg.paths.checkpoint);
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  const LayerWeights lw = resolve_layer_weights(cfg, ck.config);

  const ExportManifest manifest =
      export_features(ck.config, ck.params, lw, ds, out_dir / "features");
  nlohmann::json report;
  report["command"] = "extract";
  report["written"] = manifest.written.size();
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : manifest.failures) failures.push_back(f);
  report["failures"] = failures;
  report["feature_dim"] = ck.config.model_dim;
  write_report(report, out_dir);
  return report;
}

namespace {

struct SplitView {
  Dataset train;
  Dataset eval;
};

SplitView split_for_eval(const Dataset& ds, double eval_fraction) {
  const auto n = static_cast<std::int64_t>(ds.size());
  auto n_eval = static_cast<std::int64_t>(std::floor(eval_fraction * static_cast<double>(n)));
  n_eval = std::max<std::int64_t>(1, std::min(n_eval, n - 2));
  SplitView view;
  view.train = ds.slice(0, static_cast<std::size_t>(n - n_eval));
  view.eval = ds.slice(static_cast<std::size_t>(n - n_eval), static_cast<std::size_t>(n));
  return view;
}

nlohmann::json eval_bundle(const EncoderConfig& enc, const EncoderParams<float>& params,
                           const AdapterBundle& bundle, const Dataset& eval_set) {
  const LabeledView view = labeled_view(eval_set);
  const MatF logits = classify_dataset(
      enc, params, bundle.heads.at(0), view.data, bundle.mode,
      bundle.mode == AdaptMode::FrozenWeighted ? &bundle.layer_weights : nullptr,
      bundle.mode == AdaptMode::Lora ? &bundle.lora : nullptr);
  nlohmann::json out;
  out["recall@1"] = recall_at_k(logits, view.labels, 1);
  out["recall@5"] = recall_at_k(logits, view.labels, std::min(5, view.n_classes));
  out["recall@10"] = recall_at_k(logits, view.labels, std::min(10, view.n_classes));
  out["examples"] = view.data.size();
  return out;
}

} // namespace

nlohmann::json run_finetune(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.checkpoint, "paths.checkpoint");
  const Checkpoint ck = load_checkpoint(cfg.paths.checkpoint);
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  const SplitView split = split_for_eval(ds, cfg.adapter.eval_fraction);
  const LabeledView train_view = labeled_view(split.train);

  TaskDef task;
  task.name = cfg.adapter.task;
  task.dataset_index = 0;
  task.labels = train_view.labels;
  task.n_classes = train_view.n_classes;

  const DownstreamConfig opts = cfg.adapter.to_downstream(stage_seed(cfg, "adapt"));
  const DownstreamResult result =
      train_downstream(ck.config, ck.params, {&train_view.data}, {task}, opts);

  save_adapter_bundle(result, opts.mode, {task.name}, out_dir / "adapter.json");
  if (opts.mode == AdaptMode::Finetune)
    save_checkpoint(ck.config, result.encoder_params, out_dir / "encoder_finetuned.shb");

  AdapterBundle bundle;
  bundle.mode = opts.mode;
  bundle.heads = result.heads;
  bundle.layer_weights = result.layer_weights;
  bundle.lora = result.lora;
  const nlohmann::json eval = eval_bundle(
      ck.config,
      opts.mode == AdaptMode::Finetune ? result.encoder_params : ck.params, bundle, split.eval);

  nlohmann::json report;
  report["command"] = "finetune";
  report["mode"] = adapt_mode_name(opts.mode);
  report["best_epoch"] = result.best_epoch;
  report["val_history"] = result.val_history;
  report["eval"] = eval;
  report["adapter"] = (out_dir / "adapter.json").string();
  write_report(report, out_dir);
  return report;
}

nlohmann::json run_eval(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.checkpoint, "paths.checkpoint");
  require_path(cfg.paths.adapter, "paths.adapter");
  const Checkpoint ck = load_checkpoint(cfg.paths.checkpoint);
  const AdapterBundle bundle = load_adapter_bundle(cfg.paths.adapter, ck.config);
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);

  nlohmann::json report;
  report["command"] = "eval";
  report["mode"] = adapt_mode_name(bundle.mode);
  report["metrics"] = eval_bundle(ck.config, ck.params, bundle, ds);
  write_report(report, out_dir);

  std::vector<std::vector<std::string>> rows = {
      {adapt_mode_name(bundle.mode), std::to_string(report["metrics"]["recall@1"].get<double>()),
       std::to_string(report["metrics"]["recall@5"].get<double>()),
       std::to_string(report["metrics"]["recall@10"].get<double>())}};
  std::ofstream table(out_dir / "report.txt", std::ios::trunc);
  table << render_table({"mode", "recall@1", "recall@5", "recall@10"}, rows);
  return report;
}

nlohmann::json run_ablate(const ExperimentConfig& cfg) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  const SplitView split = split_for_eval(ds, cfg.adapter.eval_fraction);
  const LabeledView train_view = labeled_view(split.train);

  // Pseudo-label codebooks are shared across the grid: they do not depend
  // on masking.
  std::array<ClusterModel, kNumChannels> models;
  {
    Dataset prep = split.train;
    for (auto& seq : prep.sequences) seq = interpolate_all(seq);
    for (int c = 0; c < kNumChannels; ++c) {
      const MatF data = collect_channel_frames(prep, static_cast<ChannelId>(c),
                                               cfg.cluster.fraction,
                                               stage_seed(cfg, "cluster.subsample"));
      KMeansOptions kopts;
      kopts.seed = derive_seed(stage_seed(cfg, "cluster"), "channel", c);
      kopts.max_iters = cfg.cluster.max_iters;
      kopts.tol = cfg.cluster.tol;
      kopts.restarts = cfg.cluster.restarts;
      models[c] = fit_kmeans(data, cfg.cluster.k, kopts).model;
      models[c].channel_id = static_cast<ChannelId>(c);
    }
  }

  TaskDef task;
  task.name = cfg.adapter.task;
  task.dataset_index = 0;
  task.labels = train_view.labels;
  task.n_classes = train_view.n_classes;

  const std::array<MaskStrategy, 3> strategies = {MaskStrategy::Channel, MaskStrategy::Time,
                                                  MaskStrategy::Random};
  const std::array<AdaptMode, 3> modes = {AdaptMode::FrozenLast, AdaptMode::FrozenWeighted,
                                          AdaptMode::Finetune};

  nlohmann::json table = nlohmann::json::array();
  std::vector<std::vector<std::string>> text_rows;
  for (const auto strategy : strategies) {
    TrainConfig train = cfg.train;
    train.mask_strategy = strategy;
    train.seed = derive_seed(stage_seed(cfg, "ablate"), mask_strategy_name(strategy));
    const PretrainResult pre = pretrain(split.train, models, cfg.encoder, train);

    for (const auto mode : modes) {
      AdapterConfig acfg = cfg.adapter;
      acfg.mode = adapt_mode_name(mode);
      const DownstreamConfig opts = acfg.to_downstream(
          derive_seed(stage_seed(cfg, "ablate.adapt"), mask_strategy_name(strategy),
                      static_cast<std::uint64_t>(mode)));
      const DownstreamResult trained = train_downstream(
          cfg.encoder, pre.state.params, {&train_view.data}, {task}, opts);

      AdapterBundle bundle;
      bundle.mode = mode;
      bundle.heads = trained.heads;
      bundle.layer_weights = trained.layer_weights;
      bundle.lora = trained.lora;
      const nlohmann::json eval = eval_bundle(
          cfg.encoder,
          mode == AdaptMode::Finetune ? trained.encoder_params : pre.state.params, bundle,
          split.eval);

      nlohmann::json row;
      row["mask_strategy"] = mask_strategy_name(strategy);
      row["adapter_mode"] = adapt_mode_name(mode);
      row["recall@1"] = eval["recall@1"];
      row["recall@5"] = eval["recall@5"];
      row["recall@10"] = eval["recall@10"];
      table.push_back(row);
      text_rows.push_back({mask_strategy_name(strategy), adapt_mode_name(mode),
                           std::to_string(eval["recall@1"].get<double>()),
                           std::to_string(eval["recall@5"].get<double>()),
                           std::to_string(eval["recall@10"].get<double>())});
    }
  }

  nlohmann::json report;
  report["command"] = "ablate";
  report["rows"] = table;
  write_report(report, out_dir);
  std::ofstream text(out_dir / "report.txt", std::ios::trunc);
  text << render_table({"mask_strategy", "adapter_mode", "recall@1", "recall@5", "recall@10"},
                       text_rows);
  return report;
}

nlohmann::json run_dump_clusters(const ExperimentConfig& cfg, ChannelId channel,
                                 const std::vector<int>& cluster_ids, int n_per_cluster) {
  const auto out_dir = prepare_output_dir(cfg);
  require_path(cfg.paths.dataset_dir, "paths.dataset_dir");
  require_path(cfg.paths.models_dir, "paths.models_dir");
  const Dataset ds = load_dataset(cfg.paths.dataset_dir, cfg.adapter.task);
  const auto models = load_cluster_models(cfg.paths.models_dir);

  Dataset prep = ds;
  for (auto& seq : prep.sequences) seq = interpolate_all(seq);
  const auto rows = dump_cluster_samples(models[static_cast<int>(channel)], prep, cluster_ids,
                                         n_per_cluster, stage_seed(cfg, "dump"));

  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json r;
    r["cluster"] = row.cluster_id;
    r["empty"] = row.empty_warning;
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [seq_idx, frame] : row.cells)
      cells.push_back({{"sequence", ds.ids[static_cast<std::size_t>(seq_idx)]}, {"frame", frame}});
    r["cells"] = std::move(cells);
    manifest.push_back(std::move(r));
  }
  nlohmann::json report;
  report["command"] = "dump-clusters";
  report["channel"] = channel_name(channel);
  report["rows"] = manifest;
  write_report(report, out_dir);
  return report;
}

} // namespace signstream
