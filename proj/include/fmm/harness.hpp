#pragma once

// Experiment orchestration: config parsing, model acquisition, the clean /
// baseline / attack arms, sweeps, victim frame subsampling, transfer and
// cluster analyses, and report emission.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fmm/attack.hpp"
#include "fmm/common.hpp"
#include "fmm/dataset.hpp"
#include "fmm/metrics.hpp"
#include "fmm/surrogate.hpp"
#include "fmm/tmask.hpp"
#include "fmm/videotensor.hpp"

namespace fmm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Toy defaults

/// Low-contrast noisy clips: the setting the toy model is tuned for.
inline VideoDims toy_video_dims() {
  VideoDims d;
  d.background = 0.45;
  d.foreground = 0.55;
  d.noise = 0.03;
  return d;
}

inline ModelDims toy_model_dims() {
  ModelDims d;
  d.filters = 4;
  d.d_model = 12;
  d.vocab = 16;
  d.max_len = 6;
  d.pool_grid = 2;
  d.input_mean = 0.5;
  d.input_std = 0.05;
  return d;
}

// ---------------------------------------------------------------------------
// Config

struct DatasetSpec {
  DatasetKind kind = DatasetKind::MovingSquare;
  std::size_t n = 10;
  std::uint64_t seed = 100;
  VideoDims dims = toy_video_dims();
  std::vector<std::string> inputs;    // video paths; overrides the generator when nonempty
  std::vector<std::string> captions;  // optional ground truth, aligned with inputs
};

struct TrainSpec {
  std::size_t clips = 64;
  std::uint64_t data_seed = 1;
  std::size_t epochs = 1500;
  double lr = 1.0;
  double clip_norm = 5.0;
  double converged_loss = 0.1;  // final loss above this triggers a restart
  std::size_t restarts = 3;
};

struct ModelSpec {
  std::string path;   // load instead of training when set
  std::string cache;  // trained model is saved here and reused when present
  std::uint64_t seed = 0;
  ModelDims dims = toy_model_dims();
  double init_scale = 1.5;
  TrainSpec train;
};

struct SweepSpec {
  std::string axis;  // delta_max, sparsity, lambda2_lambda3, subsample_rate
  std::vector<json> values;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;  // empty = {seed}
  std::string output_dir = "out";
  std::string prompt = "what is happening ?";
  std::string tokens;  // token table path; default table when empty
  DatasetSpec dataset;
  ModelSpec model;
  AttackConfig attack = default_harness_attack();
  std::vector<MaskKind> mask_variants;  // extra attack arms with other masks
  std::vector<BaselineKind> baselines{BaselineKind::Random, BaselineKind::Black, BaselineKind::White};
  double random_magnitude = 8.0;
  std::vector<std::string> metrics{"clip_sim", "bleu", "rouge_l", "cider", "garbled"};
  double subsample_rate = 1.0;
  std::optional<SweepSpec> sweep;
  bool trace = false;
  GarbleParams garble;

  static AttackConfig default_harness_attack() {
    AttackConfig a;
    a.iters = 200;
    a.mask_kind = MaskKind::Full;
    return a;
  }

  std::vector<std::uint64_t> run_seeds() const { return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds; }

  void validate() const {
    attack.validate();
    dataset.dims.validate();
    model.dims.validate();
    if (!(subsample_rate > 0.0 && subsample_rate <= 1.0))
      throw Error("invalid_config", "subsample_rate must be in (0,1]");
    if (!(random_magnitude >= 0.0)) throw Error("invalid_config", "random_magnitude must be >= 0");
    if (dataset.inputs.empty() && dataset.n < 1) throw Error("invalid_config", "dataset needs at least one video");
    if (!dataset.captions.empty() && dataset.captions.size() != dataset.inputs.size())
      throw Error("invalid_config", "dataset captions must align with inputs");
    static const std::set<std::string> known{"clip_sim", "bleu", "rouge_l", "cider", "garbled"};
    for (const auto& m : metrics)
      if (!known.count(m)) throw Error("invalid_config", "unknown metric '" + m + "'");
    if (sweep) {
      static const std::set<std::string> axes{"delta_max", "sparsity", "lambda2_lambda3", "subsample_rate"};
      if (!axes.count(sweep->axis)) throw Error("invalid_config", "unknown sweep axis '" + sweep->axis + "'");
      if (sweep->values.empty()) throw Error("invalid_config", "sweep values must be nonempty");
    }
  }
};

namespace detail {

/// Reads an object, rejecting keys outside `allowed`.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where, std::set<std::string> allowed) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw Error("invalid_config", where_ + " must be an object");
    for (const auto& [k, v] : j.items())
      if (!allowed.count(k)) throw Error("invalid_config", "unknown key '" + k + "' in " + where_);
  }

  bool has(const std::string& k) const { return j_.contains(k); }
  const json& at(const std::string& k) const { return j_.at(k); }

  template <typename T>
  void get(const std::string& k, T& out) const {
    if (!j_.contains(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const json::exception&) {
      throw Error("invalid_config", "bad value for '" + k + "' in " + where_);
    }
  }

 private:
  const json& j_;
  std::string where_;
};

inline std::uint64_t get_seed(const json& v, const std::string& what) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
    throw Error("invalid_config", what + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

}  // namespace detail

inline VideoDims parse_video_dims(const json& j, VideoDims d = toy_video_dims()) {
  detail::ObjectReader r(j, "dataset.dims",
                         {"frames", "channels", "height", "width", "square", "burst", "speed", "jitter", "background",
                          "foreground", "noise"});
  r.get("frames", d.frames);
  r.get("channels", d.channels);
  r.get("height", d.height);
  r.get("width", d.width);
  r.get("square", d.square);
  r.get("burst", d.burst);
  r.get("speed", d.speed);
  r.get("jitter", d.jitter);
  r.get("background", d.background);
  r.get("foreground", d.foreground);
  r.get("noise", d.noise);
  return d;
}

inline json to_json_value(const VideoDims& d) {
  return {{"frames", d.frames}, {"channels", d.channels}, {"height", d.height},         {"width", d.width},
          {"square", d.square}, {"burst", d.burst},       {"speed", d.speed},           {"jitter", d.jitter},
          {"background", d.background}, {"foreground", d.foreground}, {"noise", d.noise}};
}

inline ModelDims parse_model_dims(const json& j, ModelDims d = toy_model_dims()) {
  detail::ObjectReader r(j, "model.dims",
                         {"kernel", "channels", "filters", "d_model", "vocab", "max_len", "pool_grid", "input_mean",
                          "input_std"});
  r.get("kernel", d.kernel);
  r.get("channels", d.channels);
  r.get("filters", d.filters);
  r.get("d_model", d.d_model);
  r.get("vocab", d.vocab);
  r.get("max_len", d.max_len);
  r.get("pool_grid", d.pool_grid);
  r.get("input_mean", d.input_mean);
  r.get("input_std", d.input_std);
  return d;
}

inline json to_json_value(const ModelDims& d) {
  return {{"kernel", d.kernel},       {"channels", d.channels},     {"filters", d.filters},
          {"d_model", d.d_model},     {"vocab", d.vocab},           {"max_len", d.max_len},
          {"pool_grid", d.pool_grid}, {"input_mean", d.input_mean}, {"input_std", d.input_std}};
}

inline AttackConfig parse_attack(const json& j, AttackConfig a) {
  detail::ObjectReader r(j, "attack",
                         {"delta_max", "alpha", "iters", "l1", "l2", "l3", "mask", "sparsity", "seq_start",
                          "init_radius", "flow_alpha", "flow_iterations"});
  r.get("delta_max", a.delta_max);
  r.get("alpha", a.step_alpha);
  r.get("iters", a.iters);
  r.get("l1", a.lambda1);
  r.get("l2", a.lambda2);
  r.get("l3", a.lambda3);
  if (r.has("mask")) a.mask_kind = mask_kind_from_string(r.at("mask").get<std::string>());
  r.get("sparsity", a.sparsity);
  r.get("seq_start", a.seq_start);
  r.get("init_radius", a.init_radius);
  r.get("flow_alpha", a.flow.alpha);
  r.get("flow_iterations", a.flow.iterations);
  return a;
}

inline json to_json_value(const AttackConfig& a) {
  return {{"delta_max", a.delta_max}, {"alpha", a.step_alpha},       {"iters", a.iters},
          {"l1", a.lambda1},          {"l2", a.lambda2},             {"l3", a.lambda3},
          {"mask", to_string(a.mask_kind)}, {"sparsity", a.sparsity}, {"seq_start", a.seq_start},
          {"init_radius", a.init_radius}, {"flow_alpha", a.flow.alpha}, {"flow_iterations", a.flow.iterations}};
}

inline ExperimentConfig parse_experiment_config(const json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "config",
                         {"seed", "seeds", "output_dir", "prompt", "tokens", "dataset", "model", "attack",
                          "mask_variants", "baselines", "random_magnitude", "metrics", "subsample_rate", "sweep",
                          "trace", "garble"});
  if (r.has("seed")) c.seed = detail::get_seed(r.at("seed"), "seed");
  if (r.has("seeds")) {
    if (!r.at("seeds").is_array()) throw Error("invalid_config", "seeds must be an array");
    for (const auto& s : r.at("seeds")) c.seeds.push_back(detail::get_seed(s, "seeds[]"));
  }
  r.get("output_dir", c.output_dir);
  r.get("prompt", c.prompt);
  r.get("tokens", c.tokens);
  if (r.has("dataset")) {
    detail::ObjectReader d(r.at("dataset"), "dataset", {"kind", "n", "seed", "dims", "inputs", "captions"});
    if (d.has("kind")) c.dataset.kind = dataset_kind_from_string(d.at("kind").get<std::string>());
    d.get("n", c.dataset.n);
    if (d.has("seed")) c.dataset.seed = detail::get_seed(d.at("seed"), "dataset.seed");
    if (d.has("dims")) c.dataset.dims = parse_video_dims(d.at("dims"));
    d.get("inputs", c.dataset.inputs);
    d.get("captions", c.dataset.captions);
  }
  if (r.has("model")) {
    detail::ObjectReader m(r.at("model"), "model", {"path", "cache", "seed", "dims", "init_scale", "train"});
    m.get("path", c.model.path);
    m.get("cache", c.model.cache);
    if (m.has("seed")) c.model.seed = detail::get_seed(m.at("seed"), "model.seed");
    if (m.has("dims")) c.model.dims = parse_model_dims(m.at("dims"));
    m.get("init_scale", c.model.init_scale);
    if (m.has("train")) {
      detail::ObjectReader t(m.at("train"), "model.train",
                             {"clips", "data_seed", "epochs", "lr", "clip_norm", "converged_loss", "restarts"});
      t.get("clips", c.model.train.clips);
      if (t.has("data_seed")) c.model.train.data_seed = detail::get_seed(t.at("data_seed"), "model.train.data_seed");
      t.get("epochs", c.model.train.epochs);
      t.get("lr", c.model.train.lr);
      t.get("clip_norm", c.model.train.clip_norm);
      t.get("converged_loss", c.model.train.converged_loss);
      t.get("restarts", c.model.train.restarts);
    }
  }
  if (r.has("attack")) c.attack = parse_attack(r.at("attack"), c.attack);
  if (r.has("mask_variants")) {
    c.mask_variants.clear();
    for (const auto& v : r.at("mask_variants")) c.mask_variants.push_back(mask_kind_from_string(v.get<std::string>()));
  }
  if (r.has("baselines")) {
    c.baselines.clear();
    for (const auto& v : r.at("baselines")) c.baselines.push_back(baseline_from_string(v.get<std::string>()));
  }
  r.get("random_magnitude", c.random_magnitude);
  r.get("metrics", c.metrics);
  r.get("subsample_rate", c.subsample_rate);
  if (r.has("sweep")) {
    detail::ObjectReader s(r.at("sweep"), "sweep", {"axis", "values"});
    SweepSpec sw;
    s.get("axis", sw.axis);
    if (!s.has("values") || !s.at("values").is_array()) throw Error("invalid_config", "sweep.values must be an array");
    for (const auto& v : s.at("values")) sw.values.push_back(v);
    c.sweep = sw;
  }
  r.get("trace", c.trace);
  if (r.has("garble")) {
    detail::ObjectReader g(r.at("garble"), "garble", {"min_run", "dominance", "min_length"});
    g.get("min_run", c.garble.min_run);
    g.get("dominance", c.garble.dominance);
    g.get("min_length", c.garble.min_length);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("missing_path", "cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("invalid_config", "config is not valid JSON: " + std::string(e.what()));
  }
  return parse_experiment_config(j);
}

/// Canonical echo of a parsed config.
inline json to_json_value(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["seeds"] = c.run_seeds();
  j["output_dir"] = c.output_dir;
  j["prompt"] = c.prompt;
  j["tokens"] = c.tokens;
  j["dataset"] = {{"kind", to_string(c.dataset.kind)}, {"n", c.dataset.n},
                  {"seed", c.dataset.seed},            {"dims", to_json_value(c.dataset.dims)},
                  {"inputs", c.dataset.inputs},        {"captions", c.dataset.captions}};
  j["model"] = {{"path", c.model.path},
                {"cache", c.model.cache},
                {"seed", c.model.seed},
                {"dims", to_json_value(c.model.dims)},
                {"init_scale", c.model.init_scale},
                {"train",
                 {{"clips", c.model.train.clips},
                  {"data_seed", c.model.train.data_seed},
                  {"epochs", c.model.train.epochs},
                  {"lr", c.model.train.lr},
                  {"clip_norm", c.model.train.clip_norm},
                  {"converged_loss", c.model.train.converged_loss},
                  {"restarts", c.model.train.restarts}}}};
  j["attack"] = to_json_value(c.attack);
  j["mask_variants"] = json::array();
  for (auto k : c.mask_variants) j["mask_variants"].push_back(to_string(k));
  j["baselines"] = json::array();
  for (auto b : c.baselines) j["baselines"].push_back(to_string(b));
  j["random_magnitude"] = c.random_magnitude;
  j["metrics"] = c.metrics;
  j["subsample_rate"] = c.subsample_rate;
  if (c.sweep) j["sweep"] = {{"axis", c.sweep->axis}, {"values", c.sweep->values}};
  j["trace"] = c.trace;
  j["garble"] = {{"min_run", c.garble.min_run}, {"dominance", c.garble.dominance}, {"min_length", c.garble.min_length}};
  return j;
}

// ---------------------------------------------------------------------------
// Models and data

struct TrainedModel {
  SurrogateModel model;
  std::uint64_t init_seed = 0;  // seed that produced the accepted run
  double final_loss = 0.0;
  std::size_t attempts = 0;
};

/// Trains the toy captioner from `spec.seed` on clips drawn with `vd`. A run whose final loss stays
/// above `converged_loss` is restarted from a derived seed, at most
/// `restarts` times. Parameters are rounded to f32 so a saved copy reloads
/// bit-identically.
inline TrainedModel train_model(const ModelSpec& spec, const VideoDims& vd, const TokenTable& table,
                                const TokenSeq& prompt) {
  const auto clips = gen_synthetic_dataset(DatasetKind::MovingSquare, spec.train.clips, vd, spec.train.data_seed, table);
  const auto data = to_training_set(clips);
  TrainOptions opt;
  opt.epochs = spec.train.epochs;
  opt.lr = spec.train.lr;
  opt.clip_norm = spec.train.clip_norm;
  TrainedModel best;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t attempt = 0; attempt <= spec.train.restarts; ++attempt) {
    const std::uint64_t seed = attempt == 0 ? spec.seed : mix_seed(spec.seed, attempt);
    opt.seed = seed;
    TrainResult tr = train_toy(init_model(seed, spec.dims, spec.init_scale), data, prompt, opt);
    const double final_loss = caption_loss(tr.model, data, prompt, nullptr);
    if (final_loss < best_loss) {
      best_loss = final_loss;
      best = {quantize_to_f32(std::move(tr.model)), seed, final_loss, attempt + 1};
    }
    if (final_loss <= spec.train.converged_loss) break;
  }
  best.attempts = std::min<std::size_t>(best.attempts, spec.train.restarts + 1);
  return best;
}

inline SurrogateModel obtain_model(const ModelSpec& spec, const VideoDims& vd, const TokenTable& table,
                                   const TokenSeq& prompt) {
  if (!spec.path.empty()) return load_model(spec.path);
  if (!spec.cache.empty() && std::filesystem::exists(spec.cache)) return load_model(spec.cache);
  SurrogateModel m = train_model(spec, vd, table, prompt).model;
  if (!spec.cache.empty()) {
    const auto parent = std::filesystem::path(spec.cache).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    save_model(m, spec.cache);
  }
  return m;
}

struct LabeledVideo {
  std::string id;
  Video video;
  std::optional<TokenSeq> caption;  // ground truth when the dataset has one
};

inline TokenTable load_table(const ExperimentConfig& c) {
  return c.tokens.empty() ? default_token_table() : TokenTable::load(c.tokens);
}

/// The videos for one seed. Synthetic data is regenerated per seed.
inline std::vector<LabeledVideo> load_dataset(const DatasetSpec& spec, std::uint64_t seed, const TokenTable& table) {
  std::vector<LabeledVideo> out;
  if (!spec.inputs.empty()) {
    for (std::size_t i = 0; i < spec.inputs.size(); ++i) {
      if (!std::filesystem::exists(spec.inputs[i])) throw Error("missing_path", "no such video " + spec.inputs[i]);
      LabeledVideo v{"v" + std::to_string(i), load_video(spec.inputs[i]), std::nullopt};
      if (!spec.captions.empty()) v.caption = table.encode(spec.captions[i]);
      out.push_back(std::move(v));
    }
    return out;
  }
  const auto clips = gen_synthetic_dataset(spec.kind, spec.n, spec.dims, mix_seed(spec.seed, seed), table);
  for (std::size_t i = 0; i < clips.size(); ++i) out.push_back({"v" + std::to_string(i), clips[i].video, clips[i].caption});
  return out;
}

// ---------------------------------------------------------------------------
// Victim frame subsampling

/// Keeps round(rate * T) frames chosen uniformly without replacement, in
/// their original order.
inline Video subsample_victim(const Video& x, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw Error("invalid_rate", "subsample rate must be in (0,1]");
  const std::size_t frames = x.frames();
  const auto keep = static_cast<std::size_t>(std::llround(rate * static_cast<double>(frames)));
  if (keep < 1) throw Error("empty_subsample", "subsample keeps no frames");
  if (keep == frames) return x;
  std::vector<std::size_t> idx(frames);
  for (std::size_t i = 0; i < frames; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.index(frames - i)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  Shape s = x.shape();
  s.frames = keep;
  Tensor out(s);
  for (std::size_t k = 0; k < keep; ++k) {
    const auto src = x.pixels().frame(idx[k]);
    auto dst = out.frame(k);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return Video(std::move(out));
}

/// Random-sign noise of exactly `magnitude` 8-bit units on the masked frames
/// (before clamping): the equal-budget control for an attack.
inline Video random_control(const Video& x, const TemporalMask& mask, double magnitude, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = magnitude / 255.0;
  Tensor out = x.pixels();
  for (std::size_t t = 0; t < out.shape().frames; ++t) {
    if (!mask[t]) continue;
    for (double& v : out.frame(t)) v = std::clamp(v + (rng.uniform() < 0.5 ? -bound : bound), 0.0, 1.0);
  }
  return Video(std::move(out));
}

// ---------------------------------------------------------------------------
// Reports

struct RunKey {
  std::uint64_t seed = 0;
  std::string video;
  std::string arm;
};

struct RunError {
  std::string run_id;
  std::string code;
  std::string message;
};

struct TraceRecord {
  std::string run_id;
  std::vector<TraceRow> rows;
};

struct RunDetail {
  std::string output;
  std::string reference;
  std::string ground_truth;  // empty when the dataset has none
  double gt_rouge_l = 0.0;
};

struct Report {
  json config;
  std::vector<MetricRow> rows;
  std::vector<RunKey> keys;  // aligned with rows
  std::vector<RunDetail> details;  // aligned with rows
  std::vector<RunError> errors;
  std::vector<TraceRecord> traces;
  std::optional<std::pair<ClusterReport, ClusterReport>> cluster;  // video-space, LLM-space
  std::vector<std::string> annotations;
  std::vector<std::pair<std::string, double>> wall_clock;  // run id, seconds
  json extra = json::object();
};

inline const std::vector<std::string>& aggregate_fields() {
  static const std::vector<std::string> f{"clip_sim", "bleu", "rouge_l", "cider", "garble_rate", "sparsity", "delta_bar"};
  return f;
}

inline double row_field(const MetricRow& r, const std::string& f) {
  if (f == "clip_sim") return r.clip_sim;
  if (f == "bleu") return r.bleu;
  if (f == "rouge_l") return r.rouge_l;
  if (f == "cider") return r.cider;
  if (f == "garble_rate" || f == "garbled") return r.garbled ? 1.0 : 0.0;
  if (f == "sparsity") return r.sparsity;
  if (f == "delta_bar") return r.delta_bar;
  throw Error("invalid_argument", "unknown metric field '" + f + "'");
}

/// Mean of a field over the rows of one arm, optionally one seed only.
inline double arm_mean(const Report& r, const std::string& arm, const std::string& field,
                       std::optional<std::uint64_t> seed = std::nullopt) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    if (r.keys[i].arm != arm || (seed && r.keys[i].seed != *seed)) continue;
    sum += row_field(r.rows[i], field);
    ++n;
  }
  if (n == 0) throw Error("empty_arm", "no rows for arm '" + arm + "'");
  return sum / static_cast<double>(n);
}

inline std::vector<std::string> arms_of(const Report& r) {
  std::vector<std::string> arms;
  for (const auto& k : r.keys)
    if (std::find(arms.begin(), arms.end(), k.arm) == arms.end()) arms.push_back(k.arm);
  return arms;
}

inline json aggregates(const Report& r) {
  json out = json::object();
  for (const auto& arm : arms_of(r)) {
    json a = json::object();
    for (const auto& f : aggregate_fields()) a[f] = arm_mean(r, arm, f);
    out[arm] = a;
  }
  return out;
}

inline json to_json_value(const Report& r) {
  json j;
  j["config"] = r.config;
  j["rows"] = json::array();
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    json row = r.rows[i];
    row["seed"] = r.keys[i].seed;
    row["video"] = r.keys[i].video;
    row["arm"] = r.keys[i].arm;
    row["output"] = r.details[i].output;
    row["reference"] = r.details[i].reference;
    if (!r.details[i].ground_truth.empty()) {
      row["ground_truth"] = r.details[i].ground_truth;
      row["gt_rouge_l"] = r.details[i].gt_rouge_l;
    }
    j["rows"].push_back(row);
  }
  j["aggregates"] = aggregates(r);
  j["errors"] = json::array();
  for (const auto& e : r.errors) j["errors"].push_back({{"run_id", e.run_id}, {"code", e.code}, {"message", e.message}});
  if (r.cluster)
    j["cluster"] = {{"video_space_attack", r.cluster->first}, {"llm_space_attack", r.cluster->second}};
  j["annotations"] = r.annotations;
  for (const auto& [k, v] : r.extra.items()) j[k] = v;
  return j;
}

/// Writes report.json, rows.csv, trace.csv (when traces exist) and
/// timing.csv. Wall-clock times live only in timing.csv so the other files
/// are reproducible byte for byte.
inline void write_report(const Report& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto open = [&](const char* name) {
    std::ofstream os(dir / name, std::ios::trunc | std::ios::binary);
    if (!os) throw Error("unwritable_path", "cannot write " + (dir / name).string());
    return os;
  };
  {
    auto os = open("report.json");
    os << to_json_value(r).dump(2) << '\n';
  }
  {
    auto os = open("rows.csv");
    write_csv(os, r.rows);
  }
  if (!r.traces.empty()) {
    auto os = open("trace.csv");
    os << "run_id,iter,l21,loss_video,loss_llm,total\n";
    for (const auto& t : r.traces)
      for (std::size_t i = 0; i < t.rows.size(); ++i)
        os << detail::csv_field(t.run_id) << ',' << i << ',' << detail::fmt_real(t.rows[i].l21) << ','
           << detail::fmt_real(t.rows[i].loss_video) << ',' << detail::fmt_real(t.rows[i].loss_llm) << ','
           << detail::fmt_real(t.rows[i].total) << '\n';
  }
  {
    auto os = open("timing.csv");
    os << "run_id,seconds\n";
    for (const auto& [id, s] : r.wall_clock) os << detail::csv_field(id) << ',' << detail::fmt_real(s) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Experiment

namespace detail {

inline std::string run_id(std::uint64_t seed, const std::string& video, const std::string& arm) {
  return "s" + std::to_string(seed) + "/" + video + "/" + arm;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// One arm's victim output for one video, before corpus-level metrics.
struct ArmOutput {
  std::string arm;
  TokenSeq output;
  double sparsity = 0.0;
  double delta_bar = 0.0;
  double seconds = 0.0;
};

struct VideoOutputs {
  std::string video;
  TokenSeq clean;
  std::optional<TokenSeq> ground_truth;
  std::vector<ArmOutput> arms;
};

inline std::uint64_t video_seed(std::uint64_t seed, std::size_t video, std::uint64_t tag) {
  return mix_seed(mix_seed(seed, video), tag);
}

inline constexpr std::uint64_t kTagAttack = 0x61747461;
inline constexpr std::uint64_t kTagBaseline = 0x62617365;
inline constexpr std::uint64_t kTagSubsample = 0x73756273;
inline constexpr std::uint64_t kTagControl = 0x636f6e74;

/// Fills rows for every video and arm. Metrics compare each arm's output to
/// the clean output of the same victim; CIDEr document frequencies come from
/// the clean outputs of the seed's videos.
inline void emit_rows(Report& rep, const SurrogateModel& victim, const TokenTable& table, std::uint64_t seed,
                      const std::vector<VideoOutputs>& outs, const GarbleParams& garble) {
  if (outs.empty()) return;
  std::vector<std::string> arms;
  for (const auto& vo : outs)
    for (const auto& a : vo.arms)
      if (std::find(arms.begin(), arms.end(), a.arm) == arms.end()) arms.push_back(a.arm);
  std::map<std::string, std::map<std::string, double>> cider_by_arm;  // arm -> video -> score
  for (const auto& arm : arms) {
    std::vector<TokenSeq> cands;
    std::vector<std::vector<TokenSeq>> refs;
    std::vector<std::string> ids;
    for (const auto& vo : outs)
      for (const auto& a : vo.arms)
        if (a.arm == arm) {
          cands.push_back(a.output);
          refs.push_back({vo.clean});
          ids.push_back(vo.video);
        }
    const auto scores = cider_items(cands, refs);
    for (std::size_t i = 0; i < ids.size(); ++i) cider_by_arm[arm][ids[i]] = scores[i];
  }
  for (const auto& vo : outs) {
    for (const auto& a : vo.arms) {
      MetricRow row;
      row.run_id = run_id(seed, vo.video, a.arm);
      row.clip_sim = clip_sim(victim, a.output, vo.clean);
      row.bleu = bleu(a.output, vo.clean);
      row.rouge_l = rouge_l(a.output, vo.clean);
      row.cider = cider_by_arm[a.arm][vo.video];
      row.garbled = is_garbled(a.output, garble);
      row.sparsity = a.sparsity;
      row.delta_bar = a.delta_bar;
      RunDetail d{table.render(a.output), table.render(vo.clean), "", 0.0};
      if (vo.ground_truth) {
        d.ground_truth = table.render(*vo.ground_truth);
        d.gt_rouge_l = rouge_l(a.output, *vo.ground_truth);
      }
      rep.rows.push_back(row);
      rep.keys.push_back({seed, vo.video, a.arm});
      rep.details.push_back(std::move(d));
      rep.wall_clock.emplace_back(row.run_id, a.seconds);
    }
  }
}

inline TokenSeq victim_output(const SurrogateModel& victim, const TokenSeq& prompt, const Video& x, double rate,
                              std::uint64_t subsample_seed) {
  const Video seen = subsample_victim(x, rate, subsample_seed);
  return generate(victim, prompt, encode_video(victim, seen)).first;
}

inline std::string attack_arm_name(MaskKind k, MaskKind primary) {
  return k == primary ? "fmm" : "fmm_" + to_string(k);
}

}  // namespace detail

/// Clean pass, configured baselines and the attack arms for every video and
/// seed. A failing video is recorded in `errors` and skipped.
inline Report run_experiment(const ExperimentConfig& cfg, const SurrogateModel& model) {
  cfg.validate();
  const TokenTable table = load_table(cfg);
  const TokenSeq prompt = table.encode(cfg.prompt);
  Report rep;
  rep.config = to_json_value(cfg);
  std::vector<MaskKind> masks{cfg.attack.mask_kind};
  for (auto k : cfg.mask_variants)
    if (std::find(masks.begin(), masks.end(), k) == masks.end()) masks.push_back(k);

  for (const std::uint64_t seed : cfg.run_seeds()) {
    const auto videos = load_dataset(cfg.dataset, seed, table);
    std::vector<detail::VideoOutputs> outs;
    for (std::size_t vi = 0; vi < videos.size(); ++vi) {
      const auto& lv = videos[vi];
      try {
        const std::uint64_t sub_seed = detail::video_seed(seed, vi, detail::kTagSubsample);
        const auto victim = [&](const Video& x) {
          return detail::victim_output(model, prompt, x, cfg.subsample_rate, sub_seed);
        };
        detail::VideoOutputs vo;
        vo.video = lv.id;
        vo.ground_truth = lv.caption;
        auto t0 = detail::Clock::now();
        vo.clean = victim(lv.video);
        vo.arms.push_back({"clean", vo.clean, 1.0, 0.0, detail::seconds_since(t0)});
        for (const auto b : cfg.baselines) {
          t0 = detail::Clock::now();
          const Video xb = make_baseline(b, lv.video, detail::video_seed(seed, vi, detail::kTagBaseline),
                                         cfg.random_magnitude);
          const TemporalMask all = TemporalMask::full(lv.video.frames());
          vo.arms.push_back({to_string(b), victim(xb), 0.0, mean_abs_perturbation(lv.video, xb, all),
                             detail::seconds_since(t0)});
        }
        for (const auto k : masks) {
          t0 = detail::Clock::now();
          AttackConfig ac = cfg.attack;
          ac.mask_kind = k;
          ac.seed = detail::video_seed(seed, vi, detail::kTagAttack);
          const AttackResult res = fmm_attack(model, lv.video, prompt, ac);
          const std::string arm = detail::attack_arm_name(k, cfg.attack.mask_kind);
          vo.arms.push_back({arm, victim(res.adversarial), sparsity_of(res.mask), res.delta_bar,
                             detail::seconds_since(t0)});
          if (cfg.trace) rep.traces.push_back({detail::run_id(seed, lv.id, arm), res.trace});
        }
        outs.push_back(std::move(vo));
      } catch (const Error& e) {
        rep.errors.push_back({detail::run_id(seed, lv.id, "*"), e.code(), e.what()});
      }
    }
    detail::emit_rows(rep, model, table, seed, outs, cfg.garble);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Sweeps

inline constexpr double kNotableDeltaMax = 32.0;

/// Returns a copy of `cfg` with the sweep axis set to `value`.
inline ExperimentConfig apply_sweep_value(ExperimentConfig cfg, const std::string& axis, const json& value) {
  try {
    if (axis == "delta_max") {
      cfg.attack.delta_max = value.get<double>();
    } else if (axis == "sparsity") {
      cfg.attack.sparsity = value.get<double>();
    } else if (axis == "lambda2_lambda3") {
      if (!value.is_array() || value.size() != 2) throw Error("invalid_config", "lambda sweep values are [l2, l3] pairs");
      cfg.attack.lambda2 = value[0].get<double>();
      cfg.attack.lambda3 = value[1].get<double>();
    } else if (axis == "subsample_rate") {
      cfg.subsample_rate = value.get<double>();
    } else {
      throw Error("invalid_config", "unknown sweep axis '" + axis + "'");
    }
  } catch (const json::exception&) {
    throw Error("invalid_config", "bad sweep value " + value.dump() + " for axis " + axis);
  }
  cfg.sweep.reset();
  cfg.validate();
  return cfg;
}

inline std::string sweep_label(const std::string& axis, const json& value) {
  std::string v = value.is_array() ? value[0].dump() + "_" + value[1].dump() : value.dump();
  return axis + "=" + v;
}

struct SweepPoint {
  json value;
  Report report;
};

/// One report per value; seeds are identical across values.
inline std::vector<SweepPoint> sweep(const ExperimentConfig& cfg, const std::string& axis,
                                     const std::vector<json>& values, const SurrogateModel& model) {
  if (values.empty()) throw Error("invalid_config", "sweep values must be nonempty");
  std::vector<SweepPoint> out;
  for (const auto& v : values) {
    const ExperimentConfig c = apply_sweep_value(cfg, axis, v);
    Report r = run_experiment(c, model);
    r.extra["sweep"] = {{"axis", axis}, {"value", v}};
    if (axis == "delta_max" && v.get<double>() == kNotableDeltaMax)
      r.annotations.push_back("delta_max=32: best trade-off between attack strength and imperceptibility");
    out.push_back({v, std::move(r)});
  }
  return out;
}

/// One line per (value, arm) with the aggregate means, garble rate included.
inline void write_sweep_summary(const std::vector<SweepPoint>& pts, const std::string& axis, std::ostream& os) {
  os << "axis,value,arm";
  for (const auto& f : aggregate_fields()) os << ',' << f;
  os << '\n';
  for (const auto& p : pts) {
    const std::string v = p.value.is_array() ? p.value[0].dump() + " " + p.value[1].dump() : p.value.dump();
    for (const auto& arm : arms_of(p.report)) {
      os << axis << ',' << detail::csv_field(v) << ',' << arm;
      for (const auto& f : aggregate_fields()) os << ',' << detail::fmt_real(arm_mean(p.report, arm, f));
      os << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Transfer

/// Crafts attacks on model_a and replays them on model_b. Arms: "whitebox"
/// (the adversarial video on model_a), "transfer" (the same video on model_b)
/// and "transfer_random" (random-sign noise at the attack's delta_bar on the
/// attack's frames, on model_b).
inline Report transfer_eval(const SurrogateModel& model_a, const SurrogateModel& model_b, const ExperimentConfig& cfg) {
  cfg.validate();
  const TokenTable table = load_table(cfg);
  const TokenSeq prompt = table.encode(cfg.prompt);
  Report rep;
  rep.config = to_json_value(cfg);
  for (const std::uint64_t seed : cfg.run_seeds()) {
    const auto videos = load_dataset(cfg.dataset, seed, table);
    std::vector<detail::VideoOutputs> outs_a, outs_b;
    for (std::size_t vi = 0; vi < videos.size(); ++vi) {
      const auto& lv = videos[vi];
      try {
        const std::uint64_t sub_seed = detail::video_seed(seed, vi, detail::kTagSubsample);
        const auto t0 = detail::Clock::now();
        AttackConfig ac = cfg.attack;
        ac.seed = detail::video_seed(seed, vi, detail::kTagAttack);
        const AttackResult res = fmm_attack(model_a, lv.video, prompt, ac);
        const double secs = detail::seconds_since(t0);
        const Video control = random_control(lv.video, res.mask, res.delta_bar,
                                             detail::video_seed(seed, vi, detail::kTagControl));
        const auto on = [&](const SurrogateModel& m, const Video& x) {
          return detail::victim_output(m, prompt, x, cfg.subsample_rate, sub_seed);
        };
        const double spa = sparsity_of(res.mask);
        detail::VideoOutputs va{lv.id, on(model_a, lv.video), lv.caption, {}};
        va.arms.push_back({"whitebox", on(model_a, res.adversarial), spa, res.delta_bar, secs});
        detail::VideoOutputs vb{lv.id, on(model_b, lv.video), lv.caption, {}};
        vb.arms.push_back({"transfer", on(model_b, res.adversarial), spa, res.delta_bar, 0.0});
        vb.arms.push_back({"transfer_random", on(model_b, control), spa,
                           mean_abs_perturbation(lv.video, control, res.mask), 0.0});
        outs_a.push_back(std::move(va));
        outs_b.push_back(std::move(vb));
      } catch (const Error& e) {
        rep.errors.push_back({detail::run_id(seed, lv.id, "*"), e.code(), e.what()});
      }
    }
    detail::emit_rows(rep, model_a, table, seed, outs_a, cfg.garble);
    detail::emit_rows(rep, model_b, table, seed, outs_b, cfg.garble);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Cluster analysis

/// Separation of clean vs adversarial features and hidden states for one
/// attack variant over a set of videos.
inline ClusterReport cluster_report(const SurrogateModel& model, const std::vector<LabeledVideo>& videos,
                                    const TokenSeq& prompt, const AttackConfig& ac, std::uint64_t seed) {
  if (videos.size() < 2) throw Error("too_few_videos", "cluster analysis needs at least 2 videos");
  std::vector<std::vector<double>> fc, fa, hc, ha;
  for (std::size_t vi = 0; vi < videos.size(); ++vi) {
    AttackConfig c = ac;
    c.seed = detail::video_seed(seed, vi, detail::kTagAttack);
    const AttackResult res = fmm_attack(model, videos[vi].video, prompt, c);
    fc.push_back(res.clean_feature.values);
    fa.push_back(res.adv_feature.values);
    hc.push_back(res.clean_hidden.values);
    ha.push_back(res.adv_hidden.values);
  }
  return {cluster_separation(fc, fa), cluster_separation(hc, ha)};
}

/// The video-space variant keeps lambda2 and drops lambda3; the LLM-space
/// variant does the opposite. Weights that are zero in `cfg.attack` fall back
/// to 1 and 3.
inline std::pair<ClusterReport, ClusterReport> cluster_analysis(const SurrogateModel& model,
                                                                const std::vector<LabeledVideo>& videos,
                                                                const ExperimentConfig& cfg, std::uint64_t seed) {
  const TokenSeq prompt = load_table(cfg).encode(cfg.prompt);
  AttackConfig video_space = cfg.attack, llm_space = cfg.attack;
  video_space.lambda2 = cfg.attack.lambda2 > 0.0 ? cfg.attack.lambda2 : 1.0;
  video_space.lambda3 = 0.0;
  llm_space.lambda2 = 0.0;
  llm_space.lambda3 = cfg.attack.lambda3 > 0.0 ? cfg.attack.lambda3 : 3.0;
  return {cluster_report(model, videos, prompt, video_space, seed),
          cluster_report(model, videos, prompt, llm_space, seed)};
}

/// Cluster analysis per seed; the report's cluster entry holds the first
/// seed's result and `extra["cluster_by_seed"]` holds all of them.
inline Report run_cluster(const ExperimentConfig& cfg, const SurrogateModel& model) {
  cfg.validate();
  const TokenTable table = load_table(cfg);
  Report rep;
  rep.config = to_json_value(cfg);
  json per_seed = json::array();
  for (const std::uint64_t seed : cfg.run_seeds()) {
    const auto t0 = detail::Clock::now();
    const auto videos = load_dataset(cfg.dataset, seed, table);
    const auto pair = cluster_analysis(model, videos, cfg, seed);
    if (!rep.cluster) rep.cluster = pair;
    per_seed.push_back({{"seed", seed}, {"video_space_attack", pair.first}, {"llm_space_attack", pair.second}});
    rep.wall_clock.emplace_back("s" + std::to_string(seed) + "/cluster", detail::seconds_since(t0));
  }
  rep.extra["cluster_by_seed"] = per_seed;
  return rep;
}

// ---------------------------------------------------------------------------
// Targeted evaluation

struct TargetedOutcome {
  std::string video;
  std::string target;
  double sim_to_target = 0.0;  // clip_sim(adversarial output, target's clean output)
  double sim_to_source = 0.0;  // clip_sim(adversarial output, source's clean output)
  bool closer_to_target = false;
};

/// Pairs each video with the next one whose clean output differs and runs the
/// targeted attack toward it.
inline std::vector<TargetedOutcome> targeted_eval(const SurrogateModel& model, const std::vector<LabeledVideo>& videos,
                                                  const TokenSeq& prompt, AttackConfig ac, std::uint64_t seed) {
  ac.targeted = true;
  std::vector<TokenSeq> clean;
  for (const auto& v : videos) clean.push_back(generate(model, prompt, encode_video(model, v.video)).first);
  std::vector<TargetedOutcome> out;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    std::size_t j = (i + 1) % videos.size();
    while (j != i && clean[j] == clean[i]) j = (j + 1) % videos.size();
    if (j == i) continue;
    ac.seed = detail::video_seed(seed, i, detail::kTagAttack);
    const AttackResult res = fmm_attack(model, videos[i].video, prompt, ac, videos[j].video);
    TargetedOutcome o{videos[i].id, videos[j].id, clip_sim(model, res.adv_output, clean[j]),
                      clip_sim(model, res.adv_output, clean[i]), false};
    o.closer_to_target = o.sim_to_target > o.sim_to_source;
    out.push_back(o);
  }
  return out;
}

}  // namespace fmm
