// fmm: command-line front end for the attack lab.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fmm/attack.hpp"
#include "fmm/dataset.hpp"
#include "fmm/harness.hpp"
#include "fmm/judge.hpp"
#include "fmm/metrics.hpp"
#include "fmm/optflow.hpp"
#include "fmm/surrogate.hpp"
#include "fmm/tmask.hpp"
#include "fmm/videotensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fmm;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("unwritable_path", "cannot write " + path.string());
  os << text;
}

void emit_json(const json& j, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << j.dump(2) << '\n';
  } else {
    write_text(out, j.dump(2) + "\n");
  }
}

/// Prompt given as words from the table, or as numeric token ids.
TokenSeq parse_prompt(const std::string& text, const TokenTable& table) {
  std::istringstream is(text);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  const bool numeric = !words.empty() && std::all_of(words.begin(), words.end(), [](const std::string& w) {
    return std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); });
  });
  if (!numeric) return table.encode(text);
  TokenSeq seq;
  for (const auto& w : words) {
    const auto id = std::stoul(w);
    if (id >= table.size()) throw Error("unknown_token", "token id " + w + " is outside the table");
    seq.tokens.push_back(static_cast<Token>(id));
  }
  return seq;
}

TokenTable table_from(const std::string& path) { return path.empty() ? default_token_table() : TokenTable::load(path); }

void write_trace_csv(const fs::path& path, const std::string& run_id, const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  os << "run_id,iter,l21,loss_video,loss_llm,total\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    os << run_id << ',' << i << ',' << detail::fmt_real(trace[i].l21) << ',' << detail::fmt_real(trace[i].loss_video)
       << ',' << detail::fmt_real(trace[i].loss_llm) << ',' << detail::fmt_real(trace[i].total) << '\n';
  write_text(path, os.str());
}

/// Experiment flags shared by bench, sweep, transfer and cluster: a JSON
/// config plus overrides applied on top of it.
struct ExperimentFlags {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_seeds;
  std::optional<std::size_t> videos;
  std::optional<std::size_t> iters;
  std::optional<double> delta_max;
  std::optional<double> sparsity;
  std::optional<std::string> mask;
  std::optional<double> subsample_rate;
  std::string model;
  std::string model_cache;
  bool trace = false;

  void add(CLI::App* app) {
    app->add_option("--config", config, "experiment config (JSON)");
    app->add_option("--out-dir", out_dir, "output directory");
    app->add_option("--seed", seed, "global seed");
    app->add_option("--seeds", n_seeds, "run seeds 0..N-1");
    app->add_option("--videos", videos, "synthetic videos per seed");
    app->add_option("--iters", iters, "attack iterations");
    app->add_option("--delta-max", delta_max, "perturbation budget, 8-bit units");
    app->add_option("--sparsity", sparsity, "temporal-mask sparsity");
    app->add_option("--mask", mask, "flow, seq, random or full");
    app->add_option("--subsample-rate", subsample_rate, "victim frame sampling rate");
    app->add_option("--model", model, "model file (skips training)");
    app->add_option("--model-cache", model_cache, "trained model is stored and reused here");
    app->add_flag("--trace", trace, "write trace.csv");
  }

  ExperimentConfig resolve() const {
    json j = json::object();
    if (!config.empty()) {
      std::ifstream is(config);
      if (!is) throw Error("missing_path", "cannot open config " + config);
      try {
        is >> j;
      } catch (const json::exception& e) {
        throw Error("invalid_config", std::string("config is not valid JSON: ") + e.what());
      }
    }
    auto& attack = j["attack"];
    if (attack.is_null()) attack = json::object();
    if (out_dir.size()) j["output_dir"] = out_dir;
    if (seed) j["seed"] = *seed;
    if (n_seeds) {
      json s = json::array();
      for (std::size_t i = 0; i < *n_seeds; ++i) s.push_back(i);
      j["seeds"] = s;
    }
    if (videos) j["dataset"]["n"] = *videos;
    if (iters) attack["iters"] = *iters;
    if (delta_max) attack["delta_max"] = *delta_max;
    if (sparsity) attack["sparsity"] = *sparsity;
    if (mask) attack["mask"] = *mask;
    if (subsample_rate) j["subsample_rate"] = *subsample_rate;
    if (!model.empty()) j["model"]["path"] = model;
    if (!model_cache.empty()) j["model"]["cache"] = model_cache;
    if (trace) j["trace"] = true;
    return parse_experiment_config(j);
  }
};

SurrogateModel experiment_model(const ExperimentConfig& cfg) {
  const TokenTable table = load_table(cfg);
  return obtain_model(cfg.model, cfg.dataset.dims, table, table.encode(cfg.prompt));
}

int run_attack(const std::string& video, const std::string& model_path, const std::string& tokens,
               const std::string& prompt_text, AttackConfig cfg, const std::string& mask, const std::string& target,
               const std::string& out, const std::string& save_adv, const std::string& trace_path) {
  const TokenTable table = table_from(tokens);
  const SurrogateModel model = load_model(model_path);
  const Video x = load_video(video);
  cfg.mask_kind = mask_kind_from_string(mask);
  std::optional<Video> xt;
  if (!target.empty()) {
    xt = load_video(target);
    cfg.targeted = true;
  }
  cfg.validate();
  const TokenSeq prompt = parse_prompt(prompt_text, table);
  const AttackResult res = fmm_attack(model, x, prompt, cfg, xt);
  json j;
  j["config"] = to_json_value(cfg);
  j["config"]["targeted"] = cfg.targeted;
  j["config"]["seed"] = cfg.seed;
  j["mask"] = {{"indices", res.mask.indices()}, {"sparsity", sparsity_of(res.mask)}};
  j["delta_bar"] = res.delta_bar;
  j["l21"] = l21_norm(res.perturbation);
  j["clean_output"] = table.render(res.clean_output);
  j["adv_output"] = table.render(res.adv_output);
  j["loss_video"] = loss_video(res.clean_feature, res.adv_feature);
  j["loss_llm"] = loss_llm(res.clean_hidden, res.adv_hidden);
  MetricRow row;
  row.run_id = "attack";
  row.clip_sim = clip_sim(model, res.adv_output, res.clean_output);
  row.bleu = bleu(res.adv_output, res.clean_output);
  row.rouge_l = rouge_l(res.adv_output, res.clean_output);
  row.cider = cider({res.adv_output}, {{res.clean_output}});
  row.garbled = is_garbled(res.adv_output);
  row.sparsity = sparsity_of(res.mask);
  row.delta_bar = res.delta_bar;
  j["metrics"] = row;
  if (!res.trace.empty()) j["final_objective"] = res.trace.back().total;
  if (!save_adv.empty()) save_video(res.adversarial, save_adv);
  if (!trace_path.empty()) write_trace_csv(trace_path, "attack", res.trace);
  emit_json(j, out);
  return 0;
}

int run_flow(const std::string& video, const FlowParams& params, const std::string& out, const std::string& pixmaps) {
  const Video x = load_video(video);
  const FlowScores s = per_frame_flow_scores(x, params);
  std::ostringstream os;
  os << "frame_index,score\n";
  for (std::size_t i = 0; i < s.scores.size(); ++i) os << i << ',' << detail::fmt_real(s.scores[i]) << '\n';
  if (out.empty() || out == "-") std::cout << os.str();
  else write_text(out, os.str());
  if (!pixmaps.empty()) {
    fs::create_directories(pixmaps);
    const auto flows = adjacent_flows(x.pixels(), params);
    for (std::size_t i = 0; i < flows.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "flow_%04zu.ppm", i);
      write_ppm(fs::path(pixmaps) / name, flows[i].u.height, flows[i].u.width, flow_to_color(flows[i]));
    }
  }
  return 0;
}

int run_mask(const std::string& video, std::optional<std::size_t> frames, const std::string& kind, double sparsity,
             std::uint64_t seed, std::size_t start, const FlowParams& params, const std::string& out) {
  const MaskKind k = mask_kind_from_string(kind);
  TemporalMask m;
  if (k == MaskKind::Flow) {
    if (video.empty()) throw Error("invalid_argument", "the flow mask needs --video");
    m = flow_mask(per_frame_flow_scores(load_video(video), params), sparsity);
  } else {
    std::size_t t = 0;
    if (!video.empty()) t = load_video(video).frames();
    else if (frames) t = *frames;
    else throw Error("invalid_argument", "give --video or --frames");
    if (k == MaskKind::Sequence) m = sequence_mask(t, sparsity, start);
    else if (k == MaskKind::Random) m = random_mask(t, sparsity, seed);
    else m = TemporalMask::full(t);
  }
  emit_json({{"kind", to_string(k)}, {"frames", m.frames()}, {"indices", m.indices()}, {"sparsity", sparsity_of(m)}},
            out);
  return 0;
}

int run_eval(const std::string& candidate, const std::string& reference, const std::string& tokens,
             const std::string& model_path, const std::string& question, std::string endpoint, bool mock_judge,
             int judge_timeout_ms, unsigned judge_retries, const std::string& out) {
  const TokenTable table = table_from(tokens);
  const TokenSeq c = table.encode(candidate), r = table.encode(reference);
  json j;
  j["candidate"] = candidate;
  j["reference"] = reference;
  j["bleu"] = bleu(c, r);
  j["rouge_l"] = rouge_l(c, r);
  j["cider"] = cider({c}, {{r}});
  j["garbled"] = is_garbled(c);
  if (!model_path.empty()) j["clip_sim"] = clip_sim(load_model(model_path), c, r);
  std::optional<MockJudgeServer> mock;
  if (mock_judge) {
    mock.emplace(0);
    endpoint = mock->endpoint();
  }
  if (endpoint.empty())
    if (auto env = default_judge_endpoint()) endpoint = *env;
  if (!endpoint.empty()) {
    JudgeOptions opt;
    opt.timeout = std::chrono::milliseconds(judge_timeout_ms);
    opt.retries = judge_retries;
    const JudgeScore s = judge(endpoint, question, candidate, reference, opt);
    j["judge"] = {{"score", s.score}, {"accurate", s.accurate}};
  }
  emit_json(j, out);
  return 0;
}

int run_bench(const ExperimentFlags& flags) {
  const ExperimentConfig cfg = flags.resolve();
  const SurrogateModel model = experiment_model(cfg);
  const Report rep = run_experiment(cfg, model);
  write_report(rep, cfg.output_dir);
  std::cout << json{{"output_dir", cfg.output_dir}, {"rows", rep.rows.size()}, {"errors", rep.errors.size()}}.dump()
            << '\n';
  return 0;
}

int run_sweep(const ExperimentFlags& flags, const std::string& axis, const std::vector<std::string>& values) {
  ExperimentConfig cfg = flags.resolve();
  SweepSpec spec;
  if (cfg.sweep) spec = *cfg.sweep;
  if (!axis.empty()) spec.axis = axis;
  if (!values.empty()) {
    spec.values.clear();
    for (const auto& v : values) {
      try {
        spec.values.push_back(json::parse(v));
      } catch (const json::exception&) {
        throw Error("invalid_config", "sweep value '" + v + "' is not JSON");
      }
    }
  }
  if (spec.axis.empty()) throw Error("invalid_config", "no sweep axis given");
  cfg.sweep = spec;
  cfg.validate();
  const SurrogateModel model = experiment_model(cfg);
  const auto pts = sweep(cfg, spec.axis, spec.values, model);
  json summary = json::array();
  for (const auto& p : pts) {
    const fs::path dir = fs::path(cfg.output_dir) / sweep_label(spec.axis, p.value);
    write_report(p.report, dir);
    summary.push_back({{"value", p.value}, {"dir", dir.string()}, {"aggregates", aggregates(p.report)},
                       {"annotations", p.report.annotations}});
  }
  std::ostringstream os;
  write_sweep_summary(pts, spec.axis, os);
  write_text(fs::path(cfg.output_dir) / "sweep.csv", os.str());
  write_text(fs::path(cfg.output_dir) / "sweep.json", json{{"axis", spec.axis}, {"points", summary}}.dump(2) + "\n");
  std::cout << json{{"output_dir", cfg.output_dir}, {"points", pts.size()}}.dump() << '\n';
  return 0;
}

int run_transfer(const ExperimentFlags& flags, const std::string& model_b_path, std::uint64_t model_b_seed) {
  const ExperimentConfig cfg = flags.resolve();
  const SurrogateModel a = experiment_model(cfg);
  SurrogateModel b;
  if (!model_b_path.empty()) {
    b = load_model(model_b_path);
  } else {
    ModelSpec spec = cfg.model;
    spec.path.clear();
    spec.cache.clear();
    spec.seed = model_b_seed;
    const TokenTable table = load_table(cfg);
    b = obtain_model(spec, cfg.dataset.dims, table, table.encode(cfg.prompt));
  }
  const Report rep = transfer_eval(a, b, cfg);
  write_report(rep, cfg.output_dir);
  std::cout << json{{"output_dir", cfg.output_dir}, {"rows", rep.rows.size()}}.dump() << '\n';
  return 0;
}

int run_cluster_cmd(const ExperimentFlags& flags) {
  const ExperimentConfig cfg = flags.resolve();
  const SurrogateModel model = experiment_model(cfg);
  const Report rep = run_cluster(cfg, model);
  write_report(rep, cfg.output_dir);
  std::cout << json{{"output_dir", cfg.output_dir}, {"cluster", to_json_value(rep)["cluster"]}}.dump() << '\n';
  return 0;
}

int run_gradcheck(const std::string& model_path, std::uint64_t init_seed, const std::string& video, std::uint64_t seed,
                  std::size_t samples, double tol, double step, const std::string& out) {
  const SurrogateModel m = model_path.empty() ? init_model(init_seed, toy_model_dims(), 1.5) : load_model(model_path);
  Video x;
  if (!video.empty()) {
    x = load_video(video);
  } else {
    VideoDims d = toy_video_dims();
    d.channels = m.dims.channels;
    x = gen_synthetic_dataset(DatasetKind::MovingSquare, 1, d, seed).front().video;
  }
  GradcheckOptions opt;
  opt.samples = samples;
  opt.tol = tol;
  opt.step = step;
  opt.seed = seed;
  const GradcheckReport r = gradcheck(m, x.pixels(), default_prompt(), opt);
  emit_json({{"max_rel_err", r.max_rel_err}, {"checked", r.checked}, {"skipped_kinks", r.skipped_kinks},
             {"tol", tol}, {"pass", r.pass}},
            out);
  return r.pass ? 0 : 3;
}

int run_gen_data(const std::string& kind, std::size_t n, std::uint64_t seed, const std::string& out_dir,
                 const std::string& format) {
  const TokenTable table = default_token_table();
  const auto clips = gen_synthetic_dataset(dataset_kind_from_string(kind), n, toy_video_dims(), seed, table);
  fs::create_directories(out_dir);
  std::ostringstream captions;
  json index = json::array();
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04zu%s", i, format == "vtensor" ? ".vtensor" : "");
    save_video(clips[i].video, fs::path(out_dir) / name);
    captions << table.render(clips[i].caption) << '\n';
    index.push_back({{"file", name}, {"caption", table.render(clips[i].caption)}, {"burst_start", clips[i].burst_start}});
  }
  write_text(fs::path(out_dir) / "captions.txt", captions.str());
  table.save(fs::path(out_dir) / "tokens.txt");
  write_text(fs::path(out_dir) / "index.json", index.dump(2) + "\n");
  std::cout << json{{"output_dir", out_dir}, {"clips", clips.size()}}.dump() << '\n';
  return 0;
}

int run_train(const ExperimentFlags& flags, const std::string& out) {
  const ExperimentConfig cfg = flags.resolve();
  const TokenTable table = load_table(cfg);
  const TokenSeq prompt = table.encode(cfg.prompt);
  const TrainedModel tm = train_model(cfg.model, cfg.dataset.dims, table, prompt);
  save_model(tm.model, out);
  std::cout << json{{"model", out}, {"init_seed", tm.init_seed}, {"final_loss", tm.final_loss}, {"attempts", tm.attempts}}
                   .dump()
            << '\n';
  return 0;
}

int fail(const std::string& code, const std::string& message, int status) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << '\n';
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-masked multi-modal adversarial attacks on a toy video captioner"};
  app.require_subcommand(1);

  // attack
  auto* attack = app.add_subcommand("attack", "attack one video");
  std::string a_video, a_model, a_tokens, a_prompt = "what is happening ?", a_mask = "flow", a_target, a_out, a_save,
                                         a_trace;
  AttackConfig acfg;
  attack->add_option("--video", a_video, "input video (.vtensor or pixmap directory)")->required();
  attack->add_option("--model", a_model, "model file")->required();
  attack->add_option("--tokens", a_tokens, "token table");
  attack->add_option("--prompt-tokens", a_prompt, "prompt words or token ids");
  attack->add_option("--mask", a_mask, "flow, seq, random or full");
  attack->add_option("--sparsity", acfg.sparsity, "fraction of untouched frames");
  attack->add_option("--seq-start", acfg.seq_start, "first frame of the sequence mask");
  attack->add_option("--delta-max", acfg.delta_max, "budget, 8-bit units");
  attack->add_option("--alpha", acfg.step_alpha, "step size, 8-bit units");
  attack->add_option("--iters", acfg.iters, "iterations");
  attack->add_option("--l1", acfg.lambda1, "l2,1 weight");
  attack->add_option("--l2", acfg.lambda2, "video-feature loss weight");
  attack->add_option("--l3", acfg.lambda3, "hidden-state loss weight");
  attack->add_option("--init-radius", acfg.init_radius, "random-start radius, 8-bit units");
  attack->add_option("--target-video", a_target, "target video (targeted attack)");
  attack->add_option("--seed", acfg.seed, "seed");
  attack->add_option("--out", a_out, "report path (default stdout)");
  attack->add_option("--save-adv", a_save, "write the adversarial video");
  attack->add_option("--trace", a_trace, "write per-iteration losses as CSV");

  // flow
  auto* flow = app.add_subcommand("flow", "per-frame optical-flow scores");
  std::string f_video, f_out, f_pix;
  FlowParams fparams;
  flow->add_option("--video", f_video, "input video")->required();
  flow->add_option("--out", f_out, "CSV path (default stdout)");
  flow->add_option("--pixmaps", f_pix, "directory for color-coded flow images");
  flow->add_option("--alpha", fparams.alpha, "smoothness weight, 8-bit units");
  flow->add_option("--iterations", fparams.iterations, "solver iterations");

  // mask
  auto* mask = app.add_subcommand("mask", "build a temporal mask");
  std::string m_video, m_kind = "flow", m_out;
  std::optional<std::size_t> m_frames;
  double m_sparsity = 0.0;
  std::uint64_t m_seed = 0;
  std::size_t m_start = 0;
  mask->add_option("--video", m_video, "input video");
  mask->add_option("--frames", m_frames, "frame count (non-flow masks)");
  mask->add_option("--kind", m_kind, "flow, seq, random or full");
  mask->add_option("--sparsity", m_sparsity, "fraction of untouched frames");
  mask->add_option("--seed", m_seed, "seed (random mask)");
  mask->add_option("--start", m_start, "first frame (sequence mask)");
  mask->add_option("--out", m_out, "JSON path (default stdout)");

  // eval
  auto* eval = app.add_subcommand("eval", "score a caption against a reference");
  std::string e_cand, e_ref, e_tokens, e_model, e_question = "what is happening ?", e_endpoint, e_out;
  bool e_mock = false;
  int e_timeout = 5000;
  unsigned e_retries = 0;
  eval->add_option("--candidate", e_cand, "candidate caption")->required();
  eval->add_option("--reference", e_ref, "reference caption")->required();
  eval->add_option("--tokens", e_tokens, "token table");
  eval->add_option("--model", e_model, "model file (enables clip_sim)");
  eval->add_option("--question", e_question, "question sent to the judge");
  eval->add_option("--judge-endpoint", e_endpoint, std::string("judge URL (default $") + kJudgeEndpointEnv + ")");
  eval->add_flag("--mock-judge", e_mock, "judge with an in-process mock server");
  eval->add_option("--judge-timeout-ms", e_timeout, "judge timeout");
  eval->add_option("--judge-retries", e_retries, "retries after a transport failure (0 or 1)");
  eval->add_option("--out", e_out, "JSON path (default stdout)");

  // experiments
  ExperimentFlags bench_flags, sweep_flags, transfer_flags, cluster_flags, train_flags;
  auto* bench = app.add_subcommand("bench", "clean, baseline and attack arms over a dataset");
  bench_flags.add(bench);
  auto* sw = app.add_subcommand("sweep", "repeat the experiment over one parameter");
  sweep_flags.add(sw);
  std::string s_axis;
  std::vector<std::string> s_values;
  sw->add_option("--axis", s_axis, "delta_max, sparsity, lambda2_lambda3 or subsample_rate");
  sw->add_option("--values", s_values, "JSON values, e.g. 0.2 0.4 or [1,3]");
  auto* transfer = app.add_subcommand("transfer", "craft on one model, evaluate on another");
  transfer_flags.add(transfer);
  std::string t_model_b;
  std::uint64_t t_seed_b = 2;
  transfer->add_option("--model-b", t_model_b, "second model file");
  transfer->add_option("--model-b-seed", t_seed_b, "init seed of the second model when training it");
  auto* cluster = app.add_subcommand("cluster", "feature-space cluster separation under two attack variants");
  cluster_flags.add(cluster);
  auto* train = app.add_subcommand("train", "train the toy captioner and save it");
  train_flags.add(train);
  std::string tr_out = "model.fmmm";
  train->add_option("--out", tr_out, "model path");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of pixel gradients");
  std::string g_model, g_video, g_out;
  std::uint64_t g_init = 0, g_seed = 0;
  std::size_t g_samples = 64;
  double g_tol = 1e-3, g_step = 1e-4;
  gc->add_option("--model", g_model, "model file (default: fresh toy model)");
  gc->add_option("--init-seed", g_init, "init seed of the fresh model");
  gc->add_option("--video", g_video, "input video (default: synthetic clip)");
  gc->add_option("--seed", g_seed, "sampling seed");
  gc->add_option("--samples", g_samples, "pixels to check");
  gc->add_option("--tol", g_tol, "max relative error");
  gc->add_option("--step", g_step, "finite-difference step");
  gc->add_option("--out", g_out, "JSON path (default stdout)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  std::string d_kind = "moving_square", d_out = "data", d_format = "vtensor";
  std::size_t d_n = 10;
  std::uint64_t d_seed = 0;
  gen->add_option("--kind", d_kind, "moving_square, static or mixed");
  gen->add_option("--n", d_n, "number of clips");
  gen->add_option("--seed", d_seed, "seed");
  gen->add_option("--out", d_out, "output directory");
  gen->add_option("--format", d_format, "vtensor or pixmap")->check(CLI::IsMember({"vtensor", "pixmap"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*attack) return run_attack(a_video, a_model, a_tokens, a_prompt, acfg, a_mask, a_target, a_out, a_save, a_trace);
    if (*flow) return run_flow(f_video, fparams, f_out, f_pix);
    if (*mask) return run_mask(m_video, m_frames, m_kind, m_sparsity, m_seed, m_start, fparams, m_out);
    if (*eval)
      return run_eval(e_cand, e_ref, e_tokens, e_model, e_question, e_endpoint, e_mock, e_timeout, e_retries, e_out);
    if (*bench) return run_bench(bench_flags);
    if (*sw) return run_sweep(sweep_flags, s_axis, s_values);
    if (*transfer) return run_transfer(transfer_flags, t_model_b, t_seed_b);
    if (*cluster) return run_cluster_cmd(cluster_flags);
    if (*train) return run_train(train_flags, tr_out);
    if (*gc) return run_gradcheck(g_model, g_init, g_video, g_seed, g_samples, g_tol, g_step, g_out);
    if (*gen) return run_gen_data(d_kind, d_n, d_seed, d_out, d_format);
  } catch (const Error& e) {
    return fail(e.code(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return fail("usage", "no subcommand", 2);
}
