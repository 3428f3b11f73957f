#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fmm/harness.hpp"

namespace fs = std::filesystem;
using namespace fmm;

namespace {

const SurrogateModel& trained() {
  static const SurrogateModel m = [] {
    const TokenTable t = default_token_table();
    return train_model(ModelSpec{}, toy_video_dims(), t, t.encode("what is happening ?")).model;
  }();
  return m;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.seeds = {0, 1};
  c.dataset.n = 3;
  c.attack.iters = 10;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Video ramp_video(std::size_t frames) {
  Tensor t(Shape{frames, 1, 8, 8});
  for (std::size_t f = 0; f < frames; ++f)
    for (double& v : t.frame(f)) v = static_cast<double>(f) / static_cast<double>(frames);
  return Video(t);
}

}  // namespace

TEST(Subsample, RateOneIsIdentity) {
  const Video v = ramp_video(10);
  EXPECT_EQ(subsample_victim(v, 1.0, 3), v);
}

TEST(Subsample, HalfKeepsFiveOrderedFrames) {
  const Video v = ramp_video(10);
  const Video s = subsample_victim(v, 0.5, 3);
  ASSERT_EQ(s.frames(), 5u);
  double prev = -1.0;
  for (std::size_t t = 0; t < 5; ++t) {
    const double value = s.pixels().frame(t)[0];
    EXPECT_GT(value, prev);
    prev = value;
  }
  EXPECT_EQ(subsample_victim(v, 0.5, 3), s);
}

TEST(Subsample, Errors) {
  const Video v = ramp_video(10);
  try {
    subsample_victim(v, 0.01, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "empty_subsample");
  }
  EXPECT_THROW(subsample_victim(v, 0.0, 0), Error);
  EXPECT_THROW(subsample_victim(v, 1.5, 0), Error);
}

TEST(RandomControl, ExactMagnitudeOnMaskedFrames) {
  const Video v(Tensor(Shape{4, 1, 8, 8}, 0.5));
  const TemporalMask m({true, false, true, false});
  const Video c = random_control(v, m, 6.0, 1);
  EXPECT_NEAR(mean_abs_perturbation(v, c, m), 6.0, 1e-9);
  for (std::size_t t : {1u, 3u})
    for (double x : c.pixels().frame(t)) EXPECT_EQ(x, 0.5);
}

TEST(Config, ParsesAndEchoes) {
  const json j = json::parse(R"({
    "seeds": [3, 4], "dataset": {"n": 2, "dims": {"frames": 8}},
    "attack": {"delta_max": 8, "mask": "flow", "sparsity": 0.5, "l1": 1.5},
    "baselines": ["black"], "mask_variants": ["seq"],
    "sweep": {"axis": "lambda2_lambda3", "values": [[1, 3], [2, 2]]}})");
  const ExperimentConfig c = parse_experiment_config(j);
  EXPECT_EQ(c.run_seeds(), (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.dataset.dims.frames, 8u);
  EXPECT_EQ(c.attack.delta_max, 8.0);
  EXPECT_EQ(c.attack.lambda1, 1.5);
  EXPECT_EQ(c.attack.mask_kind, MaskKind::Flow);
  EXPECT_EQ(c.attack.iters, 200u);
  ASSERT_TRUE(c.sweep);
  EXPECT_EQ(c.sweep->values.size(), 2u);
  const json echo = to_json_value(c);
  EXPECT_EQ(to_json_value(parse_experiment_config(echo)), echo);
}

TEST(Config, RejectsInvalid) {
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"bogus": 1})")), Error);
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"attack": {"alpah": 1}})")), Error);
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"sweep": {"axis": "sparsity", "values": []}})")), Error);
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"sweep": {"axis": "colour", "values": [1]}})")), Error);
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"subsample_rate": 0})")), Error);
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"attack": {"l2": 0, "l3": 0}})")), Error);
  EXPECT_THROW(parse_experiment_config(json::parse(R"({"metrics": ["meteor"]})")), Error);
  EXPECT_THROW(load_experiment_config("/nonexistent/config.json"), Error);
}

TEST(Experiment, CleanRowsAreSelfComparisons) {
  const Report r = run_experiment(small_config(), trained());
  ASSERT_TRUE(r.errors.empty());
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    if (r.keys[i].arm != "clean") continue;
    EXPECT_EQ(r.rows[i].bleu, 1.0);
    EXPECT_EQ(r.rows[i].rouge_l, 1.0);
    EXPECT_NEAR(r.rows[i].clip_sim, 1.0, 1e-12);
    EXPECT_FALSE(r.rows[i].garbled);
  }
}

TEST(Experiment, RowCountAndArms) {
  ExperimentConfig c = small_config();
  c.mask_variants = {MaskKind::Random};
  const Report r = run_experiment(c, trained());
  EXPECT_EQ(r.rows.size(), 2u * 3u * 6u);
  EXPECT_EQ(arms_of(r), (std::vector<std::string>{"clean", "random", "black", "white", "fmm", "fmm_random"}));
  EXPECT_EQ(r.rows.size(), r.keys.size());
  EXPECT_EQ(r.rows.size(), r.details.size());
}

TEST(Experiment, AggregatesMatchRowMeans) {
  const Report r = run_experiment(small_config(), trained());
  const json agg = aggregates(r);
  for (const auto& arm : arms_of(r))
    for (const auto& f : aggregate_fields()) {
      double sum = 0.0;
      int n = 0;
      for (std::size_t i = 0; i < r.rows.size(); ++i)
        if (r.keys[i].arm == arm) {
          sum += row_field(r.rows[i], f);
          ++n;
        }
      EXPECT_NEAR(agg[arm][f].get<double>(), sum / n, 1e-12);
    }
}

TEST(Experiment, DeterministicReportFiles) {
  const ExperimentConfig c = small_config();
  const fs::path a = fs::temp_directory_path() / "fmm_h_det_a", b = fs::temp_directory_path() / "fmm_h_det_b";
  ExperimentConfig ct = c;
  ct.trace = true;
  write_report(run_experiment(ct, trained()), a);
  write_report(run_experiment(ct, trained()), b);
  for (const char* f : {"report.json", "rows.csv", "trace.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_TRUE(fs::exists(a / "timing.csv"));
  EXPECT_EQ(slurp(a / "rows.csv").rfind(std::string(kMetricCsvHeader) + "\n", 0), 0u);
}

TEST(Experiment, FailingVideoIsRecordedNotFatal) {
  const fs::path dir = fs::temp_directory_path() / "fmm_h_inputs";
  fs::create_directories(dir);
  save_video(Video(Tensor(Shape{10, 1, 12, 12}, 0.5)), dir / "gray.vtensor");
  save_video(Video(Tensor(Shape{10, 3, 12, 12}, 0.5)), dir / "color.vtensor");
  ExperimentConfig c = small_config();
  c.seeds = {0};
  c.dataset.inputs = {(dir / "gray.vtensor").string(), (dir / "color.vtensor").string()};
  const Report r = run_experiment(c, trained());
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].run_id, "s0/v1/*");
  EXPECT_EQ(r.rows.size(), 5u);
}

TEST(Experiment, GroundTruthColumns) {
  ExperimentConfig c = small_config();
  c.seeds = {0};
  const json j = to_json_value(run_experiment(c, trained()));
  EXPECT_TRUE(j["rows"][0].contains("ground_truth"));
  EXPECT_TRUE(j["rows"][0].contains("gt_rouge_l"));
}

TEST(Sweep, PairedSeedsAnnotationAndLambdaPairs) {
  ExperimentConfig c = small_config();
  c.baselines.clear();
  const auto pts = sweep(c, "delta_max", {json(8.0), json(32.0)}, trained());
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_TRUE(pts[0].report.annotations.empty());
  EXPECT_FALSE(pts[1].report.annotations.empty());
  EXPECT_EQ(pts[0].report.config["seeds"], pts[1].report.config["seeds"]);
  for (std::size_t i = 0; i < pts[0].report.keys.size(); ++i) {
    EXPECT_EQ(pts[0].report.keys[i].seed, pts[1].report.keys[i].seed);
    EXPECT_EQ(pts[0].report.keys[i].video, pts[1].report.keys[i].video);
  }
  const auto lam = sweep(c, "lambda2_lambda3", {json::array({1, 3})}, trained());
  EXPECT_EQ(lam[0].report.config["attack"]["l2"], 1.0);
  EXPECT_EQ(lam[0].report.config["attack"]["l3"], 3.0);
  EXPECT_THROW(sweep(c, "lambda2_lambda3", {json(2)}, trained()), Error);
  EXPECT_THROW(sweep(c, "colour", {json(1)}, trained()), Error);
  EXPECT_THROW(sweep(c, "delta_max", {}, trained()), Error);
}

TEST(Sweep, SummaryHasGarbleRateColumn) {
  ExperimentConfig c = small_config();
  c.baselines.clear();
  const auto pts = sweep(c, "subsample_rate", {json(0.5), json(1.0)}, trained());
  std::ostringstream os;
  write_sweep_summary(pts, "subsample_rate", os);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "axis,value,arm,clip_sim,bleu,rouge_l,cider,garble_rate,sparsity,delta_bar");
  int lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 4);
}

TEST(Transfer, SelfTransferEqualsWhitebox) {
  ExperimentConfig c = small_config();
  const Report r = transfer_eval(trained(), trained(), c);
  ASSERT_TRUE(r.errors.empty());
  const auto arms = arms_of(r);
  EXPECT_NE(std::find(arms.begin(), arms.end(), "transfer_random"), arms.end());
  for (const auto& f : aggregate_fields())
    EXPECT_EQ(arm_mean(r, "transfer", f), arm_mean(r, "whitebox", f)) << f;
}

TEST(Cluster, EmptyMaskGivesCoincidentClusters) {
  ExperimentConfig c = small_config();
  c.attack.mask_kind = MaskKind::Sequence;
  c.attack.sparsity = 1.0;
  const auto videos = load_dataset(c.dataset, 0, default_token_table());
  const auto [video_space, llm_space] = cluster_analysis(trained(), videos, c, 0);
  EXPECT_LE(video_space.separation_video, 0.0);
  EXPECT_LE(video_space.separation_hidden, 0.0);
  EXPECT_LE(llm_space.separation_video, 0.0);
  EXPECT_LE(llm_space.separation_hidden, 0.0);
}

TEST(Cluster, VideoSpaceAttackSeparatesFeatures) {
  // Without the sparsity penalty the video-space attack moves every feature.
  ExperimentConfig c = small_config();
  c.dataset.n = 6;
  c.attack.lambda1 = 0.0;
  c.attack.iters = 100;
  const auto videos = load_dataset(c.dataset, 0, default_token_table());
  EXPECT_GT(cluster_analysis(trained(), videos, c, 0).first.separation_video, 0.0);
  EXPECT_THROW(cluster_analysis(trained(), {videos[0]}, c, 0), Error);
}

TEST(Cluster, RunClusterStoresPerSeed) {
  ExperimentConfig c = small_config();
  const Report r = run_cluster(c, trained());
  ASSERT_TRUE(r.cluster);
  EXPECT_EQ(r.extra["cluster_by_seed"].size(), 2u);
  EXPECT_TRUE(to_json_value(r).contains("cluster"));
}

TEST(Model, CacheIsReused) {
  const fs::path cache = fs::temp_directory_path() / "fmm_h_cache" / "m.fmmm";
  fs::remove_all(cache.parent_path());
  ModelSpec spec;
  spec.cache = cache.string();
  spec.train.epochs = 5;
  spec.train.restarts = 0;
  const TokenTable t = default_token_table();
  const SurrogateModel a = obtain_model(spec, toy_video_dims(), t, default_prompt());
  EXPECT_TRUE(fs::exists(cache));
  const SurrogateModel b = obtain_model(spec, toy_video_dims(), t, default_prompt());
  EXPECT_EQ(a.params, b.params);
}
