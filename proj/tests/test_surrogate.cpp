#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fmm/dataset.hpp"
#include "fmm/harness.hpp"
#include "fmm/surrogate.hpp"

namespace fs = std::filesystem;
using namespace fmm;

namespace {

Tensor random_tensor(std::uint64_t seed, const Shape& s, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

ModelDims small_dims() {
  ModelDims d;
  d.filters = 6;
  d.d_model = 8;
  d.vocab = 16;
  d.max_len = 5;
  return d;
}

TokenSeq prompt3() { return TokenSeq{{2, 3, 4}}; }

/// Direct conv + ReLU + grid average pool + temporal mean.
std::vector<double> encoder_oracle(const SurrogateModel& m, const Tensor& x) {
  const ModelDims& d = m.dims;
  const Shape& s = x.shape();
  const std::size_t k = d.kernel, ho = s.height - k + 1, wo = s.width - k + 1, g = d.pool_grid;
  std::vector<double> q(d.feature_dim(), 0.0);
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t f = 0; f < d.filters; ++f)
      for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
          const std::size_t r0 = gy * ho / g, r1 = (gy + 1) * ho / g, c0 = gx * wo / g, c1 = (gx + 1) * wo / g;
          double sum = 0.0;
          for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = c0; j < c1; ++j) {
              double z = m.params.conv_b[f];
              for (std::size_t c = 0; c < d.channels; ++c)
                for (std::size_t u = 0; u < k; ++u)
                  for (std::size_t v = 0; v < k; ++v)
                    z += m.params.conv_w[((f * d.channels + c) * k + u) * k + v] *
                         (x.at(t, c, i + u, j + v) - d.input_mean) / d.input_std;
              sum += z > 0.0 ? z : 0.0;
            }
          q[(f * g + gy) * g + gx] += sum / static_cast<double>((r1 - r0) * (c1 - c0)) / static_cast<double>(s.frames);
        }
  return q;
}

}  // namespace

TEST(InitModel, SeedDeterminism) {
  EXPECT_EQ(init_model(7, small_dims()), init_model(7, small_dims()));
  EXPECT_NE(init_model(7, small_dims()).params, init_model(8, small_dims()).params);
}

TEST(InitModel, RangeFollowsFanIn) {
  const SurrogateModel m = init_model(1, small_dims());
  const double r = 0.5 / std::sqrt(9.0);
  for (double w : m.params.conv_w) EXPECT_LE(std::abs(w), r);
}

TEST(InitModel, InvalidDims) {
  ModelDims d = small_dims();
  d.vocab = 3;
  EXPECT_THROW(init_model(0, d), Error);
  d = small_dims();
  d.channels = 2;
  EXPECT_THROW(init_model(0, d), Error);
}

TEST(Encoder, TemporalMeanInvariance) {
  const SurrogateModel m = init_model(2, small_dims());
  const Tensor f = random_tensor(3, Shape{1, 1, 10, 10});
  Tensor two(Shape{2, 1, 10, 10}), four(Shape{4, 1, 10, 10});
  for (std::size_t t = 0; t < 4; ++t) {
    if (t < 2) std::copy(f.values().begin(), f.values().end(), two.frame(t).begin());
    std::copy(f.values().begin(), f.values().end(), four.frame(t).begin());
  }
  EXPECT_EQ(encode_video(m, two).values, encode_video(m, four).values);
}

TEST(Encoder, ZeroVideoZeroBias) {
  SurrogateModel m = init_model(2, small_dims());
  std::fill(m.params.conv_b.begin(), m.params.conv_b.end(), 0.0);
  for (double v : encode_video(m, Tensor(Shape{3, 1, 9, 9})).values) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, MatchesDirectSummation) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const ModelDims& d : {small_dims(), toy_model_dims()}) {
      ModelDims dd = d;
      dd.channels = seed % 2 ? 3 : 1;
      const SurrogateModel m = init_model(seed, dd, 1.0);
      const Tensor x = random_tensor(seed + 10, Shape{3, dd.channels, 11, 12});
      const auto got = encode_video(m, x).values;
      const auto want = encoder_oracle(m, x);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
    }
  }
}

TEST(Encoder, FrameSmallerThanKernel) {
  ModelDims d = small_dims();
  d.kernel = 9;
  EXPECT_THROW(encode_video(init_model(0, d), Tensor(Shape{2, 1, 8, 8})), Error);
}

TEST(Generate, DeterministicAndFactorsThroughFeature) {
  const SurrogateModel m = init_model(4, small_dims(), 2.0);
  const FeatureVec q = encode_video(m, random_tensor(5, Shape{3, 1, 10, 10}));
  const auto a = generate(m, prompt3(), q), b = generate(m, prompt3(), q);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Generate, EqualFeaturesGiveEqualOutputs) {
  const SurrogateModel m = init_model(4, small_dims(), 2.0);
  const Tensor f = random_tensor(6, Shape{1, 1, 10, 10});
  Tensor x2(Shape{2, 1, 10, 10}), x3(Shape{3, 1, 10, 10});
  for (std::size_t t = 0; t < 3; ++t) {
    if (t < 2) std::copy(f.values().begin(), f.values().end(), x2.frame(t).begin());
    std::copy(f.values().begin(), f.values().end(), x3.frame(t).begin());
  }
  EXPECT_EQ(generate(m, prompt3(), encode_video(m, x2)).first, generate(m, prompt3(), encode_video(m, x3)).first);
}

TEST(Generate, HandUnrolledTinyModel) {
  ModelDims d;
  d.filters = 2;
  d.d_model = 2;
  d.vocab = 4;
  d.max_len = 3;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SurrogateModel m = init_model(seed, d, 3.0);
    const FeatureVec q{{0.7, -0.4}};
    const TokenSeq prompt{{2, 3}};
    const auto& p = m.params;
    auto cell = [&](const double in[2], const double h[2], double out[2]) {
      for (int r = 0; r < 2; ++r)
        out[r] = std::tanh(p.b_cell[r] + p.w_in[r * 2] * in[0] + p.w_in[r * 2 + 1] * in[1] + p.w_hid[r * 2] * h[0] +
                           p.w_hid[r * 2 + 1] * h[1]);
    };
    double h[2] = {0, 0}, nh[2];
    for (Token t : prompt.tokens) {
      const double e[2] = {p.embed[t * 2], p.embed[t * 2 + 1]};
      cell(e, h, nh);
      h[0] = nh[0], h[1] = nh[1];
    }
    const double proj[2] = {q.values[0] * p.proj[0] + q.values[1] * p.proj[2],
                            q.values[0] * p.proj[1] + q.values[1] * p.proj[3]};
    cell(proj, h, nh);
    h[0] = nh[0], h[1] = nh[1];
    TokenSeq out;
    double mean[2] = {0, 0};
    Token in = kBos;
    for (int pos = 0; pos < 3; ++pos) {
      const double e[2] = {p.embed[in * 2], p.embed[in * 2 + 1]};
      cell(e, h, nh);
      h[0] = nh[0], h[1] = nh[1];
      mean[0] += h[0];
      mean[1] += h[1];
      Token best = 0;
      double best_v = -1e300;
      for (Token v = 0; v < 4; ++v) {
        const double l = h[0] * p.head[v] + h[1] * p.head[4 + v];
        if (l > best_v) best_v = l, best = v;
      }
      out.tokens.push_back(best);
      if (best == kEos) break;
      in = best;
    }
    const auto [tokens, hidden] = generate(m, prompt, q);
    EXPECT_EQ(tokens, out);
    const double n = static_cast<double>(out.size());
    EXPECT_NEAR(hidden.values[0], mean[0] / n, 1e-14);
    EXPECT_NEAR(hidden.values[1], mean[1] / n, 1e-14);
  }
}

TEST(Generate, LengthAndVocabularyBounds) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const SurrogateModel m = init_model(seed, small_dims(), 3.0);
    const auto out = generate(m, prompt3(), encode_video(m, random_tensor(seed, Shape{2, 1, 9, 9}))).first;
    EXPECT_LE(out.size(), m.dims.max_len);
    for (Token t : out.tokens) EXPECT_LT(t, m.dims.vocab);
  }
  EXPECT_THROW(generate(init_model(0, small_dims()), TokenSeq{}, FeatureVec{std::vector<double>(6)}), Error);
}

TEST(Gradients, ConstantLossHasZeroGradient) {
  const SurrogateModel m = init_model(1, small_dims(), 1.5);
  const auto pg = grad_wrt_pixels(m, random_tensor(2, Shape{3, 1, 10, 10}), prompt3(),
                                  [](const FeatureVec&, const HiddenState&) { return LossEval{4.0, {}, {}}; });
  EXPECT_EQ(pg.value, 4.0);
  for (double g : pg.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Gradients, FiniteDifferencesOnVideoAndHiddenLosses) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const SurrogateModel m = init_model(seed, small_dims(), 1.5);
    const Tensor x = random_tensor(seed + 50, Shape{4, 1, 12, 12});
    const Tensor ref = random_tensor(seed + 60, Shape{4, 1, 12, 12});
    const FeatureVec qr = encode_video(m, ref);
    const HiddenState ar = generate(m, prompt3(), qr).second;
    GradcheckOptions opt;
    opt.tol = 1e-4;
    opt.seed = seed;
    const auto video = gradcheck_loss(
        m, x, prompt3(),
        [&](const FeatureVec& q, const HiddenState&) {
          LossEval le;
          for (std::size_t i = 0; i < q.values.size(); ++i) {
            const double diff = q.values[i] - qr.values[i];
            le.value += diff * diff / static_cast<double>(q.values.size());
            le.d_feature.push_back(2.0 * diff / static_cast<double>(q.values.size()));
          }
          return le;
        },
        opt);
    const auto llm = gradcheck_loss(
        m, x, prompt3(),
        [&](const FeatureVec&, const HiddenState& a) {
          LossEval le;
          for (std::size_t i = 0; i < a.values.size(); ++i) {
            const double diff = a.values[i] - ar.values[i];
            le.value += diff * diff / static_cast<double>(a.values.size());
            le.d_hidden.push_back(2.0 * diff / static_cast<double>(a.values.size()));
          }
          return le;
        },
        opt);
    EXPECT_TRUE(video.pass) << video.max_rel_err;
    EXPECT_TRUE(llm.pass) << llm.max_rel_err;
    EXPECT_EQ(video.checked, 64u);
  }
}

TEST(Gradcheck, PassFaultAndZeroTolerance) {
  const SurrogateModel m = init_model(3, small_dims(), 1.5);
  const Tensor x = random_tensor(4, Shape{4, 1, 12, 12});
  EXPECT_TRUE(gradcheck(m, x, prompt3()).pass);
  GradcheckOptions faulty;
  faulty.conv_fault = 0.05;
  EXPECT_FALSE(gradcheck(m, x, prompt3(), faulty).pass);
  GradcheckOptions zero;
  zero.tol = 0.0;
  EXPECT_FALSE(gradcheck(m, x, prompt3(), zero).pass);
}

TEST(TextEmbedding, Properties) {
  const SurrogateModel m = init_model(5, small_dims());
  const TokenSeq a{{2, 5, 7}}, b{{7, 2, 5}};
  const auto ea = text_embedding(m, a);
  EXPECT_EQ(ea.values, text_embedding(m, a).values);
  double norm = 0.0;
  for (double v : ea.values) norm += v * v;
  EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-12);
  const auto eb = text_embedding(m, b);
  for (std::size_t i = 0; i < ea.values.size(); ++i) EXPECT_NEAR(ea.values[i], eb.values[i], 1e-15);
  const auto empty = text_embedding(m, TokenSeq{{kBos, kEos}});
  EXPECT_TRUE(empty.empty);
  for (double v : empty.values) EXPECT_EQ(v, 0.0);
}

TEST(Training, ZeroEpochsLeavesParameters) {
  const SurrogateModel m = init_model(1, toy_model_dims(), 1.5);
  const auto clips = gen_synthetic_dataset(DatasetKind::MovingSquare, 4, toy_video_dims(), 1);
  TrainOptions opt;
  opt.epochs = 0;
  EXPECT_EQ(train_toy(m, to_training_set(clips), default_prompt(), opt).model, m);
  EXPECT_THROW(train_toy(m, {}, default_prompt(), opt), Error);
}

TEST(Training, LossDecreasesOverFirstEpochs) {
  const SurrogateModel m = init_model(2, toy_model_dims(), 1.5);
  const auto data = to_training_set(gen_synthetic_dataset(DatasetKind::MovingSquare, 16, toy_video_dims(), 3));
  TrainOptions opt;
  opt.epochs = 6;
  opt.lr = 0.05;
  const auto res = train_toy(m, data, default_prompt(), opt);
  for (std::size_t i = 1; i < res.loss_trace.size(); ++i) EXPECT_LT(res.loss_trace[i], res.loss_trace[i - 1]);
}

TEST(Training, LearnsDirectionTask) {
  const TokenTable table = default_token_table();
  const TokenSeq prompt = table.encode("what is happening ?");
  ModelSpec spec;
  const SurrogateModel m = train_model(spec, toy_video_dims(), table, prompt).model;
  const auto test = gen_synthetic_dataset(DatasetKind::MovingSquare, 64, toy_video_dims(), 999, table);
  int correct = 0;
  for (const auto& c : test) correct += generate(m, prompt, encode_video(m, c.video)).first.content() == c.caption.content();
  EXPECT_GT(correct / 64.0, 0.9);
}

TEST(ModelIO, RoundTripVersionTwo) {
  const fs::path p = fs::temp_directory_path() / "fmm_model_v2.fmmm";
  const SurrogateModel m = quantize_to_f32(init_model(9, toy_model_dims(), 1.5));
  save_model(m, p);
  const SurrogateModel back = load_model(p);
  EXPECT_EQ(back.dims, m.dims);
  EXPECT_EQ(back.params, m.params);
}

TEST(ModelIO, PlainEncoderWritesVersionOne) {
  const fs::path p = fs::temp_directory_path() / "fmm_model_v1.fmmm";
  const SurrogateModel m = quantize_to_f32(init_model(9, small_dims()));
  save_model(m, p);
  std::ifstream is(p, std::ios::binary);
  char head[6];
  is.read(head, 6);
  EXPECT_EQ(std::string(head, 4), "FMMM");
  EXPECT_EQ(head[4], 1);
  EXPECT_EQ(head[5], 0);
  std::size_t floats = 0;
  for (const auto* b : m.params.blocks()) floats += b->size();
  EXPECT_EQ(fs::file_size(p), 6u + 6u * 4u + floats * 4u);
  EXPECT_EQ(load_model(p).params, m.params);
}

TEST(ModelIO, Errors) {
  const fs::path p = fs::temp_directory_path() / "fmm_model_bad.fmmm";
  save_model(init_model(1, small_dims()), p);
  fs::resize_file(p, fs::file_size(p) - 8);
  EXPECT_THROW(load_model(p), Error);
  std::ofstream(p) << "XXXX";
  EXPECT_THROW(load_model(p), Error);
  EXPECT_THROW(load_model("/nonexistent/model.fmmm"), Error);
}

TEST(TokenTable, EncodeRenderAndFile) {
  const TokenTable t = default_token_table();
  const TokenSeq s = t.encode("left");
  EXPECT_EQ(t.render(s), "left");
  EXPECT_THROW(t.encode("nonexistent-word"), Error);
  const fs::path p = fs::temp_directory_path() / "fmm_tokens.txt";
  t.save(p);
  const TokenTable back = TokenTable::load(p);
  EXPECT_EQ(back.size(), t.size());
  EXPECT_EQ(back.encode("what is happening ?"), t.encode("what is happening ?"));
}
