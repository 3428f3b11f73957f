#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "fmm/metrics.hpp"

using namespace fmm;

namespace {

const TokenTable& table() {
  static const TokenTable t({"<bos>", "<eos>", "a", "b", "c", "d", "e", "f", "g", "h", "x", "y", "z", "6", "the",
                             "video", "shows", "man", "cooking"});
  return t;
}

TokenSeq S(const std::string& s) { return table().encode(s); }

TokenSeq random_seq(Rng& rng, std::size_t max_len) {
  TokenSeq s;
  const std::size_t n = rng.index(max_len + 1);
  for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(static_cast<Token>(2 + rng.index(10)));
  return s;
}

SurrogateModel embedding_fixture() {
  ModelDims d;
  d.d_model = 4;
  d.vocab = 19;
  SurrogateModel m = init_model(0, d);
  std::fill(m.params.embed.begin(), m.params.embed.end(), 0.0);
  // Rows for "a" and "b" are orthogonal unit vectors; "c" is "a" scaled.
  m.params.embed[2 * 4 + 0] = 1.0;
  m.params.embed[3 * 4 + 1] = 1.0;
  m.params.embed[4 * 4 + 0] = 3.0;
  return m;
}

}  // namespace

TEST(Bleu, IdentityAndDisjoint) {
  EXPECT_EQ(bleu(S("a b c d e"), S("a b c d e")), 1.0);
  EXPECT_EQ(bleu(S("x y z"), S("a b c d e")), 0.0);
  EXPECT_EQ(bleu(TokenSeq{}, S("a b")), 0.0);
  EXPECT_THROW(bleu(S("a"), std::vector<TokenSeq>{}), Error);
}

TEST(Bleu, ClippedUnigramPrecision) {
  const auto p = modified_precision(S("a a a a"), {S("a b")}, 1);
  EXPECT_EQ(p.matches, 1u);
  EXPECT_EQ(p.total, 4u);
}

TEST(Bleu, HandComputedSmoothedValue) {
  // c = "a b c x", r = "a b c d e": p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0 -> 1/2 (smoothed),
  // brevity penalty exp(1 - 5/4).
  const double expected = std::exp(1.0 - 5.0 / 4.0) * std::pow(0.75 * (2.0 / 3.0) * 0.5 * 0.5, 0.25);
  EXPECT_NEAR(bleu(S("a b c x"), S("a b c d e")), expected, 1e-12);
}

TEST(Bleu, ClosestReferenceLength) {
  // Candidate of length 3 with references of length 2 and 5: closest is 2, no penalty.
  EXPECT_NEAR(bleu(S("a b c"), {S("a b"), S("a b c d e")}), 1.0, 1e-12);
}

TEST(RougeL, Examples) {
  EXPECT_EQ(rouge_l(S("a b c d e"), S("a b c d e")), 1.0);
  EXPECT_EQ(rouge_l(S("x y z"), S("a b c d e")), 0.0);
  EXPECT_NEAR(rouge_l(S("a c e"), S("a b c d e")), 2.44 * 0.6 / (0.6 + 1.44), 1e-12);
  EXPECT_NEAR(rouge_l(S("a c e"), S("a b c d e")), 0.7176, 1e-4);
  EXPECT_EQ(rouge_l(TokenSeq{}, S("a")), 0.0);
}

TEST(RougeL, PermutationSensitive) {
  EXPECT_LT(rouge_l(S("e d c b a"), S("a b c d e")), 1.0);
}

TEST(RougeL, TextHelperMatchesTokens) {
  EXPECT_EQ(rouge_l_text("the cat sat", "the cat sat"), 1.0);
  EXPECT_EQ(rouge_l_text("", "anything"), 0.0);
  EXPECT_NEAR(rouge_l_text("a c e", "a b c d e"), rouge_l(S("a c e"), S("a b c d e")), 1e-15);
}

TEST(Cider, IdentityEqualMaximum) {
  const std::vector<TokenSeq> c{S("a b c d e"), S("f g h x y"), S("z a c e g")};
  std::vector<std::vector<TokenSeq>> r;
  for (const auto& s : c) r.push_back({s});
  const auto items = cider_items(c, r);
  for (double v : items) EXPECT_NEAR(v, 10.0, 1e-12);
}

TEST(Cider, DisjointIsZeroAndErrors) {
  EXPECT_EQ(cider({S("x y z")}, {{S("a b c")}}), 0.0);
  EXPECT_THROW(cider({S("a")}, {}), Error);
  EXPECT_THROW(cider({S("a")}, {{}}), Error);
}

TEST(Cider, TwoItemBruteForce) {
  const std::vector<TokenSeq> cands{S("a b c"), S("a b d")};
  const std::vector<std::vector<TokenSeq>> refs{{S("a b e")}, {S("c b d")}};
  // Unigrams: df(a)=1, df(b)=2, df(c)=1, df(d)=1, df(e)=1; idf = log 2 except b (0).
  // Item 0: cand tf-idf {a:L/3, c:L/3}, ref {a:L/3, e:L/3} -> cosine 1/2.
  // Item 1: cand {a:L/3, d:L/3}, ref {c:L/3, d:L/3} -> cosine 1/2.
  // Bigrams: item 0 cand {ab, bc}, ref {ab, be}; ab has df 1 -> cosine 1/2.
  //          item 1 cand {ab, bd}, ref {cb, bd}; bd df 1 -> cosine 1/2.
  // Trigrams: no overlap -> 0. Four-grams: empty -> 0.
  const auto items = cider_items(cands, refs);
  EXPECT_NEAR(items[0], (0.5 + 0.5) * 10.0 / 4.0, 1e-9);
  EXPECT_NEAR(items[1], (0.5 + 0.5) * 10.0 / 4.0, 1e-9);
  EXPECT_NEAR(cider(cands, refs), 2.5, 1e-9);
}

TEST(Cider, ItemOrderInvariance) {
  const std::vector<TokenSeq> c{S("a b c"), S("a b d"), S("x y")};
  const std::vector<std::vector<TokenSeq>> r{{S("a b e")}, {S("c b d")}, {S("x z")}};
  const std::vector<TokenSeq> c2{c[2], c[0], c[1]};
  const std::vector<std::vector<TokenSeq>> r2{r[2], r[0], r[1]};
  EXPECT_NEAR(cider(c, r), cider(c2, r2), 1e-12);
}

TEST(ClipSim, Examples) {
  const SurrogateModel m = embedding_fixture();
  EXPECT_NEAR(clip_sim(m, S("a b"), S("a b")), 1.0, 1e-12);
  EXPECT_NEAR(clip_sim(m, S("a"), S("b")), 0.0, 1e-12);
  EXPECT_NEAR(clip_sim(m, S("a"), S("c")), 1.0, 1e-12);
  EXPECT_EQ(clip_sim(m, S("a b"), S("b c")), clip_sim(m, S("b c"), S("a b")));
  EXPECT_EQ(clip_sim(m, TokenSeq{}, S("a")), 0.0);
}

TEST(Garble, Examples) {
  EXPECT_TRUE(is_garbled(S("6 6 6 6 6 6")));
  EXPECT_FALSE(is_garbled(S("the video shows a man cooking")));
  EXPECT_FALSE(is_garbled(TokenSeq{}));
  EXPECT_TRUE(is_garbled(S("a b a c a a")));  // dominance 4/6
  EXPECT_FALSE(is_garbled(S("a b a c")));     // too short for dominance, no run of 4
  GarbleParams strict;
  strict.min_run = 3;
  EXPECT_TRUE(is_garbled(S("x y y y"), strict));
}

TEST(Garble, RateIsMeanOfFlags) {
  Rng rng(4);
  std::vector<TokenSeq> ts;
  for (int i = 0; i < 200; ++i) ts.push_back(random_seq(rng, 8));
  double flags = 0.0;
  for (const auto& t : ts) flags += is_garbled(t);
  EXPECT_EQ(garble_rate(ts), flags / 200.0);
  EXPECT_EQ(garble_rate({}), 0.0);
}

TEST(Metrics, RangesOnFuzzedInputs) {
  Rng rng(8);
  for (int i = 0; i < 300; ++i) {
    const TokenSeq c = random_seq(rng, 8), r = random_seq(rng, 8);
    if (r.empty()) continue;
    const double b = bleu(c, r), rl = rouge_l(c, r);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
    EXPECT_GE(rl, 0.0);
    EXPECT_LE(rl, 1.0);
    EXPECT_GE(cider({c}, {{r}}), 0.0);
  }
}

TEST(ClusterSeparation, FarBlobs) {
  Rng rng(1);
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 20; ++i) {
    a.push_back({rng.normal() * 0.1, rng.normal() * 0.1});
    b.push_back({10.0 + rng.normal() * 0.1, rng.normal() * 0.1});
  }
  EXPECT_GE(cluster_separation(a, b), 0.9);
}

TEST(ClusterSeparation, SameBlobNearZero) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 20; ++i) {
      a.push_back({rng.normal(), rng.normal(), rng.normal()});
      b.push_back({rng.normal(), rng.normal(), rng.normal()});
    }
    EXPECT_LT(std::abs(cluster_separation(a, b)), 0.2);
  }
}

TEST(ClusterSeparation, CoincidentGroupsAndErrors) {
  const std::vector<std::vector<double>> a{{0, 0}, {1, 0}, {0, 1}};
  EXPECT_LE(cluster_separation(a, a), 0.0);
  EXPECT_THROW(cluster_separation({{0, 0}}, a), Error);
  EXPECT_THROW(cluster_separation(a, {{0, 0}, {1, 1, 1}}), Error);
}

TEST(MetricRows, CsvAndJson) {
  MetricRow r{"s0/v1/fmm", 0.5, 0.25, 1.0, 2.5, true, 0.2, 3.75};
  EXPECT_EQ(to_csv_line(r), "s0/v1/fmm,0.5,0.25,1,2.5,1,0.2,3.75");
  std::ostringstream os;
  write_csv(os, {r});
  EXPECT_EQ(os.str(), std::string(kMetricCsvHeader) + "\ns0/v1/fmm,0.5,0.25,1,2.5,1,0.2,3.75\n");
  const nlohmann::json j = r;
  EXPECT_EQ(j["garbled"], true);
  EXPECT_EQ(j["delta_bar"], 3.75);
  r.run_id = "a,b";
  EXPECT_EQ(to_csv_line(r).substr(0, 6), "\"a,b\",");
}
