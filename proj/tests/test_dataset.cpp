#include <gtest/gtest.h>

#include <map>

#include "fmm/dataset.hpp"
#include "fmm/optflow.hpp"

using namespace fmm;

TEST(Dataset, StaticClipsHaveNoMotion) {
  for (const auto& c : gen_synthetic_dataset(DatasetKind::Static, 4, VideoDims{}, 3)) {
    EXPECT_EQ(c.label, "stays");
    for (double s : per_frame_flow_scores(c.video).scores) EXPECT_EQ(s, 0.0);
  }
}

TEST(Dataset, RightwardSquareHasPositiveHorizontalFlow) {
  const auto clips = gen_synthetic_dataset(DatasetKind::MovingSquare, 8, VideoDims{}, 5);
  for (const auto& c : clips) {
    if (c.label != "right") continue;
    const std::size_t t = c.burst_start;
    const Plane a = grayscale(c.video.pixels(), t), b = grayscale(c.video.pixels(), t + 1);
    const FlowField f = estimate_flow(a, b);
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
      if (a.data[i] > 0.5 || b.data[i] > 0.5) {
        sum += f.u.data[i];
        ++n;
      }
    ASSERT_GT(n, 0);
    EXPECT_GT(sum / n, 0.0);
  }
}

TEST(Dataset, SeedDeterminism) {
  const VideoDims d = VideoDims{};
  const auto a = gen_synthetic_dataset(DatasetKind::Mixed, 12, d, 9);
  const auto b = gen_synthetic_dataset(DatasetKind::Mixed, 12, d, 9);
  const auto c = gen_synthetic_dataset(DatasetKind::Mixed, 12, d, 10);
  ASSERT_EQ(a.size(), 12u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].video, b[i].video);
    EXPECT_EQ(a[i].caption, b[i].caption);
    differs = differs || !(a[i].video == c[i].video);
  }
  EXPECT_TRUE(differs);
}

TEST(Dataset, BalancedDirectionsAndCaptions) {
  const TokenTable t = default_token_table();
  std::map<std::string, int> counts;
  for (const auto& c : gen_synthetic_dataset(DatasetKind::MovingSquare, 16, VideoDims{}, 1, t)) {
    ++counts[c.label];
    EXPECT_EQ(t.render(c.caption), c.label);
    EXPECT_EQ(c.burst_len, VideoDims{}.burst);
  }
  EXPECT_EQ(counts.size(), 4u);
  for (const auto& [label, n] : counts) EXPECT_EQ(n, 4) << label;
}

TEST(Dataset, SquareOnlyDuringBurst) {
  // The square starts fully visible and may leave the frame late in the burst.
  const VideoDims d;
  for (const auto& c : gen_synthetic_dataset(DatasetKind::MovingSquare, 6, d, 2)) {
    for (std::size_t t = 0; t < d.frames; ++t) {
      std::size_t lit = 0;
      for (double v : c.video.pixels().frame(t)) lit += v == d.foreground;
      if (t == c.burst_start) {
        EXPECT_EQ(lit, d.square * d.square);
      }
      if (t < c.burst_start || t >= c.burst_start + c.burst_len) {
        EXPECT_EQ(lit, 0u);
      }
    }
  }
}

TEST(Dataset, NoisyClipsStayInRange) {
  VideoDims d;
  d.noise = 0.05;
  for (const auto& c : gen_synthetic_dataset(DatasetKind::MovingSquare, 4, d, 2))
    for (double v : c.video.pixels().values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(Dataset, InvalidDims) {
  VideoDims d;
  d.burst = d.frames + 1;
  EXPECT_THROW(gen_synthetic_dataset(DatasetKind::MovingSquare, 2, d, 0), Error);
  d = VideoDims{};
  d.height = 4;
  EXPECT_THROW(gen_synthetic_dataset(DatasetKind::MovingSquare, 2, d, 0), Error);
  EXPECT_THROW(dataset_kind_from_string("spiral"), Error);
}
