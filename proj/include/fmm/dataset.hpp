#pragma once

// Synthetic captioned videos: a bright square that crosses an empty scene
// during a short burst of frames, captioned with its direction of travel.

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "fmm/common.hpp"
#include "fmm/surrogate.hpp"
#include "fmm/videotensor.hpp"

namespace fmm {

/// The default word list. Line number = token id; ids 0 and 1 are BOS/EOS.
inline TokenTable default_token_table() {
  return TokenTable({"<bos>", "<eos>", "a", "square", "moves", "left", "right", "up", "down", "stays", "what", "is",
                     "happening", "?", "the", "video"});
}

inline TokenSeq default_prompt() { return default_token_table().encode("what is happening ?"); }

enum class DatasetKind { MovingSquare, Static, Mixed };

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "moving_square") return DatasetKind::MovingSquare;
  if (s == "static") return DatasetKind::Static;
  if (s == "mixed") return DatasetKind::Mixed;
  throw Error("invalid_dataset", "unknown dataset kind '" + s + "'");
}

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::MovingSquare: return "moving_square";
    case DatasetKind::Static: return "static";
    case DatasetKind::Mixed: return "mixed";
  }
  return "unknown";
}

enum class Direction { Left, Right, Up, Down };

inline const char* to_string(Direction d) {
  static constexpr std::array<const char*, 4> names{"left", "right", "up", "down"};
  return names[static_cast<std::size_t>(d)];
}

struct VideoDims {
  std::size_t frames = 10;
  std::size_t channels = 1;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t square = 3;      // side of the square in pixels
  std::size_t burst = 4;       // frames during which the square is visible
  std::size_t speed = 2;       // pixels per frame while moving
  std::size_t jitter = 1;      // max start offset from the centre, per axis
  double background = 0.125;   // exactly representable in f32
  double foreground = 0.875;
  double noise = 0.0;          // per-pixel uniform sensor noise amplitude

  void validate() const {
    if (frames < 2) throw Error("invalid_dims", "videos need at least 2 frames");
    if (channels != 1 && channels != 3) throw Error("invalid_dims", "channels must be 1 or 3");
    if (height < Video::kMinSide || width < Video::kMinSide) throw Error("invalid_dims", "frames must be >= 8x8");
    if (square < 1 || square >= std::min(height, width)) throw Error("invalid_dims", "square does not fit in the frame");
    if (burst < 2 || burst > frames) throw Error("invalid_dims", "burst must be in [2, frames]");
    if (!(background >= 0.0 && background <= 1.0 && foreground >= 0.0 && foreground <= 1.0))
      throw Error("invalid_dims", "intensities must be in [0,1]");
    if (!(noise >= 0.0 && noise <= 1.0)) throw Error("invalid_dims", "noise must be in [0,1]");
  }
};

struct SyntheticClip {
  Video video;
  TokenSeq caption;
  std::string label;          // "left", "right", "up", "down" or "stays"
  std::size_t burst_start = 0;
  std::size_t burst_len = 0;
};

namespace detail {

inline void draw_square(Tensor& t, std::size_t frame, long top, long left, std::size_t side, double value) {
  const Shape& s = t.shape();
  for (long y = top; y < top + static_cast<long>(side); ++y)
    for (long x = left; x < left + static_cast<long>(side); ++x) {
      if (y < 0 || x < 0 || y >= static_cast<long>(s.height) || x >= static_cast<long>(s.width)) continue;
      for (std::size_t c = 0; c < s.channels; ++c)
        t.at(frame, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = value;
    }
}

}  // namespace detail

/// One clip. The square appears at the frame centre (plus a seeded jitter) on
/// frame `burst_start` and, if `moving`, advances `speed` pixels per frame in
/// `dir` until the burst ends, possibly leaving the frame. Starting at the
/// centre keeps the direction visible to an encoder that averages over time. Outside the burst frames show only background.
/// When dims.noise > 0, `noise_rng` supplies the sensor noise.
inline SyntheticClip make_clip(const VideoDims& dims, Direction dir, bool moving, std::size_t burst_start,
                               long jitter_y, long jitter_x, const TokenTable& table, Rng* noise_rng = nullptr) {
  Tensor t(Shape{dims.frames, dims.channels, dims.height, dims.width}, dims.background);
  const long cy = static_cast<long>(dims.height / 2) - static_cast<long>(dims.square / 2) + jitter_y;
  const long cx = static_cast<long>(dims.width / 2) - static_cast<long>(dims.square / 2) + jitter_x;
  static constexpr long dy[4] = {0, 0, -1, 1};
  static constexpr long dx[4] = {-1, 1, 0, 0};
  const auto di = static_cast<std::size_t>(dir);
  for (std::size_t i = 0; i < dims.burst; ++i) {
    const long step = moving ? static_cast<long>(i * dims.speed) : 0;
    detail::draw_square(t, burst_start + i, cy + dy[di] * step, cx + dx[di] * step, dims.square, dims.foreground);
  }
  if (dims.noise > 0.0) {
    if (!noise_rng) throw Error("invalid_dims", "noisy clips need a noise generator");
    for (double& v : t.values()) v = std::clamp(v + noise_rng->uniform(-dims.noise, dims.noise), 0.0, 1.0);
  }
  SyntheticClip clip;
  clip.video = Video(std::move(t));
  clip.label = moving ? to_string(dir) : "stays";
  clip.caption = table.encode(clip.label);
  clip.burst_start = burst_start;
  clip.burst_len = dims.burst;
  return clip;
}

/// Deterministic in `seed`. Directions cycle left/right/up/down so every
/// label is balanced; burst start and jitter are seeded.
inline std::vector<SyntheticClip> gen_synthetic_dataset(DatasetKind kind, std::size_t n, const VideoDims& dims,
                                                        std::uint64_t seed,
                                                        const TokenTable& table = default_token_table()) {
  dims.validate();
  Rng rng(seed);
  std::vector<SyntheticClip> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto dir = static_cast<Direction>(i % 4);
    bool moving = true;
    if (kind == DatasetKind::Static) moving = false;
    if (kind == DatasetKind::Mixed) moving = rng.uniform() < 0.8;
    const std::size_t start = rng.index(dims.frames - dims.burst + 1);
    const auto span = 2 * dims.jitter + 1;
    const long jy = static_cast<long>(rng.index(span)) - static_cast<long>(dims.jitter);
    const long jx = static_cast<long>(rng.index(span)) - static_cast<long>(dims.jitter);
    if (kind == DatasetKind::Static) {
      // A static clip keeps the square in every frame.
      VideoDims full = dims;
      full.burst = dims.frames;
      out.push_back(make_clip(full, dir, false, 0, jy, jx, table, &rng));
    } else {
      out.push_back(make_clip(dims, dir, moving, start, jy, jx, table, &rng));
    }
  }
  return out;
}

inline std::vector<TrainingExample> to_training_set(const std::vector<SyntheticClip>& clips) {
  std::vector<TrainingExample> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back({c.video, c.caption});
  return out;
}

}  // namespace fmm
