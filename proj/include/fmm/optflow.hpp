#pragma once

// Dense optical flow (Horn-Schunck) between adjacent frames and per-frame
// motion scores used to rank key frames.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fmm/common.hpp"
#include "fmm/videotensor.hpp"

namespace fmm {

/// Single-channel H x W image.
struct Plane {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  // Border-replicated access.
  double clamped(long y, long x) const {
    y = std::clamp<long>(y, 0, static_cast<long>(height) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(width) - 1);
    return data[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)];
  }
};

struct FlowField {
  Plane u;  // horizontal displacement, pixels/frame
  Plane v;  // vertical displacement, pixels/frame
};

struct FlowParams {
  double alpha = 10.0;  // smoothness weight, in 8-bit intensity units
  int iterations = 100;
};

/// One score per frame, max-normalized to [0,1] unless every score is 0.
struct FlowScores {
  std::vector<double> scores;
  std::size_t size() const { return scores.size(); }
};

/// BT.601 luma of frame t (or the single channel when C = 1).
inline Plane grayscale(const Tensor& x, std::size_t t) {
  const Shape& s = x.shape();
  Plane g(s.height, s.width);
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t xx = 0; xx < s.width; ++xx) {
      if (s.channels == 3)
        g.at(y, xx) = 0.299 * x.at(t, 0, y, xx) + 0.587 * x.at(t, 1, y, xx) + 0.114 * x.at(t, 2, y, xx);
      else
        g.at(y, xx) = x.at(t, 0, y, xx);
    }
  return g;
}

/// Horn-Schunck flow from `a` to `b` (both in [0,1]). Intensities are scaled
/// to 8-bit units so `alpha` keeps its conventional magnitude. Spatial
/// derivatives are 3-point central differences averaged over both frames.
inline FlowField estimate_flow(const Plane& a, const Plane& b, const FlowParams& params = {}) {
  if (a.height != b.height || a.width != b.width)
    throw Error("shape_mismatch", "flow frames must have identical dimensions");
  if (a.height == 0 || a.width == 0) throw Error("shape_mismatch", "empty flow frame");
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (!std::isfinite(a.data[i]) || !std::isfinite(b.data[i])) throw Error("non_finite", "non-finite flow input");

  const std::size_t h = a.height, w = a.width;
  Plane ix(h, w), iy(h, w), it(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const long ly = static_cast<long>(y), lx = static_cast<long>(x);
      const double gxa = 0.5 * (a.clamped(ly, lx + 1) - a.clamped(ly, lx - 1));
      const double gxb = 0.5 * (b.clamped(ly, lx + 1) - b.clamped(ly, lx - 1));
      const double gya = 0.5 * (a.clamped(ly + 1, lx) - a.clamped(ly - 1, lx));
      const double gyb = 0.5 * (b.clamped(ly + 1, lx) - b.clamped(ly - 1, lx));
      ix.at(y, x) = 255.0 * 0.5 * (gxa + gxb);
      iy.at(y, x) = 255.0 * 0.5 * (gya + gyb);
      it.at(y, x) = 255.0 * (b.at(y, x) - a.at(y, x));
    }

  const double alpha2 = params.alpha * params.alpha;
  FlowField f{Plane(h, w), Plane(h, w)};
  Plane ubar(h, w), vbar(h, w);
  auto neighbour_mean = [](const Plane& p, long y, long x) {
    return (p.clamped(y - 1, x) + p.clamped(y + 1, x) + p.clamped(y, x - 1) + p.clamped(y, x + 1)) / 6.0 +
           (p.clamped(y - 1, x - 1) + p.clamped(y - 1, x + 1) + p.clamped(y + 1, x - 1) +
            p.clamped(y + 1, x + 1)) / 12.0;
  };
  for (int iter = 0; iter < params.iterations; ++iter) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        ubar.at(y, x) = neighbour_mean(f.u, static_cast<long>(y), static_cast<long>(x));
        vbar.at(y, x) = neighbour_mean(f.v, static_cast<long>(y), static_cast<long>(x));
      }
    for (std::size_t i = 0; i < h * w; ++i) {
      const double gx = ix.data[i], gy = iy.data[i];
      const double t = (gx * ubar.data[i] + gy * vbar.data[i] + it.data[i]) / (alpha2 + gx * gx + gy * gy);
      f.u.data[i] = ubar.data[i] - gx * t;
      f.v.data[i] = vbar.data[i] - gy * t;
    }
  }
  return f;
}

/// Mean over pixels of sqrt(u^2 + v^2).
inline double flow_magnitude(const FlowField& f) {
  if (f.u.data.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < f.u.data.size(); ++i) sum += std::hypot(f.u.data[i], f.v.data[i]);
  return sum / static_cast<double>(f.u.data.size());
}

/// Flows between every pair of adjacent frames (T - 1 of them).
inline std::vector<FlowField> adjacent_flows(const Tensor& x, const FlowParams& params = {}) {
  const std::size_t frames = x.shape().frames;
  if (frames < 2) throw Error("too_few_frames", "flow scoring needs at least 2 frames");
  std::vector<FlowField> flows;
  flows.reserve(frames - 1);
  Plane prev = grayscale(x, 0);
  for (std::size_t t = 1; t < frames; ++t) {
    Plane next = grayscale(x, t);
    flows.push_back(estimate_flow(prev, next, params));
    prev = std::move(next);
  }
  return flows;
}

/// Frame i scores the mean magnitude of the flows touching it: the first and
/// last frames take their single adjacent flow, interior frames average the
/// incoming and outgoing flows.
inline FlowScores scores_from_transitions(const std::vector<double>& transitions) {
  const std::size_t frames = transitions.size() + 1;
  FlowScores out;
  out.scores.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    if (i == 0) out.scores[i] = transitions.front();
    else if (i == frames - 1) out.scores[i] = transitions.back();
    else out.scores[i] = 0.5 * (transitions[i - 1] + transitions[i]);
  }
  const double peak = *std::max_element(out.scores.begin(), out.scores.end());
  if (peak > 0.0)
    for (double& s : out.scores) s /= peak;
  return out;
}

inline FlowScores per_frame_flow_scores(const Tensor& x, const FlowParams& params = {}) {
  std::vector<double> transitions;
  for (const auto& f : adjacent_flows(x, params)) transitions.push_back(flow_magnitude(f));
  return scores_from_transitions(transitions);
}

inline FlowScores per_frame_flow_scores(const Video& x, const FlowParams& params = {}) {
  return per_frame_flow_scores(x.pixels(), params);
}

/// HSV visualization: hue is the motion direction atan2(v, u) in [0, 360),
/// value is the max-normalized magnitude, saturation is 1. Interleaved RGB.
inline std::vector<std::uint8_t> flow_to_color(const FlowField& f) {
  const std::size_t n = f.u.data.size();
  std::vector<double> mag(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mag[i] = std::hypot(f.u.data[i], f.v.data[i]);
    peak = std::max(peak, mag[i]);
  }
  std::vector<std::uint8_t> rgb(3 * n, 0);
  if (peak <= 0.0) return rgb;
  for (std::size_t i = 0; i < n; ++i) {
    double hue = std::atan2(f.v.data[i], f.u.data[i]) * 180.0 / 3.14159265358979323846;
    if (hue < 0.0) hue += 360.0;
    if (hue >= 360.0) hue -= 360.0;
    const double value = mag[i] / peak;
    const double sector = hue / 60.0;
    const int k = static_cast<int>(sector) % 6;
    const double frac = sector - std::floor(sector);
    const double p = 0.0, q = value * (1.0 - frac), t = value * frac;
    double r = 0, g = 0, b = 0;
    switch (k) {
      case 0: r = value, g = t, b = p; break;
      case 1: r = q, g = value, b = p; break;
      case 2: r = p, g = value, b = t; break;
      case 3: r = p, g = q, b = value; break;
      case 4: r = t, g = p, b = value; break;
      default: r = value, g = p, b = q; break;
    }
    rgb[3 * i] = static_cast<std::uint8_t>(std::lround(r * 255.0));
    rgb[3 * i + 1] = static_cast<std::uint8_t>(std::lround(g * 255.0));
    rgb[3 * i + 2] = static_cast<std::uint8_t>(std::lround(b * 255.0));
  }
  return rgb;
}

/// Hue in degrees of a single flow vector, as used by flow_to_color.
inline double flow_hue_degrees(double u, double v) {
  double hue = std::atan2(v, u) * 180.0 / 3.14159265358979323846;
  return hue < 0.0 ? hue + 360.0 : hue;
}

}  // namespace fmm
