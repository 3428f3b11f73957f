#pragma once

// Temporal masks: flow-ranked key frames plus the sequence and random
// baselines, and sparsity accounting (fraction of untouched frames).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fmm/common.hpp"
#include "fmm/optflow.hpp"
#include "fmm/temporal_mask.hpp"

namespace fmm {

/// Number of attacked frames for a sparsity level: round((1 - sparsity) * T).
inline std::size_t selected_count(std::size_t frames, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw Error("invalid_sparsity", "sparsity must be in [0,1]");
  const auto k = static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(frames)));
  return std::min(k, frames);
}

inline double sparsity_of(const TemporalMask& m) {
  if (m.frames() == 0) return 1.0;
  return 1.0 - static_cast<double>(m.count()) / static_cast<double>(m.frames());
}

/// Top-K frames by score; ties go to the lower frame index.
inline TemporalMask flow_mask(const FlowScores& scores, double sparsity) {
  const std::size_t frames = scores.size();
  if (frames == 0) throw Error("empty_scores", "flow_mask needs at least one score");
  const std::size_t k = selected_count(frames, sparsity);
  std::vector<std::size_t> order(frames);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores.scores[a] > scores.scores[b]; });
  std::vector<bool> sel(frames, false);
  for (std::size_t i = 0; i < k; ++i) sel[order[i]] = true;
  return TemporalMask(std::move(sel));
}

/// Contiguous window [start, start + K).
inline TemporalMask sequence_mask(std::size_t frames, double sparsity, std::size_t start) {
  const std::size_t k = selected_count(frames, sparsity);
  if (start + k > frames)
    throw Error("window_out_of_range", "sequence window [" + std::to_string(start) + ", " +
                                           std::to_string(start + k) + ") exceeds " + std::to_string(frames) +
                                           " frames");
  std::vector<bool> sel(frames, false);
  for (std::size_t t = start; t < start + k; ++t) sel[t] = true;
  return TemporalMask(std::move(sel));
}

/// K distinct frames drawn uniformly without replacement (partial
/// Fisher-Yates), deterministic in `seed`.
inline TemporalMask random_mask(std::size_t frames, double sparsity, std::uint64_t seed) {
  if (frames == 0) throw Error("invalid_frames", "random_mask needs at least one frame");
  const std::size_t k = selected_count(frames, sparsity);
  std::vector<std::size_t> idx(frames);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(frames - i)]);
  std::vector<bool> sel(frames, false);
  for (std::size_t i = 0; i < k; ++i) sel[idx[i]] = true;
  return TemporalMask(std::move(sel));
}

enum class MaskKind { Flow, Sequence, Random, Full };

inline std::string to_string(MaskKind k) {
  switch (k) {
    case MaskKind::Flow: return "flow";
    case MaskKind::Sequence: return "seq";
    case MaskKind::Random: return "random";
    case MaskKind::Full: return "full";
  }
  return "unknown";
}

inline MaskKind mask_kind_from_string(const std::string& s) {
  if (s == "flow") return MaskKind::Flow;
  if (s == "seq" || s == "sequence") return MaskKind::Sequence;
  if (s == "random") return MaskKind::Random;
  if (s == "full") return MaskKind::Full;
  throw Error("invalid_mask", "unknown mask kind '" + s + "'");
}

}  // namespace fmm
