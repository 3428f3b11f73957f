#pragma once

// Flow-masked multi-modal attack: MSE losses on video features and on the
// decoder hidden state, the untargeted and targeted objectives (l2,1 penalty
// on the masked perturbation), and the signed-gradient PGD loop.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "fmm/common.hpp"
#include "fmm/optflow.hpp"
#include "fmm/surrogate.hpp"
#include "fmm/tmask.hpp"
#include "fmm/videotensor.hpp"

namespace fmm {

struct AttackConfig {
  double delta_max = 16.0;   // 8-bit units
  double step_alpha = 1.0;   // 8-bit units per iteration
  std::size_t iters = 1000;
  double lambda1 = 2.0;
  double lambda2 = 1.0;
  double lambda3 = 3.0;
  MaskKind mask_kind = MaskKind::Flow;
  double sparsity = 0.0;
  std::size_t seq_start = 0;  // first frame of the sequence mask
  bool targeted = false;
  std::uint64_t seed = 0;
  double init_radius = -1.0;  // random-start radius, 8-bit units; negative = delta_max
  FlowParams flow{};

  double start_radius() const { return init_radius < 0.0 ? delta_max : std::min(init_radius, delta_max); }

  /// Full invariant check: positive budget, at least one iteration,
  /// non-negative weights and at least one active feature term.
  void validate() const {
    validate_numeric();
    if (lambda2 == 0.0 && lambda3 == 0.0)
      throw Error("invalid_config", "lambda2 and lambda3 cannot both be zero");
  }

  void validate_numeric() const {
    if (!(delta_max > 0.0)) throw Error("invalid_config", "delta_max must be positive");
    if (!(step_alpha > 0.0)) throw Error("invalid_config", "step size must be positive");
    if (iters < 1) throw Error("invalid_config", "iterations must be >= 1");
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw Error("invalid_config", "loss weights must be >= 0");
    if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw Error("invalid_config", "sparsity must be in [0,1]");
  }
};

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline double mse(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw Error("shape_mismatch", std::string(what) + ": dimension mismatch");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

// d/d(b) of mse(a, b).
inline std::vector<double> mse_grad(std::span<const double> a, std::span<const double> b, double weight) {
  std::vector<double> g(b.size());
  const double scale = 2.0 * weight / static_cast<double>(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) g[i] = scale * (b[i] - a[i]);
  return g;
}

}  // namespace detail

/// Mean squared distance between clean and adversarial video features.
inline double loss_video(const FeatureVec& q, const FeatureVec& q_hat) {
  return detail::mse(q.values, q_hat.values, "loss_video");
}

/// Mean squared distance between clean and adversarial hidden states.
inline double loss_llm(const HiddenState& a, const HiddenState& a_hat) {
  return detail::mse(a.values, a_hat.values, "loss_llm");
}

// ---------------------------------------------------------------------------
// Objectives

struct ObjectiveEval {
  double value = 0.0;
  double l21 = 0.0;
  double loss_video = 0.0;
  double loss_llm = 0.0;
  Tensor grad;  // d value / d delta, zero on unselected frames
  TokenSeq output;
  FeatureVec feature;
  HiddenState hidden;
};

/// The attack objective with the reference side (clean video, or target video
/// for the targeted variant) evaluated once at construction.
///
///   untargeted: l1 * |M.delta|_{2,1} - l2 * lv(q_ref, q(x + M.delta)) - l3 * lllm(a_ref, a(x + M.delta))
///   targeted:   l1 * |M.delta|_{2,1} + l2 * lv(q_ref, ...)             + l3 * lllm(a_ref, ...)
class Objective {
 public:
  Objective(const SurrogateModel& model, const Tensor& x, const TokenSeq& prompt, const AttackConfig& cfg,
            const Tensor* reference = nullptr)
      : model_(model), x_(x), prompt_(prompt), cfg_(cfg) {
    const Tensor& ref = reference ? *reference : x;
    ref_feature_ = encode_video(model_, ref);
    auto [tokens, hidden] = generate(model_, prompt_, ref_feature_);
    ref_output_ = std::move(tokens);
    ref_hidden_ = std::move(hidden);
  }

  const FeatureVec& reference_feature() const { return ref_feature_; }
  const HiddenState& reference_hidden() const { return ref_hidden_; }
  const TokenSeq& reference_output() const { return ref_output_; }

  ObjectiveEval operator()(const Tensor& delta, const TemporalMask& mask) const {
    require_same_shape(x_.shape(), delta.shape(), "objective");
    if (mask.frames() != x_.shape().frames) throw Error("shape_mismatch", "mask length does not match video");
    Tensor masked(delta.shape());
    Tensor x_adv = x_;
    for (std::size_t t = 0; t < delta.shape().frames; ++t) {
      if (!mask[t]) continue;
      auto src = delta.frame(t);
      auto dst = masked.frame(t);
      auto xa = x_adv.frame(t);
      for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = src[i];
        xa[i] += src[i];
      }
    }
    const double sign = cfg_.targeted ? 1.0 : -1.0;
    const double l2 = cfg_.lambda2, l3 = cfg_.lambda3;
    ObjectiveEval out;
    auto loss = [&](const FeatureVec& q, const HiddenState& a) {
      LossEval le;
      out.loss_video = loss_video(ref_feature_, q);
      out.loss_llm = loss_llm(ref_hidden_, a);
      le.value = sign * (l2 * out.loss_video + l3 * out.loss_llm);
      if (l2 != 0.0) le.d_feature = detail::mse_grad(ref_feature_.values, q.values, sign * l2);
      if (l3 != 0.0) le.d_hidden = detail::mse_grad(ref_hidden_.values, a.values, sign * l3);
      return le;
    };
    PixelGradient pg = grad_wrt_pixels(model_, x_adv, prompt_, loss);
    out.l21 = l21_norm(masked);
    out.value = cfg_.lambda1 * out.l21 + pg.value;
    out.grad = std::move(pg.grad);
    if (cfg_.lambda1 != 0.0) {
      const Tensor sub = l21_subgradient(masked);
      for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += cfg_.lambda1 * sub[i];
    }
    for (std::size_t t = 0; t < delta.shape().frames; ++t)
      if (!mask[t])
        for (double& g : out.grad.frame(t)) g = 0.0;
    out.output = std::move(pg.output);
    out.feature = std::move(pg.feature);
    out.hidden = std::move(pg.hidden);
    return out;
  }

 private:
  // The model and clean video must outlive the objective.
  const SurrogateModel& model_;
  const Tensor& x_;
  TokenSeq prompt_;
  AttackConfig cfg_;
  FeatureVec ref_feature_;
  HiddenState ref_hidden_;
  TokenSeq ref_output_;
};

inline ObjectiveEval objective_untargeted(const SurrogateModel& model, const Tensor& x, const TokenSeq& prompt,
                                          const Tensor& delta, const TemporalMask& mask, AttackConfig cfg) {
  cfg.targeted = false;
  return Objective(model, x, prompt, cfg)(delta, mask);
}

inline ObjectiveEval objective_targeted(const SurrogateModel& model, const Tensor& x, const Tensor& x_target,
                                        const TokenSeq& prompt, const Tensor& delta, const TemporalMask& mask,
                                        AttackConfig cfg) {
  cfg.targeted = true;
  return Objective(model, x, prompt, cfg, &x_target)(delta, mask);
}

// ---------------------------------------------------------------------------
// PGD loop

struct TraceRow {
  double l21 = 0.0;
  double loss_video = 0.0;
  double loss_llm = 0.0;
  double total = 0.0;
};

struct AttackResult {
  Perturbation perturbation;
  Video adversarial;
  TemporalMask mask;
  std::vector<TraceRow> trace;
  TokenSeq clean_output;
  TokenSeq adv_output;
  FeatureVec clean_feature;
  FeatureVec adv_feature;
  HiddenState clean_hidden;
  HiddenState adv_hidden;
  double delta_bar = 0.0;  // mean |x_adv - x| over selected frames, 8-bit units
};

/// Builds the temporal mask requested by `cfg` for video x.
inline TemporalMask build_mask(const AttackConfig& cfg, const Tensor& x) {
  const std::size_t frames = x.shape().frames;
  switch (cfg.mask_kind) {
    case MaskKind::Flow: return flow_mask(per_frame_flow_scores(x, cfg.flow), cfg.sparsity);
    case MaskKind::Sequence: return sequence_mask(frames, cfg.sparsity, cfg.seq_start);
    case MaskKind::Random: return random_mask(frames, cfg.sparsity, mix_seed(cfg.seed, 0x6d61736b));
    case MaskKind::Full: return TemporalMask::full(frames);
  }
  throw Error("invalid_mask", "unknown mask kind");
}

namespace detail {

// Budget box, pixel box ([0,1] after adding x) and mask, in that order.
inline void project_delta(Tensor& delta, const Tensor& x, const TemporalMask& mask, double bound) {
  for (std::size_t t = 0; t < delta.shape().frames; ++t) {
    auto d = delta.frame(t);
    if (!mask[t]) {
      std::fill(d.begin(), d.end(), 0.0);
      continue;
    }
    auto xs = x.frame(t);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = std::clamp(d[i], -bound, bound);
      // Re-clamp: the subtraction can overshoot the budget by one ulp.
      d[i] = std::clamp(std::clamp(xs[i] + v, 0.0, 1.0) - xs[i], -bound, bound);
    }
  }
}

inline double signum(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Signed-gradient PGD on the configured objective with the mask fixed up
/// front. The untargeted objective is stationary at delta = 0 whenever a
/// feature term is active, so that case starts from a seeded uniform point in
/// the start_radius() box on the selected frames; otherwise delta starts at 0.
inline AttackResult fmm_attack(const SurrogateModel& model, const Video& x, const TokenSeq& prompt,
                               const AttackConfig& cfg, const std::optional<Video>& x_target = std::nullopt) {
  cfg.validate_numeric();
  if (cfg.targeted != x_target.has_value())
    throw Error("invalid_config", "a target video must be given exactly when the attack is targeted");

  AttackResult res;
  res.mask = build_mask(cfg, x.pixels());
  const Objective objective(model, x.pixels(), prompt, cfg, x_target ? &x_target->pixels() : nullptr);

  const double bound = cfg.delta_max / 255.0;
  const double step = cfg.step_alpha / 255.0;
  Tensor delta(x.shape());
  if (!cfg.targeted && (cfg.lambda2 > 0.0 || cfg.lambda3 > 0.0)) {
    Rng rng(mix_seed(cfg.seed, 0x696e6974));
    const double r0 = cfg.start_radius() / 255.0;
    for (double& v : delta.values()) v = rng.uniform(-r0, r0);
  }
  detail::project_delta(delta, x.pixels(), res.mask, bound);

  res.trace.reserve(cfg.iters);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const ObjectiveEval ev = objective(delta, res.mask);
    res.trace.push_back({ev.l21, ev.loss_video, ev.loss_llm, ev.value});
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= step * detail::signum(ev.grad[i]);
    detail::project_delta(delta, x.pixels(), res.mask, bound);
  }

  res.adversarial = Video(masked_sum_clamped(x.pixels(), delta, res.mask));
  res.perturbation = Perturbation(std::move(delta), cfg.delta_max);
  res.delta_bar = mean_abs_perturbation(x, res.adversarial, res.mask);

  res.clean_feature = encode_video(model, x);
  std::tie(res.clean_output, res.clean_hidden) = generate(model, prompt, res.clean_feature);
  res.adv_feature = encode_video(model, res.adversarial);
  std::tie(res.adv_output, res.adv_hidden) = generate(model, prompt, res.adv_feature);
  return res;
}

}  // namespace fmm
