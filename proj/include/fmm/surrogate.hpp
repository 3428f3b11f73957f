#pragma once

// A small white-box video captioner: a convolutional frame encoder with
// temporal average pooling (video features), followed by a recurrent decoder
// that reads the prompt, the projected video feature and then greedily emits
// tokens. All gradients are hand-written reverse mode.

#include <algorithm>
#include <cctype>
#include <concepts>
#include <cstring>
#include <type_traits>
#include <utility>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fmm/common.hpp"
#include "fmm/videotensor.hpp"

namespace fmm {

using Token = std::uint32_t;

inline constexpr Token kBos = 0;
inline constexpr Token kEos = 1;

struct TokenSeq {
  std::vector<Token> tokens;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;

  /// Tokens with BOS/EOS removed.
  std::vector<Token> content() const {
    std::vector<Token> out;
    for (Token t : tokens)
      if (t != kBos && t != kEos) out.push_back(t);
    return out;
  }
};

struct FeatureVec {
  std::vector<double> values;
  friend bool operator==(const FeatureVec&, const FeatureVec&) = default;
};

struct HiddenState {
  std::vector<double> values;
  friend bool operator==(const HiddenState&, const HiddenState&) = default;
};

/// Fixed token <-> string table. Line number in the file is the token id.
class TokenTable {
 public:
  TokenTable() = default;
  explicit TokenTable(std::vector<std::string> words) : words_(std::move(words)) {}

  static TokenTable load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("missing_path", "cannot open token table " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      words.push_back(line);
    }
    return TokenTable(std::move(words));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("unwritable_path", "cannot write " + path.string());
    for (const auto& w : words_) os << w << "\n";
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(Token t) const { return words_.at(t); }

  Token id(const std::string& w) const {
    auto it = std::find(words_.begin(), words_.end(), w);
    if (it == words_.end()) throw Error("unknown_token", "token '" + w + "' is not in the table");
    return static_cast<Token>(it - words_.begin());
  }

  /// Whitespace-separated words to ids.
  TokenSeq encode(const std::string& text) const {
    TokenSeq out;
    std::string w;
    for (char c : text + " ") {
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!w.empty()) out.tokens.push_back(id(w));
        w.clear();
      } else {
        w.push_back(c);
      }
    }
    return out;
  }

  /// Content tokens joined by spaces (BOS/EOS dropped). Ids outside the
  /// table render as `<id>`.
  std::string render(const TokenSeq& seq) const {
    std::string out;
    for (Token t : seq.content()) {
      if (!out.empty()) out += ' ';
      out += t < words_.size() ? words_[t] : "<" + std::to_string(t) + ">";
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
};

struct ModelDims {
  std::size_t kernel = 3;     // k
  std::size_t channels = 1;   // C
  std::size_t filters = 6;    // d, number of conv filters
  std::size_t d_model = 8;
  std::size_t vocab = 16;     // V
  std::size_t max_len = 5;    // L
  std::size_t pool_grid = 1;  // spatial pooling cells per side (1 = global average)
  double input_mean = 0.0;    // frames enter the conv as (x - input_mean) / input_std
  double input_std = 1.0;

  std::size_t feature_dim() const { return filters * pool_grid * pool_grid; }
  friend bool operator==(const ModelDims&, const ModelDims&) = default;

  void validate() const {
    if (kernel < 1) throw Error("invalid_dims", "kernel size must be >= 1");
    if (channels != 1 && channels != 3) throw Error("invalid_dims", "channels must be 1 or 3");
    if (filters < 1 || d_model < 1) throw Error("invalid_dims", "filters and d_model must be >= 1");
    if (vocab < 4) throw Error("invalid_dims", "vocabulary needs BOS, EOS and at least 2 content tokens (V >= 4)");
    if (max_len < 1) throw Error("invalid_dims", "max output length must be >= 1");
    if (pool_grid < 1) throw Error("invalid_dims", "pool grid must be >= 1");
    if (!std::isfinite(input_mean) || !(input_std > 0.0 && std::isfinite(input_std)))
      throw Error("invalid_dims", "input normalization needs a finite mean and a positive std");
  }
};

/// Parameter blocks, in serialization order. Also used for gradients.
struct ModelParams {
  std::vector<double> conv_w;  // [d][C][k][k]
  std::vector<double> conv_b;  // [d]
  std::vector<double> proj;    // [feature_dim][d_model]
  std::vector<double> embed;   // [V][d_model]
  std::vector<double> w_in;    // [d_model][d_model], row = output unit
  std::vector<double> w_hid;   // [d_model][d_model]
  std::vector<double> b_cell;  // [d_model]
  std::vector<double> head;    // [d_model][V]

  static ModelParams zeros(const ModelDims& d) {
    ModelParams p;
    p.conv_w.assign(d.filters * d.channels * d.kernel * d.kernel, 0.0);
    p.conv_b.assign(d.filters, 0.0);
    p.proj.assign(d.feature_dim() * d.d_model, 0.0);
    p.embed.assign(d.vocab * d.d_model, 0.0);
    p.w_in.assign(d.d_model * d.d_model, 0.0);
    p.w_hid.assign(d.d_model * d.d_model, 0.0);
    p.b_cell.assign(d.d_model, 0.0);
    p.head.assign(d.d_model * d.vocab, 0.0);
    return p;
  }

  std::array<std::vector<double>*, 8> blocks() { return {&conv_w, &conv_b, &proj, &embed, &w_in, &w_hid, &b_cell, &head}; }
  std::array<const std::vector<double>*, 8> blocks() const {
    return {&conv_w, &conv_b, &proj, &embed, &w_in, &w_hid, &b_cell, &head};
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct SurrogateModel {
  ModelDims dims;
  ModelParams params;
  std::uint64_t seed = 0;

  friend bool operator==(const SurrogateModel&, const SurrogateModel&) = default;
};

/// Seeded uniform(-scale/sqrt(fan_in), +scale/sqrt(fan_in)) per block.
inline SurrogateModel init_model(std::uint64_t seed, const ModelDims& dims, double scale = 0.5) {
  dims.validate();
  if (!(scale > 0.0 && std::isfinite(scale))) throw Error("invalid_dims", "init scale must be positive");
  SurrogateModel m{dims, ModelParams::zeros(dims), seed};
  Rng rng(seed);
  const double conv_fan = static_cast<double>(dims.channels * dims.kernel * dims.kernel);
  const double fans[8] = {conv_fan,
                          conv_fan,
                          static_cast<double>(dims.feature_dim()),
                          1.0,
                          static_cast<double>(dims.d_model),
                          static_cast<double>(dims.d_model),
                          static_cast<double>(dims.d_model),
                          static_cast<double>(dims.d_model)};
  auto blocks = m.params.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const double r = scale / std::sqrt(fans[b]);
    for (double& w : *blocks[b]) w = rng.uniform(-r, r);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Frame encoder

struct EncoderTrace {
  FeatureVec feature;
  std::vector<double> pre;  // conv pre-activations [T][d][Ho][Wo]
  std::size_t out_h = 0, out_w = 0;
};

namespace detail {

inline std::size_t cell_begin(std::size_t cell, std::size_t extent, std::size_t grid) { return cell * extent / grid; }

inline void check_encoder_input(const ModelDims& d, const Shape& s) {
  if (s.channels != d.channels)
    throw Error("shape_mismatch", "video has " + std::to_string(s.channels) + " channels, model expects " +
                                      std::to_string(d.channels));
  if (s.height < d.kernel || s.width < d.kernel)
    throw Error("frame_too_small", "frame " + to_string(s) + " is smaller than the conv kernel");
  if (s.height - d.kernel + 1 < d.pool_grid || s.width - d.kernel + 1 < d.pool_grid)
    throw Error("frame_too_small", "frame too small for the pooling grid");
  if (s.frames < 1) throw Error("too_few_frames", "video has no frames");
}

}  // namespace detail

/// Per-pixel normalization, valid convolution, ReLU, average pooling over a
/// pool_grid x pool_grid partition of each frame, then the mean over frames.
inline EncoderTrace encode_trace(const SurrogateModel& m, const Tensor& x) {
  const ModelDims& d = m.dims;
  const Shape& s = x.shape();
  detail::check_encoder_input(d, s);
  const std::size_t k = d.kernel, ho = s.height - k + 1, wo = s.width - k + 1, g = d.pool_grid;
  EncoderTrace tr;
  tr.out_h = ho;
  tr.out_w = wo;
  tr.pre.assign(s.frames * d.filters * ho * wo, 0.0);
  tr.feature.values.assign(d.feature_dim(), 0.0);
  const auto& w = m.params.conv_w;
  const double mu = d.input_mean, inv_std = 1.0 / d.input_std;
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t f = 0; f < d.filters; ++f) {
      double* z = tr.pre.data() + (t * d.filters + f) * ho * wo;
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double acc = m.params.conv_b[f];
          for (std::size_t c = 0; c < d.channels; ++c)
            for (std::size_t u = 0; u < k; ++u) {
              const double* wrow = w.data() + ((f * d.channels + c) * k + u) * k;
              for (std::size_t v = 0; v < k; ++v) acc += wrow[v] * ((x.at(t, c, i + u, j + v) - mu) * inv_std);
            }
          z[i * wo + j] = acc;
        }
      for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
          const std::size_t r0 = detail::cell_begin(gy, ho, g), r1 = detail::cell_begin(gy + 1, ho, g);
          const std::size_t c0 = detail::cell_begin(gx, wo, g), c1 = detail::cell_begin(gx + 1, wo, g);
          double sum = 0.0;
          for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = c0; j < c1; ++j) sum += std::max(0.0, z[i * wo + j]);
          tr.feature.values[(f * g + gy) * g + gx] += sum / static_cast<double>((r1 - r0) * (c1 - c0));
        }
    }
  for (double& q : tr.feature.values) q /= static_cast<double>(s.frames);
  return tr;
}

inline FeatureVec encode_video(const SurrogateModel& m, const Tensor& x) { return encode_trace(m, x).feature; }
inline FeatureVec encode_video(const SurrogateModel& m, const Video& x) { return encode_video(m, x.pixels()); }

/// Back-propagates dL/dfeature through the encoder. Accumulates into
/// `d_pixels` (when non-null) and into conv gradients of `d_params` (when
/// non-null).
inline void encode_backward(const SurrogateModel& m, const Tensor& x, const EncoderTrace& tr,
                            std::span<const double> d_feature, Tensor* d_pixels, ModelParams* d_params) {
  const ModelDims& d = m.dims;
  const Shape& s = x.shape();
  const std::size_t k = d.kernel, ho = tr.out_h, wo = tr.out_w, g = d.pool_grid;
  const auto& w = m.params.conv_w;
  const double mu = d.input_mean, inv_std = 1.0 / d.input_std;
  std::vector<double> dz(ho * wo);
  for (std::size_t f = 0; f < d.filters; ++f) {
    // Pooling weight of every output position (identical across frames).
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        const std::size_t r0 = detail::cell_begin(gy, ho, g), r1 = detail::cell_begin(gy + 1, ho, g);
        const std::size_t c0 = detail::cell_begin(gx, wo, g), c1 = detail::cell_begin(gx + 1, wo, g);
        const double scale = d_feature[(f * g + gy) * g + gx] /
                             (static_cast<double>(s.frames) * static_cast<double>((r1 - r0) * (c1 - c0)));
        for (std::size_t i = r0; i < r1; ++i)
          for (std::size_t j = c0; j < c1; ++j) dz[i * wo + j] = scale;
      }
    for (std::size_t t = 0; t < s.frames; ++t) {
      const double* z = tr.pre.data() + (t * d.filters + f) * ho * wo;
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          if (z[i * wo + j] <= 0.0) continue;
          const double g_out = dz[i * wo + j];
          if (g_out == 0.0) continue;
          if (d_params) d_params->conv_b[f] += g_out;
          for (std::size_t c = 0; c < d.channels; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const std::size_t widx = ((f * d.channels + c) * k + u) * k + v;
                if (d_pixels) d_pixels->at(t, c, i + u, j + v) += g_out * w[widx] * inv_std;
                if (d_params) d_params->conv_w[widx] += g_out * ((x.at(t, c, i + u, j + v) - mu) * inv_std);
              }
        }
    }
  }
}

/// Smallest |pre-activation| among conv outputs whose receptive field covers
/// pixel (t, c, y, x). Finite-difference checks use it to avoid ReLU kinks.
inline double relu_margin(const SurrogateModel& m, const EncoderTrace& tr, std::size_t t, std::size_t y,
                          std::size_t x) {
  const ModelDims& d = m.dims;
  const std::size_t k = d.kernel, ho = tr.out_h, wo = tr.out_w;
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < d.filters; ++f)
    for (std::size_t u = 0; u < k; ++u)
      for (std::size_t v = 0; v < k; ++v) {
        if (y < u || x < v) continue;
        const std::size_t i = y - u, j = x - v;
        if (i >= ho || j >= wo) continue;
        margin = std::min(margin, std::abs(tr.pre[((t * d.filters + f) * ho + i) * wo + j]));
      }
  return margin;
}

// ---------------------------------------------------------------------------
// Recurrent decoder

/// One recurrent step h = tanh(W_in x + W_hid h_prev + b). `token` is the
/// input token id, or -1 when the input is the projected video feature.
struct DecoderStep {
  long token = -1;
  std::vector<double> input;
  std::vector<double> h_prev;
  std::vector<double> h;
  bool emits = false;
};

struct DecoderTrace {
  std::vector<DecoderStep> steps;
  TokenSeq output;
  HiddenState hidden;  // mean of h over emitting steps
};

namespace detail {

inline std::vector<double> cell_forward(const SurrogateModel& m, std::span<const double> in,
                                        std::span<const double> h_prev) {
  const std::size_t n = m.dims.d_model;
  std::vector<double> h(n);
  for (std::size_t r = 0; r < n; ++r) {
    double a = m.params.b_cell[r];
    const double* wi = m.params.w_in.data() + r * n;
    const double* wh = m.params.w_hid.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) a += wi[c] * in[c] + wh[c] * h_prev[c];
    h[r] = std::tanh(a);
  }
  return h;
}

inline std::vector<double> embedding(const SurrogateModel& m, Token t) {
  const std::size_t n = m.dims.d_model;
  if (t >= m.dims.vocab) throw Error("invalid_token", "token id " + std::to_string(t) + " outside vocabulary");
  return {m.params.embed.begin() + static_cast<long>(t * n), m.params.embed.begin() + static_cast<long>((t + 1) * n)};
}

inline std::vector<double> project(const SurrogateModel& m, const FeatureVec& q) {
  const std::size_t n = m.dims.d_model, fd = m.dims.feature_dim();
  if (q.values.size() != fd) throw Error("shape_mismatch", "feature dimension does not match the model");
  std::vector<double> p(n, 0.0);
  for (std::size_t f = 0; f < fd; ++f)
    for (std::size_t j = 0; j < n; ++j) p[j] += q.values[f] * m.params.proj[f * n + j];
  return p;
}

inline std::vector<double> logits(const SurrogateModel& m, std::span<const double> h) {
  const std::size_t n = m.dims.d_model, vocab = m.dims.vocab;
  std::vector<double> out(vocab, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t v = 0; v < vocab; ++v) out[v] += h[i] * m.params.head[i * vocab + v];
  return out;
}

inline void push_step(const SurrogateModel& m, DecoderTrace& tr, long token, std::vector<double> input, bool emits) {
  std::vector<double> h_prev = tr.steps.empty() ? std::vector<double>(m.dims.d_model, 0.0) : tr.steps.back().h;
  std::vector<double> h = cell_forward(m, input, h_prev);
  tr.steps.push_back({token, std::move(input), std::move(h_prev), std::move(h), emits});
}

// Prompt tokens, then the projected video feature.
inline DecoderTrace run_prefix(const SurrogateModel& m, const TokenSeq& prompt, const FeatureVec& q) {
  if (prompt.empty()) throw Error("empty_prompt", "prompt must contain at least one token");
  DecoderTrace tr;
  for (Token t : prompt.tokens) push_step(m, tr, static_cast<long>(t), embedding(m, t), false);
  push_step(m, tr, -1, project(m, q), false);
  return tr;
}

inline void finish_hidden(const SurrogateModel& m, DecoderTrace& tr) {
  std::vector<double> mean(m.dims.d_model, 0.0);
  std::size_t count = 0;
  for (const auto& s : tr.steps)
    if (s.emits) {
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += s.h[i];
      ++count;
    }
  if (count > 0)
    for (double& v : mean) v /= static_cast<double>(count);
  tr.hidden.values = std::move(mean);
}

}  // namespace detail

/// Greedy decoding (argmax, lowest id on ties) from BOS until EOS or L
/// tokens. The emitted EOS, if any, is kept as the last token.
inline DecoderTrace generate_trace(const SurrogateModel& m, const TokenSeq& prompt, const FeatureVec& q) {
  DecoderTrace tr = detail::run_prefix(m, prompt, q);
  Token input = kBos;
  for (std::size_t pos = 0; pos < m.dims.max_len; ++pos) {
    detail::push_step(m, tr, static_cast<long>(input), detail::embedding(m, input), true);
    const auto lg = detail::logits(m, tr.steps.back().h);
    const Token next = static_cast<Token>(std::max_element(lg.begin(), lg.end()) - lg.begin());
    tr.output.tokens.push_back(next);
    if (next == kEos) break;
    input = next;
  }
  detail::finish_hidden(m, tr);
  return tr;
}

inline std::pair<TokenSeq, HiddenState> generate(const SurrogateModel& m, const TokenSeq& prompt,
                                                 const FeatureVec& q) {
  auto tr = generate_trace(m, prompt, q);
  return {std::move(tr.output), std::move(tr.hidden)};
}

/// Decoder pass with the emitted sequence forced to `tokens` (teacher
/// forcing): inputs are BOS, tokens[0], ..., tokens[n-2].
inline DecoderTrace forced_trace(const SurrogateModel& m, const TokenSeq& prompt, const FeatureVec& q,
                                 const TokenSeq& tokens) {
  DecoderTrace tr = detail::run_prefix(m, prompt, q);
  Token input = kBos;
  for (Token t : tokens.tokens) {
    detail::push_step(m, tr, static_cast<long>(input), detail::embedding(m, input), true);
    input = t;
  }
  tr.output = tokens;
  detail::finish_hidden(m, tr);
  return tr;
}

inline HiddenState hidden_given_tokens(const SurrogateModel& m, const TokenSeq& prompt, const FeatureVec& q,
                                       const TokenSeq& tokens) {
  return forced_trace(m, prompt, q, tokens).hidden;
}

/// Back-propagation through time. `d_h[s]` is the external gradient on the
/// hidden output of step s. Returns dL/d(projected feature); parameter
/// gradients accumulate into `d_params` when non-null.
inline std::vector<double> decoder_backward(const SurrogateModel& m, const DecoderTrace& tr,
                                            const std::vector<std::vector<double>>& d_h, ModelParams* d_params) {
  const std::size_t n = m.dims.d_model;
  std::vector<double> carry(n, 0.0), d_proj_in(n, 0.0), da(n);
  for (std::size_t s = tr.steps.size(); s-- > 0;) {
    const DecoderStep& st = tr.steps[s];
    for (std::size_t r = 0; r < n; ++r) {
      const double dh = carry[r] + (d_h[s].empty() ? 0.0 : d_h[s][r]);
      da[r] = dh * (1.0 - st.h[r] * st.h[r]);
    }
    std::vector<double> d_in(n, 0.0);
    std::fill(carry.begin(), carry.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      if (da[r] == 0.0) continue;
      const double* wi = m.params.w_in.data() + r * n;
      const double* wh = m.params.w_hid.data() + r * n;
      for (std::size_t c = 0; c < n; ++c) {
        d_in[c] += wi[c] * da[r];
        carry[c] += wh[c] * da[r];
      }
      if (d_params) {
        d_params->b_cell[r] += da[r];
        for (std::size_t c = 0; c < n; ++c) {
          d_params->w_in[r * n + c] += da[r] * st.input[c];
          d_params->w_hid[r * n + c] += da[r] * st.h_prev[c];
        }
      }
    }
    if (st.token < 0) {
      for (std::size_t c = 0; c < n; ++c) d_proj_in[c] += d_in[c];
    } else if (d_params) {
      const std::size_t t = static_cast<std::size_t>(st.token);
      for (std::size_t c = 0; c < n; ++c) d_params->embed[t * n + c] += d_in[c];
    }
  }
  return d_proj_in;
}

/// dL/dq from dL/dp where p = proj^T q; accumulates the projector gradient.
inline std::vector<double> project_backward(const SurrogateModel& m, const FeatureVec& q,
                                            std::span<const double> d_p, ModelParams* d_params) {
  const std::size_t n = m.dims.d_model, fd = m.dims.feature_dim();
  std::vector<double> dq(fd, 0.0);
  for (std::size_t f = 0; f < fd; ++f)
    for (std::size_t j = 0; j < n; ++j) {
      dq[f] += m.params.proj[f * n + j] * d_p[j];
      if (d_params) d_params->proj[f * n + j] += q.values[f] * d_p[j];
    }
  return dq;
}

// ---------------------------------------------------------------------------
// Pixel gradients

/// Value and partial derivatives of a scalar loss on (video feature, pooled
/// hidden state).
struct LossEval {
  double value = 0.0;
  std::vector<double> d_feature;  // empty means zero
  std::vector<double> d_hidden;   // empty means zero
};

/// Any callable (const FeatureVec&, const HiddenState&) -> LossEval.
template <class F>
concept FeatureLoss = std::invocable<F, const FeatureVec&, const HiddenState&> &&
                      std::same_as<std::invoke_result_t<F, const FeatureVec&, const HiddenState&>, LossEval>;

struct PixelGradient {
  double value = 0.0;
  Tensor grad;
  FeatureVec feature;
  HiddenState hidden;
  TokenSeq output;
};

namespace detail {

template <FeatureLoss Loss>
PixelGradient pixel_gradient(const SurrogateModel& forward_model, const SurrogateModel& backward_model,
                             const Tensor& x, const TokenSeq& prompt, Loss&& loss) {
  EncoderTrace enc = encode_trace(forward_model, x);
  DecoderTrace dec = generate_trace(forward_model, prompt, enc.feature);
  LossEval le = loss(enc.feature, dec.hidden);
  PixelGradient out{le.value, Tensor(x.shape()), enc.feature, dec.hidden, dec.output};

  std::vector<double> dq(forward_model.dims.feature_dim(), 0.0);
  if (!le.d_feature.empty()) dq = le.d_feature;
  if (!le.d_hidden.empty()) {
    std::size_t emitting = 0;
    for (const auto& s : dec.steps) emitting += s.emits ? 1 : 0;
    std::vector<std::vector<double>> d_h(dec.steps.size());
    for (std::size_t s = 0; s < dec.steps.size(); ++s) {
      if (!dec.steps[s].emits) continue;
      d_h[s] = le.d_hidden;
      for (double& v : d_h[s]) v /= static_cast<double>(emitting);
    }
    const auto d_p = decoder_backward(backward_model, dec, d_h, nullptr);
    const auto dq_h = project_backward(backward_model, enc.feature, d_p, nullptr);
    for (std::size_t i = 0; i < dq.size(); ++i) dq[i] += dq_h[i];
  }
  encode_backward(backward_model, x, enc, dq, &out.grad, nullptr);
  return out;
}

}  // namespace detail

/// Exact reverse-mode gradient of `loss(encode(x), hidden(x))` with respect to
/// every pixel of x. The greedy decode is recomputed at x and then held fixed.
template <FeatureLoss Loss>
PixelGradient grad_wrt_pixels(const SurrogateModel& m, const Tensor& x, const TokenSeq& prompt, Loss&& loss) {
  return detail::pixel_gradient(m, m, x, prompt, std::forward<Loss>(loss));
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradcheckOptions {
  double tol = 1e-3;
  std::size_t samples = 64;
  double step = 1e-4;
  std::uint64_t seed = 0;
  /// Negative control: when nonzero, the analytic backward pass runs with the
  /// conv kernel shifted by this amount while the forward pass is untouched.
  double conv_fault = 0.0;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool pass = false;
};

/// Relative error |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central-difference check of `loss` gradients on `samples` random pixels.
/// The oracle evaluates the forward pass only, with the emitted tokens frozen
/// at their value at x. Pixels whose stencil straddles a ReLU kink are
/// resampled. The error floor is 1e-6 of the largest analytic gradient entry.
template <FeatureLoss Loss>
GradcheckReport gradcheck_loss(const SurrogateModel& m, const Tensor& x, const TokenSeq& prompt, Loss&& loss,
                               const GradcheckOptions& opt) {
  SurrogateModel backward_model = m;
  if (opt.conv_fault != 0.0)
    for (double& w : backward_model.params.conv_w) w += opt.conv_fault;
  const PixelGradient pg = detail::pixel_gradient(m, backward_model, x, prompt, loss);
  const EncoderTrace enc = encode_trace(m, x);

  double max_w = 0.0;
  for (double w : m.params.conv_w) max_w = std::max(max_w, std::abs(w));
  double max_g = 0.0;
  for (double g : pg.grad.values()) max_g = std::max(max_g, std::abs(g));
  const double floor = std::max(1e-6 * max_g, 1e-14);

  auto eval = [&](const Tensor& xp) {
    const FeatureVec q = encode_video(m, xp);
    const HiddenState a = hidden_given_tokens(m, prompt, q, pg.output);
    return loss(q, a).value;
  };

  GradcheckReport rep;
  Rng rng(opt.seed);
  const Shape& s = x.shape();
  Tensor xp = x;
  std::size_t attempts = 0;
  while (rep.checked < opt.samples && attempts < 100 * opt.samples) {
    ++attempts;
    const std::size_t t = rng.index(s.frames), c = rng.index(s.channels), yy = rng.index(s.height),
                      xx = rng.index(s.width);
    if (relu_margin(m, enc, t, yy, xx) <= 4.0 * opt.step * max_w / m.dims.input_std) {
      ++rep.skipped_kinks;
      continue;
    }
    const std::size_t off = x.offset(t, c, yy, xx);
    xp[off] = x[off] + opt.step;
    const double fp = eval(xp);
    xp[off] = x[off] - opt.step;
    const double fm = eval(xp);
    xp[off] = x[off];
    const double fd = (fp - fm) / (2.0 * opt.step);
    rep.max_rel_err = std::max(rep.max_rel_err, relative_error(pg.grad[off], fd, floor));
    ++rep.checked;
  }
  rep.pass = rep.checked > 0 && rep.max_rel_err < opt.tol;
  return rep;
}

/// Gradient check with a seeded random linear probe of both the video
/// feature and the pooled hidden state.
inline GradcheckReport gradcheck(const SurrogateModel& m, const Tensor& x, const TokenSeq& prompt,
                                 const GradcheckOptions& opt = {}) {
  Rng rng(mix_seed(opt.seed, 0x9c));
  std::vector<double> wq(m.dims.feature_dim()), wa(m.dims.d_model);
  for (double& v : wq) v = rng.uniform(-1.0, 1.0);
  for (double& v : wa) v = rng.uniform(-1.0, 1.0);
  auto probe = [&](const FeatureVec& q, const HiddenState& a) {
    LossEval le;
    for (std::size_t i = 0; i < wq.size(); ++i) le.value += wq[i] * q.values[i];
    for (std::size_t i = 0; i < wa.size(); ++i) le.value += wa[i] * a.values[i];
    le.d_feature = wq;
    le.d_hidden = wa;
    return le;
  };
  return gradcheck_loss(m, x, prompt, probe, opt);
}

// ---------------------------------------------------------------------------
// Text embedding (stand-in for a CLIP text encoder)

struct TextEmbedding {
  std::vector<double> values;
  bool empty = false;  // input had no content tokens; values are all zero
};

/// Unit-normalized mean of the token embedding rows (BOS/EOS excluded).
inline TextEmbedding text_embedding(const SurrogateModel& m, const TokenSeq& seq) {
  const std::size_t n = m.dims.d_model;
  TextEmbedding out{std::vector<double>(n, 0.0), false};
  const auto content = seq.content();
  if (content.empty()) {
    out.empty = true;
    return out;
  }
  for (Token t : content) {
    const auto e = detail::embedding(m, t);
    for (std::size_t i = 0; i < n; ++i) out.values[i] += e[i];
  }
  double norm = 0.0;
  for (double& v : out.values) {
    v /= static_cast<double>(content.size());
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& v : out.values) v /= norm;
  else
    out.empty = true;
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainingExample {
  Video video;
  TokenSeq caption;  // content tokens; EOS is appended as the final target
};

struct TrainOptions {
  std::size_t epochs = 300;
  double lr = 0.5;
  std::uint64_t seed = 0;
  double clip_norm = 5.0;  // global gradient-norm clip, <= 0 disables
};

struct TrainResult {
  SurrogateModel model;
  std::vector<double> loss_trace;  // mean loss before each epoch's update
};

namespace detail {

inline std::vector<double> softmax(std::vector<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

inline TokenSeq with_eos(const TokenSeq& caption) {
  TokenSeq target = caption;
  if (target.tokens.empty() || target.tokens.back() != kEos) target.tokens.push_back(kEos);
  return target;
}

}  // namespace detail

/// Teacher-forced cross-entropy, averaged over positions then examples.
/// Accumulates gradients into `grads` when non-null.
inline double caption_loss(const SurrogateModel& m, const std::vector<TrainingExample>& data,
                           const TokenSeq& prompt, ModelParams* grads) {
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(data.size());
  const std::size_t vocab = m.dims.vocab, n = m.dims.d_model;
  for (const auto& ex : data) {
    const TokenSeq target = detail::with_eos(ex.caption);
    const EncoderTrace enc = encode_trace(m, ex.video.pixels());
    const DecoderTrace dec = forced_trace(m, prompt, enc.feature, target);
    std::vector<std::vector<double>> d_h(dec.steps.size());
    std::size_t pos = 0;
    const double pos_scale = scale / static_cast<double>(target.size());
    for (std::size_t s = 0; s < dec.steps.size(); ++s) {
      if (!dec.steps[s].emits) continue;
      const Token y = target.tokens[pos++];
      const auto p = detail::softmax(detail::logits(m, dec.steps[s].h));
      total += -std::log(std::max(p[y], 1e-300)) * pos_scale;
      if (!grads) continue;
      std::vector<double> dlogit(p);
      dlogit[y] -= 1.0;
      for (double& v : dlogit) v *= pos_scale;
      d_h[s].assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t v = 0; v < vocab; ++v) {
          grads->head[i * vocab + v] += dec.steps[s].h[i] * dlogit[v];
          d_h[s][i] += m.params.head[i * vocab + v] * dlogit[v];
        }
    }
    if (!grads) continue;
    const auto d_p = decoder_backward(m, dec, d_h, grads);
    const auto dq = project_backward(m, enc.feature, d_p, grads);
    encode_backward(m, ex.video.pixels(), enc, dq, nullptr, grads);
  }
  return total;
}

/// Full-batch gradient descent on the captioning loss.
inline TrainResult train_toy(const SurrogateModel& init, const std::vector<TrainingExample>& data,
                             const TokenSeq& prompt, const TrainOptions& opt) {
  if (data.empty()) throw Error("empty_dataset", "training needs at least one example");
  TrainResult res{init, {}};
  SurrogateModel& m = res.model;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    ModelParams g = ModelParams::zeros(m.dims);
    res.loss_trace.push_back(caption_loss(m, data, prompt, &g));
    double sq = 0.0;
    for (const auto* b : std::as_const(g).blocks())
      for (double v : *b) sq += v * v;
    const double norm = std::sqrt(sq);
    const double factor = (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;
    auto pb = m.params.blocks();
    auto gb = g.blocks();
    for (std::size_t b = 0; b < pb.size(); ++b)
      for (std::size_t i = 0; i < pb[b]->size(); ++i) (*pb[b])[i] -= opt.lr * factor * (*gb[b])[i];
  }
  return res;
}

/// Rounds every parameter to the nearest f32 so the in-memory model matches
/// what save_model writes.
inline SurrogateModel quantize_to_f32(SurrogateModel m) {
  for (auto* b : m.params.blocks())
    for (double& v : *b) v = static_cast<double>(static_cast<float>(v));
  return m;
}

// ---------------------------------------------------------------------------
// Weights file: "FMMM", u16 version, u32 dims (k, C, d, d_model, V, L), then
// f32 blocks in ModelParams order. Version 2 inserts, after L, a u32 pool grid
// and the input mean and std as f64. Models with the plain encoder (grid 1,
// mean 0, std 1) are written as version 1.

inline bool plain_encoder(const ModelDims& d) {
  return d.pool_grid == 1 && d.input_mean == 0.0 && d.input_std == 1.0;
}

inline void save_model(const SurrogateModel& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("unwritable_path", "cannot write " + path.string());
  const ModelDims& d = m.dims;
  os.write("FMMM", 4);
  detail::put_u16(os, plain_encoder(d) ? 1 : 2);
  for (std::size_t v : {d.kernel, d.channels, d.filters, d.d_model, d.vocab, d.max_len})
    detail::put_u32(os, static_cast<std::uint32_t>(v));
  if (!plain_encoder(d)) {
    detail::put_u32(os, static_cast<std::uint32_t>(d.pool_grid));
    detail::put_f64(os, d.input_mean);
    detail::put_f64(os, d.input_std);
  }
  for (const auto* b : m.params.blocks())
    for (double v : *b) detail::put_f32(os, static_cast<float>(v));
  if (!os) throw Error("unwritable_path", "write failed for " + path.string());
}

inline SurrogateModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing_path", "cannot open model " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FMMM", 4) != 0)
    throw Error("malformed_header", "bad model magic in " + path.string());
  const std::uint16_t version = detail::get_u16(is);
  if (version != 1 && version != 2) throw Error("malformed_header", "unsupported model version");
  ModelDims d;
  d.kernel = detail::get_u32(is);
  d.channels = detail::get_u32(is);
  d.filters = detail::get_u32(is);
  d.d_model = detail::get_u32(is);
  d.vocab = detail::get_u32(is);
  d.max_len = detail::get_u32(is);
  if (version == 2) {
    d.pool_grid = detail::get_u32(is);
    d.input_mean = detail::get_f64(is);
    d.input_std = detail::get_f64(is);
  }
  if (!is) throw Error("malformed_header", "truncated model header in " + path.string());
  d.validate();
  SurrogateModel m{d, ModelParams::zeros(d), 0};
  for (auto* b : m.params.blocks())
    for (double& v : *b) v = detail::get_f32(is);
  if (!is) throw Error("malformed_payload", "truncated model payload in " + path.string());
  return m;
}

}  // namespace fmm
