#pragma once

// Video and perturbation tensors, the l2,1 group norm, perturbation
// application, spatial baselines and file I/O (.vtensor and PPM/PGM frames).

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fmm/common.hpp"
#include "fmm/temporal_mask.hpp"

namespace fmm {

struct Shape {
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t plane() const { return height * width; }
  std::size_t frame_size() const { return channels * height * width; }
  std::size_t size() const { return frames * frame_size(); }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.frames << "x" << s.channels << "x" << s.height << "x" << s.width;
  return os.str();
}

/// Dense T x C x H x W real tensor, frame-major and row-major within a frame.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw Error("shape_mismatch", "tensor data size " + std::to_string(data_.size()) +
                                        " does not match shape " + to_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
    return ((t * shape_.channels + c) * shape_.height + y) * shape_.width + x;
  }
  double& at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) { return data_[offset(t, c, y, x)]; }
  double at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const { return data_[offset(t, c, y, x)]; }

  std::span<double> frame(std::size_t t) {
    return {data_.data() + t * shape_.frame_size(), shape_.frame_size()};
  }
  std::span<const double> frame(std::size_t t) const {
    return {data_.data() + t * shape_.frame_size(), shape_.frame_size()};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b))
    throw Error("shape_mismatch", std::string(what) + ": shape " + to_string(a) + " vs " + to_string(b));
}

/// A validated clean or adversarial video: T >= 2 frames, C in {1,3},
/// H, W >= 8, every value finite and in [0,1].
class Video {
 public:
  static constexpr std::size_t kMinSide = 8;

  Video() = default;
  explicit Video(Tensor pixels) : pixels_(std::move(pixels)) { validate(); }

  const Tensor& pixels() const { return pixels_; }
  const Shape& shape() const { return pixels_.shape(); }
  std::size_t frames() const { return pixels_.shape().frames; }

  friend bool operator==(const Video&, const Video&) = default;

 private:
  void validate() const {
    const Shape& s = pixels_.shape();
    if (s.frames < 2) throw Error("too_few_frames", "video has fewer than 2 frames");
    if (s.channels != 1 && s.channels != 3)
      throw Error("bad_channels", "video must have 1 or 3 channels, got " + std::to_string(s.channels));
    if (s.height < kMinSide || s.width < kMinSide)
      throw Error("frame_too_small", "frames must be at least 8x8, got " + to_string(s));
    for (double v : pixels_.values())
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw Error("pixel_out_of_range", "video pixels must be finite and in [0,1]");
  }

  Tensor pixels_;
};

/// Additive perturbation with an l-infinity budget `delta_max` in 8-bit units.
class Perturbation {
 public:
  Perturbation() = default;
  Perturbation(Tensor delta, double delta_max) : delta_(std::move(delta)), delta_max_(delta_max) {
    if (!(delta_max_ > 0.0)) throw Error("invalid_budget", "delta_max must be positive");
    const double bound = delta_max_ / 255.0;
    for (double v : delta_.values())
      if (!std::isfinite(v) || std::abs(v) > bound)
        throw Error("budget_violation", "perturbation element exceeds delta_max/255");
  }

  static Perturbation zeros(const Shape& shape, double delta_max) { return {Tensor(shape), delta_max}; }

  const Tensor& delta() const { return delta_; }
  double delta_max() const { return delta_max_; }
  const Shape& shape() const { return delta_.shape(); }

 private:
  Tensor delta_;
  double delta_max_ = 16.0;
};

// ---------------------------------------------------------------------------
// l2,1 norm

inline constexpr double kNormEpsilon = 1e-12;

/// Sum over frames of the Euclidean norm of each frame.
inline double l21_norm(const Tensor& delta) {
  double total = 0.0;
  for (std::size_t t = 0; t < delta.shape().frames; ++t) {
    double sq = 0.0;
    for (double v : delta.frame(t)) sq += v * v;
    total += std::sqrt(sq);
  }
  return total;
}

inline double l21_norm(const Perturbation& p) { return l21_norm(p.delta()); }

/// Subgradient of l21_norm: each frame is divided by its norm, frames whose
/// norm is at most kNormEpsilon map to zero.
inline Tensor l21_subgradient(const Tensor& delta) {
  Tensor g(delta.shape());
  for (std::size_t t = 0; t < delta.shape().frames; ++t) {
    auto src = delta.frame(t);
    double sq = 0.0;
    for (double v : src) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= kNormEpsilon) continue;
    auto dst = g.frame(t);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / norm;
  }
  return g;
}

inline Tensor l21_subgradient(const Perturbation& p) { return l21_subgradient(p.delta()); }

// ---------------------------------------------------------------------------
// Applying perturbations

/// clamp(x + m * delta, 0, 1) on raw tensors. Unselected frames are copied.
inline Tensor masked_sum_clamped(const Tensor& x, const Tensor& delta, const TemporalMask& m) {
  require_same_shape(x.shape(), delta.shape(), "apply_perturbation");
  if (m.frames() != x.shape().frames)
    throw Error("shape_mismatch", "mask length " + std::to_string(m.frames()) + " does not match " +
                                      std::to_string(x.shape().frames) + " frames");
  Tensor out = x;
  for (std::size_t t = 0; t < x.shape().frames; ++t) {
    if (!m[t]) continue;
    auto dst = out.frame(t);
    auto d = delta.frame(t);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::clamp(dst[i] + d[i], 0.0, 1.0);
  }
  return out;
}

inline Video apply_perturbation(const Video& x, const Perturbation& p, const TemporalMask& m) {
  return Video(masked_sum_clamped(x.pixels(), p.delta(), m));
}

/// Mean |x_adv - x| in 8-bit units over the pixels of selected frames; 0 when
/// the mask is empty.
inline double mean_abs_perturbation(const Video& x, const Video& x_adv, const TemporalMask& m) {
  require_same_shape(x.shape(), x_adv.shape(), "mean_abs_perturbation");
  if (m.frames() != x.frames()) throw Error("shape_mismatch", "mask length does not match video");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < x.frames(); ++t) {
    if (!m[t]) continue;
    auto a = x.pixels().frame(t);
    auto b = x_adv.pixels().frame(t);
    for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(b[i] - a[i]);
    count += a.size();
  }
  return count == 0 ? 0.0 : sum * 255.0 / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Spatial baselines

enum class BaselineKind { Random, Black, White };

inline std::string to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::Random: return "random";
    case BaselineKind::Black: return "black";
    case BaselineKind::White: return "white";
  }
  return "unknown";
}

inline BaselineKind baseline_from_string(const std::string& s) {
  if (s == "random") return BaselineKind::Random;
  if (s == "black") return BaselineKind::Black;
  if (s == "white") return BaselineKind::White;
  throw Error("invalid_baseline", "unknown baseline kind '" + s + "'");
}

/// Black and white replace every pixel with 0 or 1. Random moves each pixel
/// by +-magnitude/255 with a seeded fair sign and clamps.
inline Video make_baseline(BaselineKind kind, const Video& x, std::uint64_t seed, double magnitude = 8.0) {
  switch (kind) {
    case BaselineKind::Black: return Video(Tensor(x.shape(), 0.0));
    case BaselineKind::White: return Video(Tensor(x.shape(), 1.0));
    case BaselineKind::Random: {
      Rng rng(seed);
      const double bound = magnitude / 255.0;
      Tensor out = x.pixels();
      for (double& v : out.values()) v = std::clamp(v + (rng.uniform() < 0.5 ? -bound : bound), 0.0, 1.0);
      return Video(std::move(out));
    }
  }
  throw Error("invalid_baseline", "unknown baseline kind");
}

// ---------------------------------------------------------------------------
// File I/O

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::ostream& os, double f) {
  const auto v = std::bit_cast<std::uint64_t>(f);
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw Error("malformed_header", "unexpected end of file");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("malformed_header", "unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }
inline double get_f64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return std::bit_cast<double>(lo | (hi << 32));
}

inline bool is_vtensor_path(const std::filesystem::path& p) { return p.extension() == ".vtensor"; }

// Reads the next whitespace-delimited header token of a PNM file, skipping
// comments.
inline std::string pnm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw Error("malformed_header", "truncated pixmap header");
  return tok;
}

inline std::size_t parse_dim(const std::string& s, const std::string& file) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(s, &pos);
  } catch (const std::exception&) {
    throw Error("malformed_header", "bad pixmap header field '" + s + "' in " + file);
  }
  if (pos != s.size() || v == 0) throw Error("malformed_header", "bad pixmap header field '" + s + "' in " + file);
  return v;
}

struct Pixmap {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> bytes;  // interleaved
};

inline Pixmap read_pixmap(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing_path", "cannot open " + path.string());
  const std::string magic = pnm_token(is);
  Pixmap pm;
  if (magic == "P6") pm.channels = 3;
  else if (magic == "P5") pm.channels = 1;
  else throw Error("malformed_header", "unsupported pixmap magic '" + magic + "' in " + path.string());
  pm.width = parse_dim(pnm_token(is), path.string());
  pm.height = parse_dim(pnm_token(is), path.string());
  if (parse_dim(pnm_token(is), path.string()) != 255)
    throw Error("malformed_header", "only maxval 255 is supported: " + path.string());
  pm.bytes.resize(pm.channels * pm.height * pm.width);
  if (!is.read(reinterpret_cast<char*>(pm.bytes.data()), static_cast<std::streamsize>(pm.bytes.size())))
    throw Error("malformed_header", "truncated pixel data in " + path.string());
  return pm;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline Video load_vtensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing_path", "cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FMMV", 4) != 0)
    throw Error("malformed_header", "bad .vtensor magic in " + path.string());
  if (get_u16(is) != 1) throw Error("malformed_header", "unsupported .vtensor version in " + path.string());
  Shape s;
  s.frames = get_u32(is);
  s.channels = get_u32(is);
  s.height = get_u32(is);
  s.width = get_u32(is);
  if (s.frames < 2) throw Error("too_few_frames", "video has fewer than 2 frames");
  if (s.size() > (std::size_t{1} << 32)) throw Error("malformed_header", "implausible .vtensor size");
  std::vector<double> data(s.size());
  for (double& v : data) {
    try {
      v = get_f32(is);
    } catch (const Error&) {
      throw Error("malformed_header", "truncated .vtensor payload in " + path.string());
    }
  }
  return Video(Tensor(s, std::move(data)));
}

inline Video load_pixmap_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  if (files.size() < 2) throw Error("too_few_frames", "fewer than 2 frames in " + dir.string());
  std::vector<Pixmap> frames;
  for (const auto& f : files) frames.push_back(read_pixmap(f));
  const Pixmap& first = frames.front();
  for (const auto& pm : frames)
    if (pm.channels != first.channels || pm.height != first.height || pm.width != first.width)
      throw Error("inconsistent_frames", "frames in " + dir.string() + " have inconsistent dimensions");
  Shape s{frames.size(), first.channels, first.height, first.width};
  Tensor t(s);
  for (std::size_t f = 0; f < s.frames; ++f)
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x)
        for (std::size_t c = 0; c < s.channels; ++c)
          t.at(f, c, y, x) = frames[f].bytes[(y * s.width + x) * s.channels + c] / 255.0;
  return Video(std::move(t));
}

}  // namespace detail

/// Loads either a `.vtensor` file or a directory of P5/P6 frames sorted by
/// file name.
inline Video load_video(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing_path", "no such file or directory: " + path.string());
  if (std::filesystem::is_directory(path)) return detail::load_pixmap_dir(path);
  if (detail::is_vtensor_path(path)) return detail::load_vtensor(path);
  throw Error("malformed_header", "expected a .vtensor file or a directory of pixmaps: " + path.string());
}

/// Writes a `.vtensor` (when the path has that extension) or a directory of
/// `frame_NNNN.ppm`/`.pgm` files. Pixmaps quantize to round(v * 255).
inline void save_video(const Video& v, const std::filesystem::path& path) {
  const Shape& s = v.shape();
  if (detail::is_vtensor_path(path)) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("unwritable_path", "cannot write " + path.string());
    os.write("FMMV", 4);
    detail::put_u16(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(s.frames));
    detail::put_u32(os, static_cast<std::uint32_t>(s.channels));
    detail::put_u32(os, static_cast<std::uint32_t>(s.height));
    detail::put_u32(os, static_cast<std::uint32_t>(s.width));
    for (double x : v.pixels().values()) detail::put_f32(os, static_cast<float>(x));
    if (!os) throw Error("unwritable_path", "write failed for " + path.string());
    return;
  }
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec || !std::filesystem::is_directory(path)) throw Error("unwritable_path", "cannot create directory " + path.string());
  const bool color = s.channels == 3;
  for (std::size_t f = 0; f < s.frames; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.%s", f, color ? "ppm" : "pgm");
    std::ofstream os(path / name, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("unwritable_path", "cannot write " + (path / name).string());
    os << (color ? "P6" : "P5") << "\n" << s.width << " " << s.height << "\n255\n";
    std::vector<char> row(s.width * s.channels);
    for (std::size_t y = 0; y < s.height; ++y) {
      for (std::size_t x = 0; x < s.width; ++x)
        for (std::size_t c = 0; c < s.channels; ++c)
          row[x * s.channels + c] = static_cast<char>(detail::to_byte(v.pixels().at(f, c, y, x)));
      os.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw Error("unwritable_path", "write failed for " + (path / name).string());
  }
}

/// Writes one interleaved 8-bit RGB image as binary PPM.
inline void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
                      std::span<const std::uint8_t> rgb) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("unwritable_path", "cannot write " + path.string());
  os << "P6\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace fmm
