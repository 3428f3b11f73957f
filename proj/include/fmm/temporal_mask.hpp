#pragma once

#include <cstddef>
#include <vector>

namespace fmm {

/// Per-frame binary selector. Only selected frames may carry perturbation.
class TemporalMask {
 public:
  TemporalMask() = default;
  explicit TemporalMask(std::vector<bool> selected) : selected_(std::move(selected)) {}

  static TemporalMask full(std::size_t frames) { return TemporalMask(std::vector<bool>(frames, true)); }
  static TemporalMask empty(std::size_t frames) { return TemporalMask(std::vector<bool>(frames, false)); }

  std::size_t frames() const { return selected_.size(); }
  bool operator[](std::size_t t) const { return selected_[t]; }
  const std::vector<bool>& selected() const { return selected_; }

  std::size_t count() const {
    std::size_t k = 0;
    for (bool b : selected_) k += b ? 1 : 0;
    return k;
  }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < selected_.size(); ++t)
      if (selected_[t]) out.push_back(t);
    return out;
  }

  friend bool operator==(const TemporalMask&, const TemporalMask&) = default;

 private:
  std::vector<bool> selected_;
};

}  // namespace fmm
