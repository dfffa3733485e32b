#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "codevae/error.hpp"

namespace codevae {

/// Diagonal Gaussian over the latent space. Stores the standard deviation,
/// variance is derived on demand.
class DiagonalGaussian {
 public:
  DiagonalGaussian(std::vector<double> mean, std::vector<double> stddev)
      : mean_(std::move(mean)), std_(std::move(stddev)) {
    if (mean_.empty() || mean_.size() != std_.size()) {
      throw ArgumentError("DiagonalGaussian: mean and std must have equal non-zero length");
    }
    for (double s : std_) {
      if (!(s > 0.0) || !std::isfinite(s)) {
        throw ArgumentError("DiagonalGaussian: std must be strictly positive and finite");
      }
    }
  }

  /// Scalar convenience constructor.
  DiagonalGaussian(double mean, double stddev)
      : DiagonalGaussian(std::vector<double>{mean}, std::vector<double>{stddev}) {}

  std::size_t dim() const noexcept { return mean_.size(); }
  std::span<const double> mean() const noexcept { return mean_; }
  std::span<const double> stddev() const noexcept { return std_; }
  double mean(std::size_t d) const { return mean_.at(d); }
  double stddev(std::size_t d) const { return std_.at(d); }
  double variance(std::size_t d) const { return std_.at(d) * std_.at(d); }

 private:
  std::vector<double> mean_;
  std::vector<double> std_;
};

/// Sum of per-dimension variances.
inline double trace_of_diagonal(const DiagonalGaussian& g) {
  double t = 0.0;
  for (double s : g.stddev()) t += s * s;
  return t;
}

inline constexpr int kMaxModalities = 16;

/// Non-empty subset of the M modalities. Bit m of `bits()` is modality m;
/// the bit pattern doubles as the 1-based subset index.
class SubsetMask {
 public:
  SubsetMask(std::uint32_t bits, int modalities) : bits_(bits), modalities_(modalities) {
    if (modalities < 1 || modalities > kMaxModalities) {
      throw ArgumentError("SubsetMask: modality count must be in [1, 16]");
    }
    if (bits == 0 || bits >= (1u << modalities)) {
      throw ArgumentError("SubsetMask: bits must encode a non-empty subset");
    }
  }

  std::uint32_t bits() const noexcept { return bits_; }
  /// 1-based index in the powerset ordering (equals the binary value).
  std::uint32_t index() const noexcept { return bits_; }
  int modalities() const noexcept { return modalities_; }
  int cardinality() const noexcept { return std::popcount(bits_); }
  bool contains(int m) const noexcept { return (bits_ >> m) & 1u; }

  std::vector<int> members() const {
    std::vector<int> out;
    for (int m = 0; m < modalities_; ++m)
      if (contains(m)) out.push_back(m);
    return out;
  }

  /// Modality indices joined by '+', e.g. "0+2".
  std::string label() const {
    std::string s;
    for (int m : members()) {
      if (!s.empty()) s += '+';
      s += std::to_string(m);
    }
    return s;
  }

  friend bool operator==(const SubsetMask&, const SubsetMask&) = default;

 private:
  std::uint32_t bits_;
  int modalities_;
};

/// All 2^M - 1 non-empty subsets, ascending binary value.
inline std::vector<SubsetMask> enumerate_subsets(int modalities) {
  if (modalities < 1 || modalities > kMaxModalities) {
    throw ArgumentError("enumerate_subsets: M must be in [1, 16]");
  }
  const std::uint32_t count = (1u << modalities) - 1u;
  std::vector<SubsetMask> out;
  out.reserve(count);
  for (std::uint32_t bits = 1; bits <= count; ++bits) out.emplace_back(bits, modalities);
  return out;
}

inline constexpr double kMaxRho = 0.95;

/// Correlation between expert estimation errors; off-diagonals of each
/// per-dimension covariance are rho * sigma_i * sigma_j.
class CorrelationSpec {
 public:
  explicit CorrelationSpec(double rho = 0.0) : rho_(rho) {
    if (!(rho >= 0.0 && rho <= kMaxRho)) {
      throw ArgumentError("CorrelationSpec: rho must be in [0, 0.95]");
    }
  }
  double rho() const noexcept { return rho_; }

 private:
  double rho_;
};

}  // namespace codevae
