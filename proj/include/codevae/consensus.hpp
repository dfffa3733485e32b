#pragma once

// Consensus of dependent experts (CoDE) for diagonal Gaussian experts.
//
// Each expert i supplies, per latent dimension d, an estimate mu_i^d with
// uncertainty sigma_i^d. The estimation errors of the M' experts in a subset
// are jointly Gaussian with covariance Sigma^d (sigma_i^2 on the diagonal,
// rho sigma_i sigma_j off it). Since the full covariance is block diagonal
// over d, the posterior factorizes per dimension:
//
//   precision_d = 1^T (Sigma^d)^-1 1
//   mean_d      = 1^T (Sigma^d)^-1 mu^d / precision_d
//
// The dense route (code_consensus_oracle) materializes the whole block matrix
// and the stacked design matrix instead and is kept for verification only.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "codevae/error.hpp"
#include "codevae/gaussian.hpp"

namespace codevae {

/// M' x M' covariance of the expert errors on one latent dimension.
class PerDimCovariance {
 public:
  PerDimCovariance(std::size_t n, std::vector<double> values) : n_(n), values_(std::move(values)) {
    if (values_.size() != n * n) throw ArgumentError("PerDimCovariance: size mismatch");
  }

  std::size_t size() const noexcept { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * n_ + j]; }
  std::span<const double> values() const noexcept { return values_; }

  bool is_symmetric(double tol = 1e-12) const {
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j)
        if (std::abs((*this)(i, j) - (*this)(j, i)) > tol) return false;
    return true;
  }

  /// True if an unpivoted Cholesky factorization succeeds with all pivots > 0.
  bool is_positive_definite() const {
    std::vector<double> l(values_);
    for (std::size_t j = 0; j < n_; ++j) {
      double pivot = l[j * n_ + j];
      for (std::size_t k = 0; k < j; ++k) pivot -= l[j * n_ + k] * l[j * n_ + k];
      if (!(pivot > 0.0)) return false;
      const double ljj = std::sqrt(pivot);
      l[j * n_ + j] = ljj;
      for (std::size_t i = j + 1; i < n_; ++i) {
        double s = l[i * n_ + j];
        for (std::size_t k = 0; k < j; ++k) s -= l[i * n_ + k] * l[j * n_ + k];
        l[i * n_ + j] = s / ljj;
      }
    }
    return true;
  }

 private:
  std::size_t n_;
  std::vector<double> values_;
};

inline PerDimCovariance build_sigma_d(std::span<const double> stds, const CorrelationSpec& spec) {
  const std::size_t n = stds.size();
  if (n == 0) throw ArgumentError("build_sigma_d: need at least one expert");
  for (double s : stds)
    if (!(s > 0.0)) throw ArgumentError("build_sigma_d: std must be strictly positive");
  std::vector<double> m(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m[i * n + j] = (i == j) ? stds[i] * stds[i] : spec.rho() * stds[i] * stds[j];
  return PerDimCovariance(n, std::move(m));
}

struct ConsensusResult {
  DiagonalGaussian posterior;
  /// 1^T (Sigma^d)^-1 1 per latent dimension.
  std::vector<double> per_dim_precision;
};

namespace detail {

inline constexpr std::size_t kMaxExperts = 16;
inline constexpr double kJitterScale = 1e-9;

/// Solves Sigma a = 1 and Sigma v = mu for one latent dimension.
/// Returns false if Sigma (after optional jitter) is not positive definite.
inline bool cholesky_solve_block(std::span<const double> mu, std::span<const double> sd, double rho,
                                 double jitter, std::span<double> a, std::span<double> v) {
  const std::size_t n = sd.size();
  std::array<double, kMaxExperts * kMaxExperts> l{};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      l[i * n + j] = (i == j) ? sd[i] * sd[i] + jitter : rho * sd[i] * sd[j];

  for (std::size_t j = 0; j < n; ++j) {
    double pivot = l[j * n + j];
    for (std::size_t k = 0; k < j; ++k) pivot -= l[j * n + k] * l[j * n + k];
    if (!(pivot > 0.0)) return false;
    const double ljj = std::sqrt(pivot);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = l[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }

  auto solve = [&](auto rhs, std::span<double> x) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = rhs(i);
      for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * x[k];
      x[i] = s / l[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * x[k];
      x[ii] = s / l[ii * n + ii];
    }
  };
  solve([](std::size_t) { return 1.0; }, a);
  solve([&](std::size_t i) { return mu[i]; }, v);
  return true;
}

/// Per-dimension consensus kernel shared by the library path and the
/// differentiable graph op. Fills a = Sigma^-1 1 and v = Sigma^-1 mu and
/// returns (mean, precision).
struct BlockSolution {
  double mean;
  double precision;
};

inline BlockSolution solve_consensus_block(std::span<const double> mu, std::span<const double> sd,
                                           double rho, std::span<double> a, std::span<double> v,
                                           std::size_t dim_index) {
  const std::size_t n = sd.size();
  if (n == 1) {
    a[0] = 1.0 / (sd[0] * sd[0]);
    v[0] = mu[0] * a[0];
  } else if (n == 2) {
    // Closed-form 2x2 inverse; det > 0 whenever |rho| < 1.
    const double s11 = sd[0] * sd[0];
    const double s22 = sd[1] * sd[1];
    const double s12 = rho * sd[0] * sd[1];
    const double det = s11 * s22 - s12 * s12;
    if (!(det > 0.0)) throw NumericalError("consensus: 2x2 covariance is singular", dim_index);
    a[0] = (s22 - s12) / det;
    a[1] = (s11 - s12) / det;
    v[0] = (s22 * mu[0] - s12 * mu[1]) / det;
    v[1] = (s11 * mu[1] - s12 * mu[0]) / det;
  } else {
    if (n > kMaxExperts) throw ArgumentError("consensus: at most 16 experts");
    if (!cholesky_solve_block(mu, sd, rho, 0.0, a, v)) {
      double max_var = 0.0;
      for (double s : sd) max_var = std::max(max_var, s * s);
      if (!cholesky_solve_block(mu, sd, rho, kJitterScale * max_var, a, v)) {
        throw NumericalError("consensus: covariance not positive definite after jitter", dim_index);
      }
    }
  }
  double precision = 0.0;
  double weighted = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    precision += a[i];
    weighted += v[i];
  }
  if (!(precision > 0.0)) throw NumericalError("consensus: non-positive precision", dim_index);
  return {weighted / precision, precision};
}

inline std::size_t check_experts(std::span<const DiagonalGaussian> experts) {
  if (experts.empty()) throw ArgumentError("consensus: need at least one expert");
  const std::size_t dim = experts.front().dim();
  for (const auto& e : experts)
    if (e.dim() != dim) throw ArgumentError("consensus: experts differ in latent dimension");
  return dim;
}

}  // namespace detail

/// CoDE posterior N(A^-1 B, A^-1), computed one latent dimension at a time.
inline ConsensusResult code_consensus(std::span<const DiagonalGaussian> experts,
                                      const CorrelationSpec& spec) {
  const std::size_t dim = detail::check_experts(experts);
  const std::size_t n = experts.size();
  if (n > detail::kMaxExperts) throw ArgumentError("code_consensus: at most 16 experts");

  std::vector<double> mean(dim), stddev(dim), precision(dim);
  std::array<double, detail::kMaxExperts> mu{}, sd{}, a{}, v{};
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t i = 0; i < n; ++i) {
      mu[i] = experts[i].mean(d);
      sd[i] = experts[i].stddev(d);
    }
    const auto sol = detail::solve_consensus_block({mu.data(), n}, {sd.data(), n}, spec.rho(),
                                                   {a.data(), n}, {v.data(), n}, d);
    mean[d] = sol.mean;
    precision[d] = sol.precision;
    stddev[d] = std::sqrt(1.0 / sol.precision);
  }
  return {DiagonalGaussian(std::move(mean), std::move(stddev)), std::move(precision)};
}

/// Product of experts: precision-weighted mean, summed precisions.
inline ConsensusResult poe_consensus(std::span<const DiagonalGaussian> experts) {
  const std::size_t dim = detail::check_experts(experts);
  std::vector<double> mean(dim), stddev(dim), precision(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    double tau = 0.0, weighted = 0.0;
    for (const auto& e : experts) {
      const double t = 1.0 / e.variance(d);
      tau += t;
      weighted += t * e.mean(d);
    }
    mean[d] = weighted / tau;
    precision[d] = tau;
    stddev[d] = std::sqrt(1.0 / tau);
  }
  return {DiagonalGaussian(std::move(mean), std::move(stddev)), std::move(precision)};
}

inline double gaussian_pdf(const DiagonalGaussian& g, std::span<const double> z) {
  if (z.size() != g.dim()) throw ArgumentError("gaussian_pdf: point has wrong dimension");
  double log_p = 0.0;
  for (std::size_t d = 0; d < g.dim(); ++d) {
    const double r = (z[d] - g.mean(d)) / g.stddev(d);
    log_p += -0.5 * r * r - std::log(g.stddev(d)) - 0.5 * std::log(2.0 * std::numbers::pi);
  }
  return std::exp(log_p);
}

/// Equal-weight mixture density at z.
inline double moe_density(std::span<const DiagonalGaussian> experts, std::span<const double> z) {
  detail::check_experts(experts);
  double p = 0.0;
  for (const auto& e : experts) p += gaussian_pdf(e, z);
  return p / static_cast<double>(experts.size());
}

/// Per-dimension mean and standard deviation of the equal-weight mixture.
inline DiagonalGaussian moe_moments(std::span<const DiagonalGaussian> experts) {
  const std::size_t dim = detail::check_experts(experts);
  const auto n = static_cast<double>(experts.size());
  std::vector<double> mean(dim), stddev(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    double m = 0.0, second = 0.0;
    for (const auto& e : experts) {
      m += e.mean(d) / n;
      second += (e.variance(d) + e.mean(d) * e.mean(d)) / n;
    }
    mean[d] = m;
    stddev[d] = std::sqrt(second - m * m);
  }
  return DiagonalGaussian(std::move(mean), std::move(stddev));
}

/// Draw from the equal-weight mixture: uniform component, then mean + std * N(0,1).
template <class Rng>
std::vector<double> moe_sample(std::span<const DiagonalGaussian> experts, Rng& rng) {
  const std::size_t dim = detail::check_experts(experts);
  std::uniform_int_distribution<std::size_t> pick(0, experts.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& e = experts[pick(rng)];
  std::vector<double> z(dim);
  for (std::size_t d = 0; d < dim; ++d) z[d] = e.mean(d) + e.stddev(d) * normal(rng);
  return z;
}

struct WinklerWeights {
  double w1;
  double w2;
  double mean;
  double variance;
};

/// Closed-form two-expert consensus: mean = w1 mu1 + w2 mu2 with w1 + w2 = 1.
/// The weight of the less certain expert turns negative once rho exceeds
/// the ratio of the smaller to the larger std.
inline WinklerWeights winkler_two_expert(double mu1, double sd1, double mu2, double sd2,
                                         double rho) {
  if (!(sd1 > 0.0) || !(sd2 > 0.0)) throw ArgumentError("winkler_two_expert: sds must be positive");
  if (!(std::abs(rho) < 1.0)) throw ArgumentError("winkler_two_expert: |rho| must be < 1");
  const double v1 = sd1 * sd1;
  const double v2 = sd2 * sd2;
  const double cross = rho * sd1 * sd2;
  const double denom = v1 + v2 - 2.0 * cross;
  if (!(denom > 0.0)) throw ArgumentError("winkler_two_expert: degenerate denominator");
  const double w1 = (v2 - cross) / denom;
  const double w2 = (v1 - cross) / denom;
  return {w1, w2, w1 * mu1 + w2 * mu2, (1.0 - rho * rho) * v1 * v2 / denom};
}

inline constexpr std::size_t kOracleMaxSize = 64;

/// Dense precision matrix A = u^T Sigma_k^-1 u over the full stacked error
/// vector (ordered dimension-major: e^1, e^2, ...).
inline Eigen::MatrixXd oracle_precision_matrix(std::span<const DiagonalGaussian> experts,
                                               const CorrelationSpec& spec,
                                               Eigen::VectorXd* b_out = nullptr) {
  const std::size_t dim = detail::check_experts(experts);
  const std::size_t n = experts.size();
  const std::size_t size = n * dim;
  if (size > kOracleMaxSize) throw ArgumentError("code_consensus_oracle: M'*D exceeds 64");

  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(size, size);
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(size, dim);
  Eigen::VectorXd mu(size);
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = d * n + i;
      u(r, d) = 1.0;
      mu(r) = experts[i].mean(d);
      for (std::size_t j = 0; j < n; ++j) {
        const double si = experts[i].stddev(d);
        const double sj = experts[j].stddev(d);
        sigma(r, d * n + j) = (i == j) ? si * si : spec.rho() * si * sj;
      }
    }
  }
  const Eigen::MatrixXd sigma_inv = sigma.fullPivLu().inverse();
  if (b_out) *b_out = u.transpose() * sigma_inv * mu;
  return u.transpose() * sigma_inv * u;
}

/// Brute-force CoDE posterior via the full block covariance and design
/// matrix. Verification only; limited to M'*D <= 64.
inline ConsensusResult code_consensus_oracle(std::span<const DiagonalGaussian> experts,
                                             const CorrelationSpec& spec) {
  Eigen::VectorXd b;
  const Eigen::MatrixXd a = oracle_precision_matrix(experts, spec, &b);
  const Eigen::MatrixXd cov = a.fullPivLu().inverse();
  const Eigen::VectorXd mean = cov * b;
  const auto dim = static_cast<std::size_t>(a.rows());
  std::vector<double> m(dim), s(dim), p(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    m[d] = mean(d);
    s[d] = std::sqrt(cov(d, d));
    p[d] = 1.0 / cov(d, d);
  }
  return {DiagonalGaussian(std::move(m), std::move(s)), std::move(p)};
}

}  // namespace codevae
