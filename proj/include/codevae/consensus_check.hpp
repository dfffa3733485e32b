#pragma once

// Randomized cross-check of the per-dimension consensus solver against the
// dense block-matrix oracle, plus equality with the product of experts at
// rho = 0. The solver under test is injectable so a deliberately broken
// implementation can be shown to fail.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "codevae/consensus.hpp"

namespace codevae {

using ConsensusFn = std::function<ConsensusResult(std::span<const DiagonalGaussian>, const CorrelationSpec&)>;

/// |a - b| / max(|b|, floor). The floor keeps values near zero from turning
/// rounding noise into huge ratios.
inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max(std::abs(b), floor);
}

/// Largest relative error over means and variances of two posteriors.
inline double max_relative_error(const DiagonalGaussian& a, const DiagonalGaussian& b) {
  if (a.dim() != b.dim()) return INFINITY;
  double e = 0.0;
  for (std::size_t d = 0; d < a.dim(); ++d) {
    e = std::max(e, relative_error(a.mean(d), b.mean(d)));
    e = std::max(e, relative_error(a.variance(d), b.variance(d)));
  }
  return e;
}

struct ConsensusInstance {
  std::uint64_t seed = 0;
  std::vector<DiagonalGaussian> experts;
  double rho = 0.0;
};

/// Experts with means in N(0, 2^2) and stds in [0.3, 3]; counts drawn from
/// [min_experts, max_experts], dims from [1, max_dim] with experts*dim <= 64.
inline ConsensusInstance random_instance(std::uint64_t seed, std::size_t min_experts, std::size_t max_experts,
                                         std::size_t max_dim, double max_rho) {
  std::mt19937_64 rng(seed);
  ConsensusInstance inst;
  inst.seed = seed;
  const auto n = std::uniform_int_distribution<std::size_t>(min_experts, max_experts)(rng);
  const std::size_t dim_cap = std::min(max_dim, kOracleMaxSize / n);
  const auto dim = std::uniform_int_distribution<std::size_t>(1, dim_cap)(rng);
  std::normal_distribution<double> mean(0.0, 2.0);
  std::uniform_real_distribution<double> sd(0.3, 3.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> m(dim), s(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      m[d] = mean(rng);
      s[d] = sd(rng);
    }
    inst.experts.emplace_back(std::move(m), std::move(s));
  }
  inst.rho = max_rho > 0.0 ? std::uniform_real_distribution<double>(0.0, max_rho)(rng) : 0.0;
  return inst;
}

struct ConsensusCheckReport {
  int trials = 0;
  int failures = 0;
  double max_oracle_error = 0.0;
  double max_poe_error = 0.0;
  std::optional<ConsensusInstance> first_failure;

  bool passed() const noexcept { return trials > 0 && failures == 0; }
};

inline constexpr double kOracleTolerance = 1e-6;
inline constexpr double kPoeTolerance = 1e-10;

/// Each trial compares `fast` with the dense oracle on a random instance
/// (correlated, up to 8 experts) and with the product of experts on a second
/// instance at rho = 0 (2 to 4 experts).
inline ConsensusCheckReport run_consensus_check(int trials, std::uint64_t seed, const ConsensusFn& fast = code_consensus) {
  if (trials < 1) throw ArgumentError("consensus check: trials must be at least 1");
  ConsensusCheckReport rep;
  rep.trials = trials;
  std::seed_seq seq{seed};
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(2 * trials));
  seq.generate(seeds.begin(), seeds.end());
  for (int t = 0; t < trials; ++t) {
    const auto a = random_instance(seeds[2 * t], 1, 8, 8, 0.9);
    const CorrelationSpec sa{a.rho};
    const double oe = max_relative_error(fast(a.experts, sa).posterior, code_consensus_oracle(a.experts, sa).posterior);

    const auto b = random_instance(seeds[2 * t + 1], 2, 4, 8, 0.0);
    const double pe = max_relative_error(fast(b.experts, CorrelationSpec{0.0}).posterior, poe_consensus(b.experts).posterior);

    rep.max_oracle_error = std::max(rep.max_oracle_error, oe);
    rep.max_poe_error = std::max(rep.max_poe_error, pe);
    const bool oracle_bad = !(oe <= kOracleTolerance);
    const bool poe_bad = !(pe <= kPoeTolerance);
    if (oracle_bad || poe_bad) {
      ++rep.failures;
      if (!rep.first_failure) rep.first_failure = oracle_bad ? a : b;
    }
  }
  return rep;
}

}  // namespace codevae
