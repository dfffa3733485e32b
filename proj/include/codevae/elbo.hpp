#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "codevae/error.hpp"
#include "codevae/gaussian.hpp"
#include "codevae/tape.hpp"

namespace codevae {

enum class Likelihood { Gaussian, Laplace, Categorical };

inline std::string to_string(Likelihood l) {
  switch (l) {
    case Likelihood::Gaussian: return "gaussian";
    case Likelihood::Laplace: return "laplace";
    case Likelihood::Categorical: return "categorical";
  }
  return "unknown";
}

inline Likelihood likelihood_from_string(const std::string& s) {
  if (s == "gaussian") return Likelihood::Gaussian;
  if (s == "laplace") return Likelihood::Laplace;
  if (s == "categorical") return Likelihood::Categorical;
  throw ArgumentError("unknown likelihood family '" + s + "'");
}

/// Learnable probability vector over the K subsets, softmax(logits).
class SubsetWeights {
 public:
  /// Uniform weights over k subsets.
  explicit SubsetWeights(std::size_t k) : logits_(k, 0.0) {
    if (k == 0) throw ArgumentError("SubsetWeights: need at least one subset");
  }
  explicit SubsetWeights(std::vector<double> logits) : logits_(std::move(logits)) {
    if (logits_.empty()) throw ArgumentError("SubsetWeights: need at least one subset");
  }

  static SubsetWeights from_probabilities(std::span<const double> pi) {
    std::vector<double> l(pi.size());
    for (std::size_t k = 0; k < pi.size(); ++k) {
      if (!(pi[k] > 0.0)) throw ArgumentError("SubsetWeights: probabilities must be positive");
      l[k] = std::log(pi[k]);
    }
    return SubsetWeights(std::move(l));
  }

  std::size_t size() const noexcept { return logits_.size(); }
  std::span<const double> logits() const noexcept { return logits_; }

  std::vector<double> pi() const {
    const double mx = *std::max_element(logits_.begin(), logits_.end());
    std::vector<double> p(logits_.size());
    double z = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) z += p[k] = std::exp(logits_[k] - mx);
    for (double& x : p) x /= z;
    return p;
  }

 private:
  std::vector<double> logits_;
};

/// Per-modality likelihood family and decoder weight.
struct LikelihoodSpec {
  std::vector<Likelihood> families;
  std::vector<double> weights;

  /// Weight 1 for the widest modality, max_dim / dim for the others.
  static LikelihoodSpec from_dims(std::vector<Likelihood> families, std::span<const int> dims) {
    if (families.size() != dims.size() || dims.empty()) throw ArgumentError("LikelihoodSpec: size mismatch");
    const int max_dim = *std::max_element(dims.begin(), dims.end());
    LikelihoodSpec s{std::move(families), {}};
    for (int d : dims) {
      if (d < 1) throw ArgumentError("LikelihoodSpec: dims must be positive");
      s.weights.push_back(static_cast<double>(max_dim) / d);
    }
    return s;
  }

  static LikelihoodSpec unweighted(std::vector<Likelihood> families) {
    LikelihoodSpec s{std::move(families), {}};
    s.weights.assign(s.families.size(), 1.0);
    return s;
  }

  std::size_t size() const noexcept { return families.size(); }
};

inline double kl_diag_std_normal(const DiagonalGaussian& q) {
  double kl = 0.0;
  for (std::size_t d = 0; d < q.dim(); ++d) {
    const double v = q.variance(d);
    kl += 0.5 * (v + q.mean(d) * q.mean(d) - 1.0 - std::log(v));
  }
  return kl;
}

/// One modality of one observation: real values, or a class index for
/// categorical modalities.
struct Observation {
  std::vector<double> values;
  int category = -1;
};

/// sum_m weight_m log p(x_m | decoded_m) for a single data point. For
/// categorical modalities `decoded` holds logits.
inline double recon_log_lik(const LikelihoodSpec& spec, std::span<const std::vector<double>> decoded,
                            std::span<const Observation> observed) {
  if (decoded.size() != spec.size() || observed.size() != spec.size()) {
    throw ArgumentError("recon_log_lik: modality count mismatch");
  }
  double total = 0.0;
  for (std::size_t m = 0; m < spec.size(); ++m) {
    const auto& p = decoded[m];
    const auto& x = observed[m];
    double ll = 0.0;
    switch (spec.families[m]) {
      case Likelihood::Gaussian:
        if (p.size() != x.values.size()) throw ArgumentError("recon_log_lik: gaussian shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double r = x.values[j] - p[j];
          ll += -0.5 * r * r - 0.5 * std::log(2.0 * std::numbers::pi);
        }
        break;
      case Likelihood::Laplace:
        if (p.size() != x.values.size()) throw ArgumentError("recon_log_lik: laplace shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) ll += -std::abs(x.values[j] - p[j]) - std::numbers::ln2;
        break;
      case Likelihood::Categorical: {
        if (x.category < 0 || static_cast<std::size_t>(x.category) >= p.size()) {
          throw ArgumentError("recon_log_lik: category out of range");
        }
        const double mx = *std::max_element(p.begin(), p.end());
        double z = 0.0;
        for (double l : p) z += std::exp(l - mx);
        ll = p[static_cast<std::size_t>(x.category)] - mx - std::log(z);
        break;
      }
    }
    total += spec.weights[m] * ll;
  }
  return total;
}

/// -sum_k pi_k ln pi_k.
inline double categorical_entropy(const SubsetWeights& w) {
  double h = 0.0;
  for (double p : w.pi())
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

/// Where the subset weights enter the objective.
enum class WeightPlacement {
  /// sum_k pi_k (recon_k - beta kl_k) + s H(pi)
  WeightedElbo,
  /// sum_k (pi_k recon_k - beta kl_k) + s H(pi)
  ReconOnly,
};

struct ObjectiveOptions {
  double beta = 1.0;
  double entropy_scale = 1000.0;
  WeightPlacement placement = WeightPlacement::WeightedElbo;
};

/// Scalar form of the pi-weighted objective (the additive constant is dropped).
inline double codevae_objective(std::span<const double> recon, std::span<const double> kl, const SubsetWeights& w,
                                const ObjectiveOptions& opt) {
  if (recon.size() != w.size() || kl.size() != w.size()) throw ArgumentError("codevae_objective: length mismatch");
  if (!(opt.beta >= 0.0) || !(opt.entropy_scale >= 0.0)) throw ArgumentError("codevae_objective: negative scale");
  const auto pi = w.pi();
  double total = 0.0;
  for (std::size_t k = 0; k < pi.size(); ++k) {
    if (opt.placement == WeightPlacement::WeightedElbo) {
      total += pi[k] * (recon[k] - opt.beta * kl[k]);
    } else {
      total += pi[k] * recon[k] - opt.beta * kl[k];
    }
  }
  if (opt.entropy_scale != 0.0) total += opt.entropy_scale * categorical_entropy(w);
  return total;
}

/// Graph form of codevae_objective. recon and kl are (1 x K) rows, logits a
/// (1 x K) row. Returns the scalar objective node.
inline NodeId objective_node(Tape& tape, NodeId recon, NodeId kl, NodeId logits, const ObjectiveOptions& opt) {
  const NodeId pi = tape.softmax(logits);
  NodeId data_term;
  if (opt.placement == WeightPlacement::WeightedElbo) {
    data_term = tape.sum(tape.mul(pi, tape.sub(recon, tape.scale(kl, opt.beta))));
  } else {
    data_term = tape.sub(tape.sum(tape.mul(pi, recon)), tape.scale(tape.sum(kl), opt.beta));
  }
  if (opt.entropy_scale == 0.0) return data_term;
  const NodeId entropy = tape.scale(tape.sum(tape.mul(pi, tape.log(pi))), -1.0);
  return tape.add(data_term, tape.scale(entropy, opt.entropy_scale));
}

}  // namespace codevae
