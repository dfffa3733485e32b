#pragma once

#include <random>
#include <span>
#include <vector>

#include "codevae/dataset.hpp"
#include "codevae/elbo.hpp"
#include "codevae/gaussian.hpp"
#include "codevae/mlp.hpp"
#include "codevae/tape.hpp"

namespace codevae {

struct ModelConfig {
  std::vector<int> dims;
  std::vector<Likelihood> families;
  int latent_dim = 8;
  std::vector<int> hidden = {64};
  /// Expert error correlation used by the aggregator.
  double rho = 0.0;

  int modalities() const { return static_cast<int>(dims.size()); }

  void validate() const {
    if (dims.empty() || dims.size() != families.size()) throw ArgumentError("ModelConfig: dims/families mismatch");
    if (dims.size() > static_cast<std::size_t>(kMaxModalities)) throw ArgumentError("ModelConfig: too many modalities");
    if (latent_dim < 1) throw ArgumentError("ModelConfig: latent_dim must be positive");
    CorrelationSpec{rho};
    for (int d : dims)
      if (d < 1) throw ArgumentError("ModelConfig: modality widths must be positive");
    for (int h : hidden)
      if (h < 1) throw ArgumentError("ModelConfig: hidden widths must be positive");
  }
};

/// One encoder and one decoder per modality plus the subset weight logits.
class CodeVaeModel {
 public:
  CodeVaeModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    subsets_ = enumerate_subsets(config_.modalities());
    std::mt19937_64 rng(seed);
    for (std::size_t m = 0; m < config_.dims.size(); ++m) encoders_.push_back(MlpParams::random(encoder_sizes(m), rng));
    for (std::size_t m = 0; m < config_.dims.size(); ++m) decoders_.push_back(MlpParams::random(decoder_sizes(m), rng));
    pi_logits_ = Matrix::Zero(1, static_cast<Eigen::Index>(subsets_.size()));
  }

  const ModelConfig& config() const noexcept { return config_; }
  int modalities() const noexcept { return config_.modalities(); }
  int latent_dim() const noexcept { return config_.latent_dim; }
  const std::vector<SubsetMask>& subsets() const noexcept { return subsets_; }

  const std::vector<MlpParams>& encoders() const noexcept { return encoders_; }
  const std::vector<MlpParams>& decoders() const noexcept { return decoders_; }
  std::vector<MlpParams>& encoders() noexcept { return encoders_; }
  std::vector<MlpParams>& decoders() noexcept { return decoders_; }
  const Matrix& pi_logits() const noexcept { return pi_logits_; }
  Matrix& pi_logits() noexcept { return pi_logits_; }

  SubsetWeights weights() const {
    return SubsetWeights(std::vector<double>(pi_logits_.data(), pi_logits_.data() + pi_logits_.size()));
  }

  LikelihoodSpec likelihood() const { return LikelihoodSpec::from_dims(config_.families, config_.dims); }

  /// Encoder input width: the feature width, or the class count (one-hot).
  std::vector<int> encoder_sizes(std::size_t m) const {
    std::vector<int> s{config_.dims[m]};
    s.insert(s.end(), config_.hidden.begin(), config_.hidden.end());
    s.push_back(2 * config_.latent_dim);
    return s;
  }
  std::vector<int> decoder_sizes(std::size_t m) const {
    std::vector<int> s{config_.latent_dim};
    s.insert(s.end(), config_.hidden.begin(), config_.hidden.end());
    s.push_back(config_.dims[m]);
    return s;
  }

  /// Fixed parameter order: encoder layers, decoder layers, logits.
  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    auto collect = [&](std::vector<MlpParams>& nets) {
      for (auto& n : nets)
        for (std::size_t l = 0; l < n.layers(); ++l) {
          out.push_back(&n.weights[l]);
          out.push_back(&n.biases[l]);
        }
    };
    collect(encoders_);
    collect(decoders_);
    out.push_back(&pi_logits_);
    return out;
  }
  std::vector<const Matrix*> parameters() const {
    auto refs = const_cast<CodeVaeModel*>(this)->parameters();
    return {refs.begin(), refs.end()};
  }

 private:
  ModelConfig config_;
  std::vector<SubsetMask> subsets_;
  std::vector<MlpParams> encoders_;
  std::vector<MlpParams> decoders_;
  Matrix pi_logits_;
};

/// Minibatch in encoder-ready form.
struct Batch {
  std::vector<Matrix> inputs;                  // encoder inputs (one-hot for categorical)
  std::vector<Matrix> targets;                 // real-valued reconstruction targets
  std::vector<std::vector<int>> categories;    // categorical targets
  std::vector<int> labels;
  Eigen::Index size = 0;
};

inline Batch make_batch(const MultimodalDataset& ds, std::span<const std::size_t> rows) {
  Batch b;
  b.size = static_cast<Eigen::Index>(rows.size());
  for (const auto& m : ds.modalities) {
    if (m.categorical()) {
      Matrix onehot = Matrix::Zero(b.size, m.dim);
      std::vector<int> cats(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        cats[i] = m.categories[rows[i]];
        onehot(static_cast<Eigen::Index>(i), cats[i]) = 1.0;
      }
      b.inputs.push_back(onehot);
      b.targets.push_back(std::move(onehot));
      b.categories.push_back(std::move(cats));
    } else {
      Matrix x(b.size, m.dim);
      for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = m.values.row(static_cast<Eigen::Index>(rows[i]));
      b.inputs.push_back(x);
      b.targets.push_back(std::move(x));
      b.categories.emplace_back();
    }
  }
  for (std::size_t r : rows) b.labels.push_back(ds.labels[r]);
  return b;
}

inline Batch make_batch(const MultimodalDataset& ds, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
  return make_batch(ds, rows);
}

struct ForwardOptions {
  ObjectiveOptions objective;
  /// Learned subset weights; otherwise pi is held uniform.
  bool learn_pi = true;
};

/// Node handles for one forward pass over a batch and a list of subsets.
struct ForwardGraph {
  std::vector<NodeId> params;  // aligned with CodeVaeModel::parameters()
  std::vector<GaussianHeads> experts;
  NodeId posterior_mean = 0;   // (K' n) x D
  NodeId posterior_std = 0;    // (K' n) x D
  NodeId recon_rows = 0;       // (K' n) x 1, weighted log p(X | z)
  NodeId kl_rows = 0;          // (K' n) x 1
  NodeId recon = 0;            // 1 x K', batch means
  NodeId kl = 0;               // 1 x K'
  NodeId objective = 0;        // scalar, only when all K subsets are included
  std::vector<NodeId> decoded; // per modality, (K' n) x dim
  int encoder_calls = 0;
};

/// Posterior mean and std of q(z | X_k) for each subset, stacked by subset
/// block: rows [k n, (k+1) n) belong to subsets[k].
struct SubsetPosteriors {
  Matrix mean;
  Matrix stddev;
  Eigen::Index rows_per_subset = 0;
};

inline SubsetPosteriors infer_posteriors(const CodeVaeModel& model, const Batch& batch,
                                         std::span<const SubsetMask> subsets) {
  Tape tape;
  std::vector<NodeId> means, stds;
  for (std::size_t m = 0; m < model.encoders().size(); ++m) {
    const MlpBinding enc = bind(tape, model.encoders()[m]);
    const auto heads = gaussian_heads(tape, forward_mlp(enc, tape.constant(batch.inputs[m]), tape));
    means.push_back(heads.mean);
    stds.push_back(heads.stddev);
  }
  std::vector<std::vector<int>> members;
  for (const auto& s : subsets) members.push_back(s.members());
  const NodeId post = tape.subset_consensus(means, stds, std::move(members), model.config().rho);
  const Eigen::Index d = model.latent_dim();
  return {tape.value(post).leftCols(d), tape.value(post).rightCols(d), batch.size};
}

/// Encodes every modality once, aggregates each requested subset with CoDE,
/// draws z = mean + std * eps (the same eps for every subset), decodes all
/// modalities and assembles the per-subset ELBO terms and the objective.
inline ForwardGraph build_forward(Tape& tape, const CodeVaeModel& model, const Batch& batch, const Matrix& eps,
                                  const ForwardOptions& opt, std::span<const SubsetMask> subsets) {
  const auto n_mod = static_cast<std::size_t>(model.modalities());
  if (batch.inputs.size() != n_mod) throw ArgumentError("build_forward: batch modality count mismatch");
  if (eps.rows() != batch.size || eps.cols() != model.latent_dim()) throw ArgumentError("build_forward: eps shape mismatch");
  if (subsets.empty()) throw ArgumentError("build_forward: no subsets");

  ForwardGraph g;
  std::vector<MlpBinding> enc, dec;
  for (const auto& e : model.encoders()) enc.push_back(bind(tape, e));
  for (const auto& d : model.decoders()) dec.push_back(bind(tape, d));
  const NodeId logits = opt.learn_pi ? tape.variable(model.pi_logits())
                                     : tape.constant(Matrix::Zero(1, model.pi_logits().cols()));
  for (const auto* nets : {&enc, &dec})
    for (const auto& b : *nets)
      for (std::size_t l = 0; l < b.weights.size(); ++l) {
        g.params.push_back(b.weights[l]);
        g.params.push_back(b.biases[l]);
      }
  g.params.push_back(logits);

  std::vector<NodeId> means, stds;
  for (std::size_t m = 0; m < n_mod; ++m) {
    const NodeId x = tape.constant(batch.inputs[m]);
    g.experts.push_back(gaussian_heads(tape, forward_mlp(enc[m], x, tape)));
    ++g.encoder_calls;
    means.push_back(g.experts.back().mean);
    stds.push_back(g.experts.back().stddev);
  }

  std::vector<std::vector<int>> members;
  for (const auto& s : subsets) members.push_back(s.members());
  const auto k = static_cast<Eigen::Index>(subsets.size());
  const NodeId post = tape.subset_consensus(means, stds, std::move(members), model.config().rho);
  const Eigen::Index dim = model.latent_dim();
  g.posterior_mean = tape.slice_cols(post, 0, dim);
  g.posterior_std = tape.slice_cols(post, dim, dim);

  const NodeId z = reparameterize(tape, g.posterior_mean, g.posterior_std, eps.replicate(k, 1));

  const LikelihoodSpec lik = model.likelihood();
  NodeId total = 0;
  for (std::size_t m = 0; m < n_mod; ++m) {
    const NodeId out = forward_mlp(dec[m], z, tape);
    g.decoded.push_back(out);
    NodeId ll = 0;
    switch (lik.families[m]) {
      case Likelihood::Gaussian:
        ll = tape.gaussian_log_lik(out, tape.constant(batch.targets[m].replicate(k, 1)));
        break;
      case Likelihood::Laplace:
        ll = tape.laplace_log_lik(out, tape.constant(batch.targets[m].replicate(k, 1)));
        break;
      case Likelihood::Categorical: {
        std::vector<int> tiled;
        tiled.reserve(static_cast<std::size_t>(k * batch.size));
        for (Eigen::Index r = 0; r < k; ++r) tiled.insert(tiled.end(), batch.categories[m].begin(), batch.categories[m].end());
        ll = tape.categorical_log_lik(out, std::move(tiled));
        break;
      }
    }
    if (lik.weights[m] != 1.0) ll = tape.scale(ll, lik.weights[m]);
    total = m == 0 ? ll : tape.add(total, ll);
  }
  g.recon_rows = total;
  g.kl_rows = tape.kl_std_normal(g.posterior_mean, g.posterior_std);
  g.recon = tape.block_mean(g.recon_rows, k);
  g.kl = tape.block_mean(g.kl_rows, k);
  if (subsets.size() == model.subsets().size()) g.objective = objective_node(tape, g.recon, g.kl, logits, opt.objective);
  return g;
}

inline ForwardGraph build_forward(Tape& tape, const CodeVaeModel& model, const Batch& batch, const Matrix& eps,
                                  const ForwardOptions& opt) {
  return build_forward(tape, model, batch, eps, opt, model.subsets());
}

}  // namespace codevae
