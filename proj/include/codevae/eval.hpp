#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "codevae/model.hpp"
#include "codevae/trainer.hpp"

namespace codevae {

namespace detail {

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

}  // namespace detail

/// Per-draw batch-mean ELBO of one subset: each draw reconstructs every
/// modality from one z ~ q(z | X_mask) per row.
inline std::vector<double> subset_elbo_draws(const CodeVaeModel& model, const Batch& batch, const SubsetMask& mask,
                                             int samples, std::mt19937_64& rng) {
  if (samples < 1) throw ArgumentError("subset_elbo: samples must be at least 1");
  if (mask.modalities() != model.modalities()) throw ArgumentError("subset_elbo: mask modality count mismatch");
  const std::vector<SubsetMask> one{mask};
  std::vector<double> out;
  for (int s = 0; s < samples; ++s) {
    Tape tape;
    const auto g = build_forward(tape, model, batch, detail::standard_normal(batch.size, model.latent_dim(), rng),
                                 ForwardOptions{}, one);
    out.push_back(tape.value(g.recon)(0, 0) - tape.value(g.kl)(0, 0));
  }
  return out;
}

/// Monte Carlo estimate of E_q(z|X_k)[log p(X | z)] - KL[q(z|X_k) || p(z)],
/// averaged over the batch rows.
inline double subset_elbo(const CodeVaeModel& model, const Batch& batch, const SubsetMask& mask, int samples,
                          std::mt19937_64& rng) {
  const auto d = subset_elbo_draws(model, batch, mask, samples, rng);
  return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

/// Mean squared error of one real-valued modality decoded from
/// z ~ q(z | X_k), for every subset k (model.subsets() order).
inline std::vector<double> reconstruction_mse(const CodeVaeModel& model, const Batch& batch, int modality, int samples,
                                              std::mt19937_64& rng) {
  if (samples < 1) throw ArgumentError("reconstruction_mse: samples must be at least 1");
  if (modality < 0 || modality >= model.modalities()) throw ArgumentError("reconstruction_mse: modality out of range");
  const auto m = static_cast<std::size_t>(modality);
  if (model.config().families[m] == Likelihood::Categorical) {
    throw ArgumentError("reconstruction_mse: modality is categorical");
  }
  const std::size_t k = model.subsets().size();
  std::vector<double> out(k, 0.0);
  const Eigen::Index n = batch.size;
  for (int s = 0; s < samples; ++s) {
    Tape tape;
    const auto g = build_forward(tape, model, batch, detail::standard_normal(n, model.latent_dim(), rng),
                                 ForwardOptions{});
    const Matrix& dec = tape.value(g.decoded[m]);
    for (std::size_t i = 0; i < k; ++i) {
      const auto block = dec.middleRows(static_cast<Eigen::Index>(i) * n, n);
      out[i] += (block - batch.targets[m]).squaredNorm() / static_cast<double>(block.size()) / samples;
    }
  }
  return out;
}

/// Frechet distance between Gaussian fits of two samples (rows are points):
/// |m_x - m_y|^2 + tr(C_x + C_y - 2 (C_x^1/2 C_y C_x^1/2)^1/2).
inline double frechet_distance(const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols() || x.rows() < 2 || y.rows() < 2) throw ArgumentError("frechet_distance: bad sample shapes");
  auto moments = [](const Matrix& a, Eigen::RowVectorXd& mean, Matrix& cov) {
    mean = a.colwise().mean();
    const Matrix c = a.rowwise() - mean;
    cov = c.transpose() * c / static_cast<double>(a.rows() - 1);
  };
  auto psd_sqrt = [](const Matrix& a) {
    const Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    return Matrix(es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                  es.eigenvectors().transpose());
  };
  Eigen::RowVectorXd mx, my;
  Matrix cx, cy;
  moments(x, mx, cx);
  moments(y, my, cy);
  const Matrix root = psd_sqrt(cx);
  return (mx - my).squaredNorm() + cx.trace() + cy.trace() - 2.0 * psd_sqrt(root * cy * root).trace();
}

/// Frechet distance between one real-valued modality decoded from
/// z ~ q(z | X_k) and the observed values, for every subset k.
inline std::vector<double> conditional_generation_distance(const CodeVaeModel& model, const Batch& batch,
                                                           int modality, std::mt19937_64& rng) {
  if (modality < 0 || modality >= model.modalities()) throw ArgumentError("generation distance: modality out of range");
  const auto m = static_cast<std::size_t>(modality);
  if (model.config().families[m] == Likelihood::Categorical) {
    throw ArgumentError("generation distance: modality is categorical");
  }
  const auto post = infer_posteriors(model, batch, model.subsets());
  const Matrix z = post.mean + post.stddev.cwiseProduct(detail::standard_normal(post.mean.rows(), post.mean.cols(), rng));
  Tape tape;
  const Matrix gen = tape.value(forward_mlp(bind(tape, model.decoders()[m]), tape.constant(z), tape));
  std::vector<double> out;
  const Eigen::Index n = batch.size;
  for (std::size_t k = 0; k < model.subsets().size(); ++k) {
    out.push_back(frechet_distance(gen.middleRows(static_cast<Eigen::Index>(k) * n, n), batch.targets[m]));
  }
  return out;
}

/// Multinomial logistic regression fitted by full-batch gradient descent on
/// standardized features with an L2 penalty on the weights.
class SoftmaxRegression {
 public:
  struct Options {
    int max_iter = 3000;
    /// Penalty is (l2 / 2) ||W||^2 added to the mean cross-entropy; a
    /// negative value selects 1 / n.
    double l2 = -1.0;
    double tolerance = 1e-6;
  };

  SoftmaxRegression() = default;

  static SoftmaxRegression fit(const Matrix& x, std::span<const int> labels, int classes, const Options& opt) {
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols();
    if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw ArgumentError("softmax regression: size mismatch");
    if (classes < 2) throw EvaluationError("softmax regression: need at least two classes");
    std::vector<int> seen(static_cast<std::size_t>(classes), 0);
    for (int l : labels) {
      if (l < 0 || l >= classes) throw ArgumentError("softmax regression: label out of range");
      seen[static_cast<std::size_t>(l)] = 1;
    }
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2) {
      throw EvaluationError("softmax regression: training labels contain a single class");
    }

    SoftmaxRegression m;
    m.classes_ = classes;
    m.shift_ = x.colwise().mean();
    Eigen::RowVectorXd sd = ((x.rowwise() - m.shift_).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
    for (Eigen::Index j = 0; j < p; ++j)
      if (!(sd(j) > 1e-12)) sd(j) = 1.0;
    m.scale_ = sd.cwiseInverse();

    Matrix xs(n, p + 1);
    xs.leftCols(p) = (x.rowwise() - m.shift_).array().rowwise() * m.scale_.array();
    xs.col(p).setOnes();
    Matrix y = Matrix::Zero(n, classes);
    for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;

    const double l2 = opt.l2 < 0.0 ? 1.0 / static_cast<double>(n) : opt.l2;
    // Step 1/L with L bounding the Hessian of the mean cross-entropy.
    const Matrix gram = xs.transpose() * xs / static_cast<double>(n);
    const double lip = 0.5 * Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff() + l2;
    const double step = 1.0 / lip;

    Matrix w = Matrix::Zero(p + 1, classes);
    for (m.iterations_ = 0; m.iterations_ < opt.max_iter; ++m.iterations_) {
      Matrix logits = xs * w;
      logits = logits.colwise() - logits.rowwise().maxCoeff();
      Matrix prob = logits.array().exp();
      prob = prob.array().colwise() / prob.rowwise().sum().array();
      Matrix grad = xs.transpose() * (prob - y) / static_cast<double>(n);
      grad.topRows(p) += l2 * w.topRows(p);
      if (grad.cwiseAbs().maxCoeff() < opt.tolerance) break;
      w -= step * grad;
    }
    m.weights_ = std::move(w);
    return m;
  }

  std::vector<int> predict(const Matrix& x) const {
    const Eigen::Index p = weights_.rows() - 1;
    if (x.cols() != p) throw ArgumentError("softmax regression: feature width mismatch");
    const Matrix xs = (x.rowwise() - shift_).array().rowwise() * scale_.array();
    const Matrix logits = (xs * weights_.topRows(p)).rowwise() + weights_.row(p);
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) logits.row(i).maxCoeff(&out[static_cast<std::size_t>(i)]);
    return out;
  }

  double accuracy(const Matrix& x, std::span<const int> labels) const {
    const auto pred = predict(x);
    if (pred.size() != labels.size() || pred.empty()) throw ArgumentError("softmax regression: size mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  }

  int iterations() const noexcept { return iterations_; }
  int classes() const noexcept { return classes_; }

 private:
  Eigen::RowVectorXd shift_;
  Eigen::RowVectorXd scale_;
  Matrix weights_;
  int classes_ = 0;
  int iterations_ = 0;
};

struct ClassifierOptions {
  /// Rows of the training split used to fit the classifier.
  int train_rows = 500;
  /// Feed sampled latents instead of posterior means.
  bool use_samples = false;
  std::uint64_t seed = 0;
  SoftmaxRegression::Options fit;
};

namespace detail {

inline Matrix subset_latents(const CodeVaeModel& model, const Batch& batch, const SubsetMask& mask, bool sample,
                             std::mt19937_64& rng) {
  const std::vector<SubsetMask> one{mask};
  const auto post = infer_posteriors(model, batch, one);
  if (!sample) return post.mean;
  return post.mean + post.stddev.cwiseProduct(standard_normal(post.mean.rows(), post.mean.cols(), rng));
}

}  // namespace detail

/// Held-out accuracy of a linear classifier fitted on latents of q(z | X_mask).
inline double latent_classifier_accuracy(const CodeVaeModel& model, const MultimodalDataset& train_split,
                                         const MultimodalDataset& test_split, const SubsetMask& mask,
                                         const ClassifierOptions& opt = {}) {
  if (train_split.rows() == 0 || test_split.rows() == 0) throw EvaluationError("classifier: empty split");
  if (train_split.classes < 2) throw EvaluationError("classifier: dataset has fewer than two classes");
  std::mt19937_64 rng(opt.seed);
  const std::size_t n_train = std::min(train_split.rows(), static_cast<std::size_t>(opt.train_rows));
  const Batch tr = make_batch(train_split, 0, n_train);
  const Batch te = make_batch(test_split, 0, test_split.rows());
  const auto clf = SoftmaxRegression::fit(detail::subset_latents(model, tr, mask, opt.use_samples, rng), tr.labels,
                                          train_split.classes, opt.fit);
  return clf.accuracy(detail::subset_latents(model, te, mask, opt.use_samples, rng), te.labels);
}

struct CardinalityRow {
  int cardinality = 0;
  int subsets = 0;
  double mean_pi = 0.0;
  double mean_trace = 0.0;
};

struct PiTraceReport {
  std::vector<SubsetMask> subsets;
  std::vector<double> pi;
  std::vector<double> trace;
  std::vector<CardinalityRow> by_cardinality;
};

/// Groups subsets by cardinality; mean pi_k and mean trace of q(z | X_k) per group.
inline PiTraceReport pi_trace_report(const CodeVaeModel& model, const Batch& batch) {
  PiTraceReport r;
  r.subsets = model.subsets();
  r.pi = model.weights().pi();
  r.trace = mean_subset_trace(model, batch);
  for (int c = 1; c <= model.modalities(); ++c) {
    CardinalityRow row{c, 0, 0.0, 0.0};
    for (std::size_t k = 0; k < r.subsets.size(); ++k) {
      if (r.subsets[k].cardinality() != c) continue;
      ++row.subsets;
      row.mean_pi += r.pi[k];
      row.mean_trace += r.trace[k];
    }
    row.mean_pi /= row.subsets;
    row.mean_trace /= row.subsets;
    r.by_cardinality.push_back(row);
  }
  return r;
}

struct EvalOptions {
  int elbo_samples = 8;
  /// Held-out rows used for the ELBO and trace estimates.
  int eval_rows = 512;
  std::uint64_t seed = 0;
  ClassifierOptions classifier;
};

struct EvalReport {
  std::vector<SubsetMask> subsets;
  std::vector<double> elbo;
  std::vector<double> accuracy;
  PiTraceReport pi_trace;

  /// Mean of `values` over the subsets of cardinality c.
  double cardinality_mean(std::span<const double> values, int c) const {
    double s = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < subsets.size(); ++k)
      if (subsets[k].cardinality() == c) {
        s += values[k];
        ++n;
      }
    return n ? s / n : std::nan("");
  }
  double mean_elbo() const { return std::accumulate(elbo.begin(), elbo.end(), 0.0) / static_cast<double>(elbo.size()); }
  double mean_accuracy() const {
    return std::accumulate(accuracy.begin(), accuracy.end(), 0.0) / static_cast<double>(accuracy.size());
  }
};

inline EvalReport evaluate(const CodeVaeModel& model, const MultimodalDataset& train_split,
                           const MultimodalDataset& test_split, const EvalOptions& opt = {}) {
  EvalReport r;
  r.subsets = model.subsets();
  std::mt19937_64 rng(opt.seed);
  const Batch held = make_batch(test_split, 0, std::min(test_split.rows(), static_cast<std::size_t>(opt.eval_rows)));
  for (const auto& s : r.subsets) {
    r.elbo.push_back(subset_elbo(model, held, s, opt.elbo_samples, rng));
    r.accuracy.push_back(latent_classifier_accuracy(model, train_split, test_split, s, opt.classifier));
  }
  r.pi_trace = pi_trace_report(model, held);
  return r;
}

inline void write_subset_csv(const EvalReport& r, std::ostream& out) {
  out << "subset,cardinality,pi,trace,elbo,accuracy\n";
  for (std::size_t k = 0; k < r.subsets.size(); ++k) {
    out << r.subsets[k].label() << ',' << r.subsets[k].cardinality() << ',' << format_real(r.pi_trace.pi[k]) << ','
        << format_real(r.pi_trace.trace[k]) << ',' << format_real(r.elbo[k]) << ',' << format_real(r.accuracy[k])
        << '\n';
  }
}

inline void write_cardinality_csv(const EvalReport& r, std::ostream& out) {
  out << "cardinality,subsets,mean_pi,mean_trace,mean_elbo,mean_accuracy\n";
  for (const auto& row : r.pi_trace.by_cardinality) {
    out << row.cardinality << ',' << row.subsets << ',' << format_real(row.mean_pi) << ','
        << format_real(row.mean_trace) << ',' << format_real(r.cardinality_mean(r.elbo, row.cardinality)) << ','
        << format_real(r.cardinality_mean(r.accuracy, row.cardinality)) << '\n';
  }
}

/// Selection metric: mean subset ELBO over a held-out batch (higher is better).
inline SelectionMetric mean_elbo_metric(const MultimodalDataset& heldout, int rows, int samples, std::uint64_t seed) {
  return {"mean_subset_elbo", true, [&heldout, rows, samples, seed](const CodeVaeModel& m) {
            std::mt19937_64 rng(seed);
            const Batch b = make_batch(heldout, 0, std::min(heldout.rows(), static_cast<std::size_t>(rows)));
            double s = 0.0;
            for (const auto& k : m.subsets()) s += subset_elbo(m, b, k, samples, rng);
            return s / static_cast<double>(m.subsets().size());
          }};
}

/// Selection metric: squared error of one modality decoded from sampled
/// latents, averaged over every conditioning subset (lower is better).
inline SelectionMetric reconstruction_metric(const MultimodalDataset& heldout, int modality, int rows, int samples,
                                             std::uint64_t seed) {
  return {"reconstruction_mse", false, [&heldout, modality, rows, samples, seed](const CodeVaeModel& m) {
            std::mt19937_64 rng(seed);
            const Batch b = make_batch(heldout, 0, std::min(heldout.rows(), static_cast<std::size_t>(rows)));
            const auto per = reconstruction_mse(m, b, modality, samples, rng);
            return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
          }};
}

/// Selection metric: Frechet distance of one modality generated from every
/// conditioning subset, averaged over subsets (lower is better).
inline SelectionMetric generation_distance_metric(const MultimodalDataset& heldout, int modality, int rows,
                                                  std::uint64_t seed) {
  return {"conditional_frechet", false, [&heldout, modality, rows, seed](const CodeVaeModel& m) {
            std::mt19937_64 rng(seed);
            const Batch b = make_batch(heldout, 0, std::min(heldout.rows(), static_cast<std::size_t>(rows)));
            const auto per = conditional_generation_distance(m, b, modality, rng);
            return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
          }};
}

struct AblationRow {
  std::string variant;
  PiMode pi_mode = PiMode::Learned;
  double rho = 0.0;
  double mean_elbo = 0.0;
  double mean_accuracy = 0.0;
};

struct AblationOptions {
  std::vector<double> rho_grid = {0.0, 0.2, 0.4, 0.6, 0.8};
  EvalOptions eval;
};

struct AblationResult {
  double selected_rho = 0.0;
  GridResult rho_search;
  std::vector<AblationRow> rows;
};

/// Learned vs equal subset weights, crossed with a cross-validated rho vs
/// rho = 0. rho* maximizes the held-out mean subset ELBO of the learned-pi
/// model over `rho_grid`.
inline AblationResult ablation_compare(const MultimodalDataset& train_split, const MultimodalDataset& test_split,
                                       const TrainConfig& base, const AblationOptions& opt = {}) {
  AblationResult res;
  TrainConfig learned = base;
  learned.pi_mode = PiMode::Learned;
  const double betas[] = {base.beta};
  res.rho_search = grid_search(learned, betas, opt.rho_grid, train_split,
                               mean_elbo_metric(test_split, opt.eval.eval_rows, opt.eval.elbo_samples, opt.eval.seed));
  const GridCell* best = res.rho_search.best_cell();
  if (!best) throw EvaluationError("ablation: every rho cell failed");
  res.selected_rho = best->rho;

  const struct {
    const char* name;
    PiMode mode;
    double rho;
  } variants[] = {{"learned_pi_rho_cv", PiMode::Learned, res.selected_rho},
                  {"learned_pi_rho_0", PiMode::Learned, 0.0},
                  {"equal_pi_rho_cv", PiMode::Uniform, res.selected_rho},
                  {"equal_pi_rho_0", PiMode::Uniform, 0.0}};
  for (const auto& v : variants) {
    TrainConfig c = base;
    c.pi_mode = v.mode;
    c.rho = v.rho;
    const TrainResult t = train(c, train_split, test_split);
    const EvalReport e = evaluate(t.model, train_split, test_split, opt.eval);
    res.rows.push_back({v.name, v.mode, v.rho, e.mean_elbo(), e.mean_accuracy()});
  }
  return res;
}

inline void write_ablation_csv(const AblationResult& r, std::ostream& out) {
  out << "variant,pi_mode,rho,mean_elbo,mean_accuracy\n";
  for (const auto& row : r.rows) {
    out << row.variant << ',' << to_string(row.pi_mode) << ',' << format_real(row.rho) << ','
        << format_real(row.mean_elbo) << ',' << format_real(row.mean_accuracy) << '\n';
  }
}

}  // namespace codevae
