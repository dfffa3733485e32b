#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "codevae/adam.hpp"
#include "codevae/checkpoint.hpp"
#include "codevae/dataset.hpp"
#include "codevae/model.hpp"

namespace codevae {

enum class PiMode { Learned, Uniform };

inline std::string to_string(PiMode m) { return m == PiMode::Learned ? "learned" : "uniform"; }

inline PiMode pi_mode_from_string(const std::string& s) {
  if (s == "learned") return PiMode::Learned;
  if (s == "uniform") return PiMode::Uniform;
  throw ArgumentError("unknown pi mode '" + s + "' (expected learned or uniform)");
}

struct TrainConfig {
  int latent_dim = 8;
  std::vector<int> hidden = {64};
  int batch_size = 128;
  int epochs = 200;
  double learning_rate = 1e-3;
  double beta = 1.0;
  double rho = 0.0;
  double entropy_scale = 1000.0;
  std::uint64_t seed = 1;
  PiMode pi_mode = PiMode::Learned;
  /// Weight only the reconstruction terms by pi; the KL terms enter unweighted.
  bool strict_eq4 = false;
  /// Rows of the held-out set used for the per-subset trace report.
  int trace_rows = 512;

  void validate() const {
    if (latent_dim < 1) throw ArgumentError("TrainConfig: latent_dim must be positive");
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch size must be at least 1");
    if (epochs < 0) throw ArgumentError("TrainConfig: epochs must be non-negative");
    if (!(learning_rate > 0.0)) throw ArgumentError("TrainConfig: learning rate must be positive");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ArgumentError("TrainConfig: beta must be positive");
    if (!(entropy_scale >= 0.0) || !std::isfinite(entropy_scale)) {
      throw ArgumentError("TrainConfig: entropy scale must be non-negative");
    }
    if (trace_rows < 1) throw ArgumentError("TrainConfig: trace_rows must be positive");
    CorrelationSpec{rho};
    for (int h : hidden)
      if (h < 1) throw ArgumentError("TrainConfig: hidden widths must be positive");
  }

  ModelConfig model_config(const MultimodalDataset& ds) const {
    return ModelConfig{ds.dims(), ds.families(), latent_dim, hidden, rho};
  }

  ForwardOptions forward_options() const {
    ForwardOptions f;
    f.objective.beta = beta;
    f.objective.entropy_scale = entropy_scale;
    f.objective.placement = strict_eq4 ? WeightPlacement::ReconOnly : WeightPlacement::WeightedElbo;
    f.learn_pi = pi_mode == PiMode::Learned;
    return f;
  }
};

/// Training stopped because the objective or a gradient became non-finite.
/// Carries the model as it was at the end of the last completed epoch.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(int epoch, CodeVaeModel last_good)
      : std::runtime_error("training diverged in epoch " + std::to_string(epoch)),
        epoch_(epoch),
        last_good_(std::move(last_good)) {}
  int epoch() const noexcept { return epoch_; }
  const CodeVaeModel& last_good() const noexcept { return last_good_; }

 private:
  int epoch_;
  CodeVaeModel last_good_;
};

struct TrainReport {
  /// Mean minibatch objective per epoch.
  std::vector<double> objective_trace;
  std::vector<double> pi;
  /// Per subset (model.subsets() order): mean over held-out rows of sum_d var_d.
  std::vector<double> subset_trace;
  std::string checkpoint_path;
  double wall_seconds = 0.0;
  std::uint64_t steps = 0;
  int encoder_calls_per_batch = 0;
};

struct TrainResult {
  CodeVaeModel model;
  TrainReport report;
};

/// Mean of sum_d var_d of q(z | X_k) per subset over the batch.
inline std::vector<double> mean_subset_trace(const CodeVaeModel& model, const Batch& batch) {
  const auto post = infer_posteriors(model, batch, model.subsets());
  std::vector<double> out;
  const Eigen::Index n = post.rows_per_subset;
  for (std::size_t k = 0; k < model.subsets().size(); ++k) {
    const auto block = post.stddev.middleRows(static_cast<Eigen::Index>(k) * n, n);
    out.push_back(block.array().square().rowwise().sum().mean());
  }
  return out;
}

inline KeyValues checkpoint_meta(const TrainConfig& cfg, std::uint64_t steps) {
  return {{"seed", std::to_string(cfg.seed)},
          {"steps", std::to_string(steps)},
          {"epochs", std::to_string(cfg.epochs)},
          {"batch", std::to_string(cfg.batch_size)},
          {"beta", format_real(cfg.beta)},
          {"entropy_scale", format_real(cfg.entropy_scale)},
          {"pi_mode", to_string(cfg.pi_mode)},
          {"strict_eq4", cfg.strict_eq4 ? "1" : "0"}};
}

/// Minibatch training over all subsets with one shared noise draw per batch.
/// When `checkpoint_prefix` is non-empty the final parameters are saved there.
inline TrainResult train(const TrainConfig& cfg, const MultimodalDataset& data, const MultimodalDataset& heldout,
                         const std::string& checkpoint_prefix = {}) {
  cfg.validate();
  data.validate();
  if (data.rows() == 0) throw ArgumentError("train: empty dataset");
  if (heldout.dims() != data.dims() || heldout.families() != data.families() || heldout.rows() == 0) {
    throw ArgumentError("train: held-out set does not match the training set");
  }
  const auto start = std::chrono::steady_clock::now();

  CodeVaeModel model(cfg.model_config(data), cfg.seed);
  std::seed_seq seq{cfg.seed, std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal;
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  const ForwardOptions fwd = cfg.forward_options();

  TrainReport report;
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  CodeVaeModel last_good = model;
  const auto bsz = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bsz) {
      const std::size_t count = std::min(bsz, order.size() - begin);
      const Batch batch = make_batch(data, std::span(order).subspan(begin, count));
      Matrix eps(batch.size, model.latent_dim());
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);

      Tape tape;
      const ForwardGraph g = build_forward(tape, model, batch, eps, fwd);
      report.encoder_calls_per_batch = g.encoder_calls;
      const double obj = tape.value(g.objective)(0, 0);
      if (!std::isfinite(obj)) throw TrainingError(epoch, std::move(last_good));
      const Gradients grads = tape.backward(g.objective);

      std::vector<Matrix> aligned;
      const auto params = model.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto it = grads.find(g.params[i]);
        if (it == grads.end()) {
          aligned.push_back(Matrix::Zero(params[i]->rows(), params[i]->cols()));
        } else {
          if (!it->second.allFinite()) throw TrainingError(epoch, std::move(last_good));
          aligned.push_back(it->second);
        }
      }
      adam_step(adam, params, aligned, /*maximize=*/true);
      ++report.steps;
      total += obj;
      ++batches;
    }
    report.objective_trace.push_back(total / batches);
    last_good = model;
  }

  report.pi = model.weights().pi();
  const auto trace_n = std::min(heldout.rows(), static_cast<std::size_t>(cfg.trace_rows));
  report.subset_trace = mean_subset_trace(model, make_batch(heldout, 0, trace_n));
  if (!checkpoint_prefix.empty()) {
    save_checkpoint(model, checkpoint_meta(cfg, report.steps), checkpoint_prefix);
    report.checkpoint_path = checkpoint_prefix;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(report)};
}

inline TrainResult train(const TrainConfig& cfg, const MultimodalDataset& data) { return train(cfg, data, data); }

/// Held-out score of a trained model used to rank grid cells.
struct SelectionMetric {
  std::string name;
  bool higher_is_better = true;
  std::function<double(const CodeVaeModel&)> evaluate;
};

struct GridCell {
  double beta = 0.0;
  double rho = 0.0;
  std::uint64_t seed = 0;
  double metric = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
  std::string status;
};

struct GridResult {
  std::vector<GridCell> cells;
  std::optional<std::size_t> best;

  const GridCell* best_cell() const { return best ? &cells[*best] : nullptr; }
};

/// Trains one model per (beta, rho) cell with the template's seed. Cells whose
/// training diverges, or whose metric is non-finite, are marked failed. Ties
/// go to the smaller rho, then the smaller beta.
inline GridResult grid_search(const TrainConfig& tmpl, std::span<const double> betas, std::span<const double> rhos,
                              const MultimodalDataset& data, const SelectionMetric& metric, int jobs = 1) {
  if (betas.empty() || rhos.empty()) throw ArgumentError("grid_search: grids must be non-empty");
  if (!metric.evaluate) throw ArgumentError("grid_search: selection metric has no evaluator");
  GridResult result;
  for (double b : betas)
    for (double r : rhos) {
      TrainConfig c = tmpl;
      c.beta = b;
      c.rho = r;
      c.validate();
      result.cells.push_back({b, r, tmpl.seed, std::numeric_limits<double>::quiet_NaN(), false, "pending"});
    }

  auto run_cell = [&](GridCell& cell) {
    TrainConfig c = tmpl;
    c.beta = cell.beta;
    c.rho = cell.rho;
    try {
      const TrainResult r = train(c, data);
      cell.metric = metric.evaluate(r.model);
      cell.ok = std::isfinite(cell.metric);
      cell.status = cell.ok ? "ok" : "failed";
    } catch (const TrainingError&) {
      cell.status = "failed";
    } catch (const NumericalError&) {
      cell.status = "failed";
    }
  };

  const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, static_cast<int>(result.cells.size())));
  if (workers == 1) {
    for (auto& cell : result.cells) run_cell(cell);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < result.cells.size(); i = next++) run_cell(result.cells[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<std::size_t> idx(result.cells.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = result.cells[a];
    const auto& y = result.cells[b];
    return x.rho != y.rho ? x.rho < y.rho : x.beta < y.beta;
  });
  for (std::size_t i : idx) {
    const auto& c = result.cells[i];
    if (!c.ok) continue;
    if (!result.best) {
      result.best = i;
      continue;
    }
    const double cur = result.cells[*result.best].metric;
    if (metric.higher_is_better ? c.metric > cur : c.metric < cur) result.best = i;
  }
  return result;
}

inline void write_grid_csv(const GridResult& r, std::ostream& out) {
  out << "beta,rho,seed,metric,status\n";
  for (const auto& c : r.cells) {
    out << format_real(c.beta) << ',' << format_real(c.rho) << ',' << c.seed << ','
        << (c.ok ? format_real(c.metric) : std::string("nan")) << ',' << c.status << '\n';
  }
}

}  // namespace codevae
