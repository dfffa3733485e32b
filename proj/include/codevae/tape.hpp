#pragma once

// Reverse-mode differentiation over matrix-valued nodes.
//
// Values are (rows x cols) matrices; rows index minibatch samples. The tape
// is append-only so node ids are already a topological order and backward()
// is a single reverse sweep.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "codevae/consensus.hpp"
#include "codevae/error.hpp"

namespace codevae {

using Matrix = Eigen::MatrixXd;
using NodeId = std::size_t;
using Gradients = std::map<NodeId, Matrix>;

enum class OpKind {
  Constant,
  Variable,
  Add,
  Sub,
  Mul,
  Scale,
  AddConst,
  Affine,
  Relu,
  Softplus,
  Exp,
  Log,
  Square,
  Sum,
  RowSum,
  SliceCols,
  ConcatRows,
  TileRows,
  BlockMean,
  Softmax,
  KlStdNormal,
  GaussianLogLik,
  LaplaceLogLik,
  CategoricalLogLik,
  SubsetConsensus,
};

namespace detail {

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConsensusAux {
  std::vector<std::vector<int>> subsets;  // member modality indices per block
  double rho = 0.0;
};

}  // namespace detail

class Tape {
 public:
  NodeId constant(Matrix value) { return push(OpKind::Constant, {}, std::move(value), false); }
  NodeId variable(Matrix value) { return push(OpKind::Variable, {}, std::move(value), true); }

  NodeId add(NodeId a, NodeId b) {
    same_shape(a, b, "add");
    return push(OpKind::Add, {a, b}, value(a) + value(b));
  }
  NodeId sub(NodeId a, NodeId b) {
    same_shape(a, b, "sub");
    return push(OpKind::Sub, {a, b}, value(a) - value(b));
  }
  NodeId mul(NodeId a, NodeId b) {
    same_shape(a, b, "mul");
    return push(OpKind::Mul, {a, b}, value(a).cwiseProduct(value(b)));
  }
  NodeId scale(NodeId a, double c) {
    NodeId id = push(OpKind::Scale, {a}, c * value(a));
    nodes_[id].scalar = c;
    return id;
  }
  NodeId add_const(NodeId a, double c) {
    NodeId id = push(OpKind::AddConst, {a}, (value(a).array() + c).matrix());
    nodes_[id].scalar = c;
    return id;
  }

  /// x W + 1 b, with x (n x in), W (in x out), b (1 x out).
  NodeId affine(NodeId x, NodeId w, NodeId b) {
    const Matrix& xv = value(x);
    const Matrix& wv = value(w);
    const Matrix& bv = value(b);
    if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
      throw ArgumentError("affine: shape mismatch");
    }
    Matrix y = xv * wv;
    y.rowwise() += bv.row(0);
    return push(OpKind::Affine, {x, w, b}, std::move(y));
  }

  NodeId relu(NodeId a) { return push(OpKind::Relu, {a}, value(a).cwiseMax(0.0)); }
  NodeId softplus(NodeId a) {
    return push(OpKind::Softplus, {a}, value(a).unaryExpr([](double x) { return detail::softplus(x); }));
  }
  NodeId exp(NodeId a) { return push(OpKind::Exp, {a}, value(a).array().exp().matrix()); }
  NodeId log(NodeId a) { return push(OpKind::Log, {a}, value(a).array().log().matrix()); }
  NodeId square(NodeId a) { return push(OpKind::Square, {a}, value(a).array().square().matrix()); }

  /// Sum of all entries, 1 x 1.
  NodeId sum(NodeId a) {
    Matrix s(1, 1);
    s(0, 0) = value(a).sum();
    return push(OpKind::Sum, {a}, std::move(s));
  }
  /// Per-row sum, n x 1.
  NodeId row_sum(NodeId a) { return push(OpKind::RowSum, {a}, value(a).rowwise().sum()); }

  NodeId slice_cols(NodeId a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count <= 0 || start + count > value(a).cols()) throw ArgumentError("slice_cols: out of range");
    NodeId id = push(OpKind::SliceCols, {a}, value(a).middleCols(start, count));
    nodes_[id].i0 = start;
    nodes_[id].i1 = count;
    return id;
  }

  NodeId concat_rows(std::span<const NodeId> parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: nothing to concatenate");
    Eigen::Index rows = 0;
    const Eigen::Index cols = value(parts[0]).cols();
    for (NodeId p : parts) {
      if (value(p).cols() != cols) throw ArgumentError("concat_rows: column mismatch");
      rows += value(p).rows();
    }
    Matrix out(rows, cols);
    Eigen::Index r = 0;
    for (NodeId p : parts) {
      out.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
    }
    return push(OpKind::ConcatRows, {parts.begin(), parts.end()}, std::move(out));
  }

  /// Stacks `times` copies of a vertically.
  NodeId tile_rows(NodeId a, Eigen::Index times) {
    if (times < 1) throw ArgumentError("tile_rows: times must be >= 1");
    NodeId id = push(OpKind::TileRows, {a}, value(a).replicate(times, 1));
    nodes_[id].i0 = times;
    return id;
  }

  /// (blocks*n x 1) column -> (1 x blocks) row of per-block means.
  NodeId block_mean(NodeId a, Eigen::Index blocks) {
    const Matrix& v = value(a);
    if (v.cols() != 1 || blocks < 1 || v.rows() % blocks != 0) throw ArgumentError("block_mean: shape mismatch");
    const Eigen::Index n = v.rows() / blocks;
    Matrix out(1, blocks);
    for (Eigen::Index k = 0; k < blocks; ++k) out(0, k) = v.middleRows(k * n, n).mean();
    NodeId id = push(OpKind::BlockMean, {a}, std::move(out));
    nodes_[id].i0 = blocks;
    return id;
  }

  /// Row-wise softmax.
  NodeId softmax(NodeId a) {
    Matrix v = value(a);
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      const double mx = v.row(r).maxCoeff();
      v.row(r) = (v.row(r).array() - mx).exp().matrix();
      v.row(r) /= v.row(r).sum();
    }
    return push(OpKind::Softmax, {a}, std::move(v));
  }

  /// Per-row KL(N(mean, diag(std^2)) || N(0, I)), n x 1.
  NodeId kl_std_normal(NodeId mean, NodeId stddev) {
    same_shape(mean, stddev, "kl_std_normal");
    const auto m = value(mean).array();
    const auto s = value(stddev).array();
    Matrix out = (0.5 * (s.square() + m.square() - 1.0) - s.log()).matrix().rowwise().sum();
    return push(OpKind::KlStdNormal, {mean, stddev}, std::move(out));
  }

  /// Per-row log N(target; pred, I), n x 1.
  NodeId gaussian_log_lik(NodeId pred, NodeId target) {
    same_shape(pred, target, "gaussian_log_lik");
    const double c = 0.5 * std::log(2.0 * std::numbers::pi);
    Matrix out = (-0.5 * (value(target) - value(pred)).array().square() - c).matrix().rowwise().sum();
    return push(OpKind::GaussianLogLik, {pred, target}, std::move(out));
  }

  /// Per-row log Laplace(target; pred, scale 1), n x 1.
  NodeId laplace_log_lik(NodeId pred, NodeId target) {
    same_shape(pred, target, "laplace_log_lik");
    Matrix out = (-(value(target) - value(pred)).array().abs() - std::numbers::ln2).matrix().rowwise().sum();
    return push(OpKind::LaplaceLogLik, {pred, target}, std::move(out));
  }

  /// Per-row log softmax(logits)[target], n x 1.
  NodeId categorical_log_lik(NodeId logits, std::vector<int> targets) {
    const Matrix& l = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != l.rows()) throw ArgumentError("categorical_log_lik: target count mismatch");
    Matrix out(l.rows(), 1);
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      const int t = targets[static_cast<std::size_t>(r)];
      if (t < 0 || t >= l.cols()) throw ArgumentError("categorical_log_lik: target out of range");
      const double mx = l.row(r).maxCoeff();
      const double lse = mx + std::log((l.row(r).array() - mx).exp().sum());
      out(r, 0) = l(r, t) - lse;
    }
    NodeId id = push(OpKind::CategoricalLogLik, {logits}, std::move(out));
    nodes_[id].aux = std::move(targets);
    return id;
  }

  /// Consensus posteriors for a list of expert subsets.
  ///
  /// means/stds hold one (n x D) node per modality. Output is
  /// (subsets.size()*n) x 2D: block k holds the subset-k posterior, mean in
  /// the first D columns and std in the last D.
  NodeId subset_consensus(std::span<const NodeId> means, std::span<const NodeId> stds,
                          std::vector<std::vector<int>> subsets, double rho) {
    if (means.empty() || means.size() != stds.size()) throw ArgumentError("subset_consensus: need matching mean/std lists");
    const Eigen::Index n = value(means[0]).rows();
    const Eigen::Index dim = value(means[0]).cols();
    for (std::size_t m = 0; m < means.size(); ++m) {
      same_shape(means[m], means[0], "subset_consensus");
      same_shape(stds[m], means[0], "subset_consensus");
    }
    for (const auto& s : subsets) {
      if (s.empty() || s.size() > detail::kMaxExperts) throw ArgumentError("subset_consensus: bad subset size");
      for (int m : s)
        if (m < 0 || static_cast<std::size_t>(m) >= means.size()) throw ArgumentError("subset_consensus: member out of range");
    }

    Matrix out(static_cast<Eigen::Index>(subsets.size()) * n, 2 * dim);
    std::array<double, detail::kMaxExperts> mu{}, sd{}, a{}, v{};
    for (std::size_t k = 0; k < subsets.size(); ++k) {
      const auto& members = subsets[k];
      const std::size_t mp = members.size();
      for (Eigen::Index r = 0; r < n; ++r) {
        const Eigen::Index row = static_cast<Eigen::Index>(k) * n + r;
        for (Eigen::Index d = 0; d < dim; ++d) {
          for (std::size_t i = 0; i < mp; ++i) {
            mu[i] = value(means[static_cast<std::size_t>(members[i])])(r, d);
            sd[i] = value(stds[static_cast<std::size_t>(members[i])])(r, d);
          }
          const auto sol = detail::solve_consensus_block({mu.data(), mp}, {sd.data(), mp}, rho, {a.data(), mp},
                                                         {v.data(), mp}, static_cast<std::size_t>(d));
          out(row, d) = sol.mean;
          out(row, dim + d) = 1.0 / std::sqrt(sol.precision);
        }
      }
    }
    std::vector<NodeId> inputs(means.begin(), means.end());
    inputs.insert(inputs.end(), stds.begin(), stds.end());
    NodeId id = push(OpKind::SubsetConsensus, std::move(inputs), std::move(out));
    nodes_[id].aux = detail::ConsensusAux{std::move(subsets), rho};
    return id;
  }

  const Matrix& value(NodeId id) const { return node(id).value; }
  /// Adjoint after backward(); empty for nodes that do not need gradients.
  const Matrix& adjoint(NodeId id) const { return node(id).adjoint; }
  OpKind kind(NodeId id) const { return node(id).op; }
  std::span<const NodeId> inputs(NodeId id) const { return node(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(output)/d(output) = 1 and sweeps backwards. Returns the
  /// adjoints of every Variable leaf that feeds the output.
  Gradients backward(NodeId output) {
    const Matrix& out = value(output);
    if (out.rows() != 1 || out.cols() != 1) throw ArgumentError("backward: output must be scalar");
    for (auto& n : nodes_) n.adjoint.resize(0, 0);
    nodes_[output].adjoint = Matrix::Ones(1, 1);

    for (std::size_t i = output + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.adjoint.size() == 0) continue;
      propagate(n);
    }

    Gradients grads;
    for (std::size_t i = 0; i <= output; ++i) {
      if (nodes_[i].op == OpKind::Variable) {
        grads.emplace(i, nodes_[i].adjoint.size() ? nodes_[i].adjoint : Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols()));
      }
    }
    return grads;
  }

 private:
  struct Node {
    OpKind op;
    std::vector<NodeId> inputs;
    Matrix value;
    Matrix adjoint;
    bool requires_grad = false;
    double scalar = 0.0;
    Eigen::Index i0 = 0;
    Eigen::Index i1 = 0;
    std::variant<std::monostate, std::vector<int>, detail::ConsensusAux> aux;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw ArgumentError("tape: unknown node id");
    return nodes_[id];
  }

  void same_shape(NodeId a, NodeId b, const char* op) const {
    const Matrix& x = value(a);
    const Matrix& y = value(b);
    if (x.rows() != y.rows() || x.cols() != y.cols()) throw ArgumentError(std::string(op) + ": shape mismatch");
  }

  NodeId push(OpKind op, std::vector<NodeId> inputs, Matrix value, bool leaf_grad = false) {
    bool rg = leaf_grad;
    for (NodeId in : inputs) rg = rg || node(in).requires_grad;
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  /// Adds `delta` into the adjoint of node `id` if it needs a gradient.
  template <class Expr>
  void accumulate(NodeId id, const Expr& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.adjoint.size() == 0) {
      n.adjoint = delta;
    } else {
      n.adjoint += delta;
    }
  }

  void propagate(const Node& n);

  std::vector<Node> nodes_;
};

inline void Tape::propagate(const Node& n) {
  const Matrix& g = n.adjoint;
  const auto& in = n.inputs;
  switch (n.op) {
    case OpKind::Constant:
    case OpKind::Variable:
      break;
    case OpKind::Add:
      accumulate(in[0], g);
      accumulate(in[1], g);
      break;
    case OpKind::Sub:
      accumulate(in[0], g);
      accumulate(in[1], -g);
      break;
    case OpKind::Mul:
      accumulate(in[0], g.cwiseProduct(value(in[1])));
      accumulate(in[1], g.cwiseProduct(value(in[0])));
      break;
    case OpKind::Scale:
      accumulate(in[0], n.scalar * g);
      break;
    case OpKind::AddConst:
      accumulate(in[0], g);
      break;
    case OpKind::Affine:
      if (nodes_[in[0]].requires_grad) accumulate(in[0], g * value(in[1]).transpose());
      if (nodes_[in[1]].requires_grad) accumulate(in[1], value(in[0]).transpose() * g);
      accumulate(in[2], g.colwise().sum());
      break;
    case OpKind::Relu:
      accumulate(in[0], g.cwiseProduct(value(in[0]).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; })));
      break;
    case OpKind::Softplus:
      accumulate(in[0], g.cwiseProduct(value(in[0]).unaryExpr([](double x) { return detail::sigmoid(x); })));
      break;
    case OpKind::Exp:
      accumulate(in[0], g.cwiseProduct(n.value));
      break;
    case OpKind::Log:
      accumulate(in[0], g.cwiseQuotient(value(in[0])));
      break;
    case OpKind::Square:
      accumulate(in[0], (2.0 * g.array() * value(in[0]).array()).matrix());
      break;
    case OpKind::Sum:
      accumulate(in[0], Matrix::Constant(value(in[0]).rows(), value(in[0]).cols(), g(0, 0)));
      break;
    case OpKind::RowSum:
      accumulate(in[0], g.replicate(1, value(in[0]).cols()));
      break;
    case OpKind::SliceCols: {
      Matrix d = Matrix::Zero(value(in[0]).rows(), value(in[0]).cols());
      d.middleCols(n.i0, n.i1) = g;
      accumulate(in[0], d);
      break;
    }
    case OpKind::ConcatRows: {
      Eigen::Index r = 0;
      for (NodeId p : in) {
        const Eigen::Index rows = value(p).rows();
        accumulate(p, g.middleRows(r, rows));
        r += rows;
      }
      break;
    }
    case OpKind::TileRows: {
      const Eigen::Index rows = value(in[0]).rows();
      Matrix d = Matrix::Zero(rows, g.cols());
      for (Eigen::Index t = 0; t < n.i0; ++t) d += g.middleRows(t * rows, rows);
      accumulate(in[0], d);
      break;
    }
    case OpKind::BlockMean: {
      const Eigen::Index total = value(in[0]).rows();
      const Eigen::Index per = total / n.i0;
      Matrix d(total, 1);
      for (Eigen::Index k = 0; k < n.i0; ++k) d.middleRows(k * per, per).setConstant(g(0, k) / static_cast<double>(per));
      accumulate(in[0], d);
      break;
    }
    case OpKind::Softmax: {
      const Matrix& y = n.value;
      const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
      Matrix d = y.cwiseProduct(g - dot.replicate(1, g.cols()));
      accumulate(in[0], d);
      break;
    }
    case OpKind::KlStdNormal: {
      const Matrix gg = g.replicate(1, value(in[0]).cols());
      accumulate(in[0], gg.cwiseProduct(value(in[0])));
      const auto s = value(in[1]).array();
      accumulate(in[1], (gg.array() * (s - 1.0 / s)).matrix());
      break;
    }
    case OpKind::GaussianLogLik: {
      const Matrix resid = value(in[1]) - value(in[0]);
      const Matrix gg = g.replicate(1, resid.cols());
      accumulate(in[0], gg.cwiseProduct(resid));
      accumulate(in[1], -gg.cwiseProduct(resid));
      break;
    }
    case OpKind::LaplaceLogLik: {
      const Matrix sign = (value(in[1]) - value(in[0])).unaryExpr([](double r) { return r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0); });
      const Matrix gg = g.replicate(1, sign.cols());
      accumulate(in[0], gg.cwiseProduct(sign));
      accumulate(in[1], -gg.cwiseProduct(sign));
      break;
    }
    case OpKind::CategoricalLogLik: {
      const auto& targets = std::get<std::vector<int>>(n.aux);
      const Matrix& l = value(in[0]);
      Matrix d(l.rows(), l.cols());
      for (Eigen::Index r = 0; r < l.rows(); ++r) {
        const double mx = l.row(r).maxCoeff();
        Eigen::RowVectorXd p = (l.row(r).array() - mx).exp().matrix();
        p /= p.sum();
        p(targets[static_cast<std::size_t>(r)]) -= 1.0;
        d.row(r) = -g(r, 0) * p;
      }
      accumulate(in[0], d);
      break;
    }
    case OpKind::SubsetConsensus: {
      const auto& aux = std::get<detail::ConsensusAux>(n.aux);
      const std::size_t modalities = in.size() / 2;
      const Eigen::Index rows = value(in[0]).rows();
      const Eigen::Index dim = value(in[0]).cols();
      std::vector<Matrix> gmu(modalities, Matrix::Zero(rows, dim));
      std::vector<Matrix> gsd(modalities, Matrix::Zero(rows, dim));
      std::array<double, detail::kMaxExperts> mu{}, sd{}, a{}, v{};
      for (std::size_t k = 0; k < aux.subsets.size(); ++k) {
        const auto& members = aux.subsets[k];
        const std::size_t mp = members.size();
        for (Eigen::Index r = 0; r < rows; ++r) {
          const Eigen::Index row = static_cast<Eigen::Index>(k) * rows + r;
          for (Eigen::Index d = 0; d < dim; ++d) {
            const double g_mean = g(row, d);
            const double g_std = g(row, dim + d);
            if (g_mean == 0.0 && g_std == 0.0) continue;
            for (std::size_t i = 0; i < mp; ++i) {
              mu[i] = value(in[static_cast<std::size_t>(members[i])])(r, d);
              sd[i] = value(in[modalities + static_cast<std::size_t>(members[i])])(r, d);
            }
            const auto sol = detail::solve_consensus_block({mu.data(), mp}, {sd.data(), mp}, aux.rho, {a.data(), mp},
                                                           {v.data(), mp}, static_cast<std::size_t>(d));
            const double p = sol.precision;
            // dmean = -a^T dSigma (v - mean a) / P,  dstd = a^T dSigma a / (2 P^1.5)
            const double cm = -g_mean / p;
            const double cs = 0.5 * g_std / (p * std::sqrt(p));
            for (std::size_t i = 0; i < mp; ++i) {
              const auto mi = static_cast<std::size_t>(members[i]);
              gmu[mi](r, d) += g_mean * a[i] / p;
              double acc = 0.0;
              for (std::size_t j = 0; j < mp; ++j) {
                const double wj = v[j] - sol.mean * a[j];
                const double wi = v[i] - sol.mean * a[i];
                // G_ij + G_ji with G = cm a w^T + cs a a^T
                const double gsym = cm * (a[i] * wj + a[j] * wi) + 2.0 * cs * a[i] * a[j];
                const double c = (i == j) ? 1.0 : aux.rho;
                acc += gsym * c * sd[j];
              }
              gsd[mi](r, d) += acc;
            }
          }
        }
      }
      for (std::size_t m = 0; m < modalities; ++m) {
        accumulate(in[m], gmu[m]);
        accumulate(in[modalities + m], gsd[m]);
      }
      break;
    }
  }
}

/// z = mean + std * eps with eps held constant.
inline NodeId reparameterize(Tape& tape, NodeId mean, NodeId stddev, const Matrix& eps) {
  const Matrix& m = tape.value(mean);
  const Matrix& s = tape.value(stddev);
  if (m.rows() != s.rows() || m.cols() != s.cols() || eps.rows() != m.rows() || eps.cols() != m.cols()) {
    throw ArgumentError("reparameterize: shape mismatch");
  }
  return tape.add(mean, tape.mul(stddev, tape.constant(eps)));
}

}  // namespace codevae
