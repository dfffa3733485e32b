#pragma once

#include <random>
#include <vector>

#include "codevae/error.hpp"
#include "codevae/tape.hpp"

namespace codevae {

/// Fully connected network: rectifier between layers, identity on the output.
struct MlpParams {
  std::vector<Matrix> weights;  // in x out
  std::vector<Matrix> biases;   // 1 x out

  /// sizes = {input, hidden..., output}.
  static MlpParams zeros(const std::vector<int>& sizes) {
    if (sizes.size() < 2) throw ArgumentError("MlpParams: need at least input and output sizes");
    MlpParams p;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      if (sizes[l] < 1 || sizes[l + 1] < 1) throw ArgumentError("MlpParams: layer sizes must be positive");
      p.weights.push_back(Matrix::Zero(sizes[l], sizes[l + 1]));
      p.biases.push_back(Matrix::Zero(1, sizes[l + 1]));
    }
    return p;
  }

  /// He-normal weights for rectifier layers, 1/fan_in for the output layer,
  /// zero biases.
  template <class Rng>
  static MlpParams random(const std::vector<int>& sizes, Rng& rng) {
    MlpParams p = zeros(sizes);
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      const bool last = l + 1 == p.weights.size();
      const double fan_in = static_cast<double>(p.weights[l].rows());
      std::normal_distribution<double> init(0.0, std::sqrt((last ? 1.0 : 2.0) / fan_in));
      for (Eigen::Index j = 0; j < p.weights[l].cols(); ++j)
        for (Eigen::Index i = 0; i < p.weights[l].rows(); ++i) p.weights[l](i, j) = init(rng);
    }
    return p;
  }

  std::size_t layers() const noexcept { return weights.size(); }
  Eigen::Index input_size() const { return weights.front().rows(); }
  Eigen::Index output_size() const { return weights.back().cols(); }

  void validate() const {
    if (weights.empty() || weights.size() != biases.size()) throw ArgumentError("MlpParams: layer count mismatch");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (biases[l].rows() != 1 || biases[l].cols() != weights[l].cols()) throw ArgumentError("MlpParams: bias shape");
      if (l > 0 && weights[l].rows() != weights[l - 1].cols()) throw ArgumentError("MlpParams: layers do not chain");
    }
  }
};

/// Tape nodes holding one network's parameters.
struct MlpBinding {
  std::vector<NodeId> weights;
  std::vector<NodeId> biases;
};

inline MlpBinding bind(Tape& tape, const MlpParams& params) {
  params.validate();
  MlpBinding b;
  for (std::size_t l = 0; l < params.layers(); ++l) {
    b.weights.push_back(tape.variable(params.weights[l]));
    b.biases.push_back(tape.variable(params.biases[l]));
  }
  return b;
}

inline NodeId forward_mlp(const MlpBinding& net, NodeId input, Tape& tape) {
  if (net.weights.empty()) throw ArgumentError("forward_mlp: empty network");
  if (tape.value(input).cols() != tape.value(net.weights.front()).rows()) {
    throw ArgumentError("forward_mlp: input width does not match first layer");
  }
  NodeId h = input;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    h = tape.affine(h, net.weights[l], net.biases[l]);
    if (l + 1 < net.weights.size()) h = tape.relu(h);
  }
  return h;
}

inline constexpr double kStdFloor = 1e-6;

/// Splits an encoder output (n x 2D) into mean and std = softplus(raw) + floor.
struct GaussianHeads {
  NodeId mean;
  NodeId stddev;
};

inline GaussianHeads gaussian_heads(Tape& tape, NodeId encoder_out) {
  const Eigen::Index cols = tape.value(encoder_out).cols();
  if (cols % 2 != 0) throw ArgumentError("gaussian_heads: encoder output width must be even");
  const Eigen::Index d = cols / 2;
  const NodeId mean = tape.slice_cols(encoder_out, 0, d);
  const NodeId sd = tape.add_const(tape.softplus(tape.slice_cols(encoder_out, d, d)), kStdFloor);
  return {mean, sd};
}

}  // namespace codevae
