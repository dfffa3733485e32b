#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "codevae/error.hpp"
#include "codevae/tape.hpp"

namespace codevae {

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

/// One bias-corrected Adam update. With `maximize` the ascent direction is
/// used. Moment buffers are created on the first call.
inline void adam_step(AdamState& state, const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                      bool maximize) {
  if (params.size() != grads.size()) throw ArgumentError("adam_step: parameter/gradient count mismatch");
  if (state.first_moment.empty()) {
    for (const Matrix* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ArgumentError("adam_step: state does not match parameters");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const double sign = maximize ? -1.0 : 1.0;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw ArgumentError("adam_step: gradient shape mismatch");
    auto m = state.first_moment[i].array();
    auto v = state.second_moment[i].array();
    const auto ga = sign * g.array();
    m = state.beta1 * m + (1.0 - state.beta1) * ga;
    v = state.beta2 * v + (1.0 - state.beta2) * ga.square();
    p.array() -= state.learning_rate * (m / c1) / ((v / c2).sqrt() + state.epsilon);
  }
}

}  // namespace codevae
