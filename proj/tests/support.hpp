#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "codevae/tape.hpp"

namespace codevae::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Builds a scalar output from variable leaves holding `inputs`.
using GraphBuilder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

/// |a - b| / max(|a|, |b|, floor).
inline double grad_rel_error(double a, double b, double floor = 1e-2) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of the builder's output against central
/// differences of the same function evaluated on perturbed inputs. When
/// `max_entries` is positive only that many randomly chosen entries per
/// input are perturbed.
inline GradCheck check_gradients(const GraphBuilder& build, std::vector<Matrix> inputs, double step = 1e-6,
                                 std::size_t max_entries = 0, std::uint64_t seed = 0) {
  auto evaluate = [&](const std::vector<Matrix>& xs) {
    Tape t;
    std::vector<NodeId> leaves;
    for (const auto& x : xs) leaves.push_back(t.variable(x));
    return t.value(build(t, leaves))(0, 0);
  };
  Tape tape;
  std::vector<NodeId> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.variable(x));
  const NodeId out = build(tape, leaves);
  const Gradients grads = tape.backward(out);

  GradCheck res;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix& g = grads.at(leaves[i]);
    std::vector<Eigen::Index> entries(static_cast<std::size_t>(inputs[i].size()));
    for (std::size_t e = 0; e < entries.size(); ++e) entries[e] = static_cast<Eigen::Index>(e);
    if (max_entries > 0 && entries.size() > max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(max_entries);
    }
    for (Eigen::Index e : entries) {
      const double orig = inputs[i].data()[e];
      const double h = step * std::max(1.0, std::abs(orig));
      inputs[i].data()[e] = orig + h;
      const double up = evaluate(inputs);
      inputs[i].data()[e] = orig - h;
      const double down = evaluate(inputs);
      inputs[i].data()[e] = orig;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, grad_rel_error(g.data()[e], numeric));
      ++res.checked;
    }
  }
  return res;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("codevae_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace codevae::testing
