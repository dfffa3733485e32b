// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "codevae/codevae.hpp"
#include "support.hpp"

using namespace codevae;
using codevae::testing::check_gradients;
using codevae::testing::GraphBuilder;
using codevae::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- 1. toy example -------------------------------------------------------

Outcome toy_golden() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<DiagonalGaussian> experts{DiagonalGaussian(4.0, std::sqrt(3.0)), DiagonalGaussian(8.0, 1.0)};
  const auto c = code_consensus(experts, CorrelationSpec{0.6}).posterior;
  const auto w = winkler_two_expert(4.0, std::sqrt(3.0), 8.0, 1.0, 0.6);
  const auto w0 = winkler_two_expert(4.0, std::sqrt(3.0), 8.0, 1.0, 0.0);
  const auto c0 = code_consensus(experts, CorrelationSpec{0.0}).posterior;
  const auto poe = poe_consensus(experts).posterior;
  const double secs = seconds_since(t0);
  const bool ok = std::abs(c.mean(0) - 8.0817) <= 1e-3 && std::abs(c.variance(0) - 0.9992) <= 1e-3 &&
                  std::abs(w.w1 + 0.0204) <= 1e-3 && std::abs(w.w2 - 1.0204) <= 1e-3 &&
                  std::abs(w0.w1 - 0.25) <= 1e-9 && std::abs(w0.w2 - 0.75) <= 1e-9 &&
                  std::abs(poe.mean(0) - 7.0) <= 1e-9 && std::abs(poe.variance(0) - 0.75) <= 1e-9 &&
                  std::abs(c0.mean(0) - 7.0) <= 1e-9 && std::abs(c0.variance(0) - 0.75) <= 1e-9 && secs < 1.0;
  return {ok, fmt("rho=0.6 mean=%.4f var=%.4f w=(%.4f, %.4f); rho=0 w=(%.2f, %.2f) poe=(%.2f, %.2f); %.3f s", c.mean(0),
                  c.variance(0), w.w1, w.w2, w0.w1, w0.w2, poe.mean(0), poe.variance(0), secs)};
}

// --- 2, 3. consensus equivalences ----------------------------------------

Outcome poe_subsumption() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto inst = random_instance(1000003 + s, 2, 4, 8, 0.0);
    worst = std::max(worst, max_relative_error(code_consensus(inst.experts, CorrelationSpec{0.0}).posterior,
                                               poe_consensus(inst.experts).posterior));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 5.0, fmt("1000 instances, max rel error %.2e, %.2f s", worst, secs)};
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto inst = random_instance(2000003 + s, 1, 8, 8, 0.9);
    const CorrelationSpec spec{inst.rho};
    worst = std::max(worst, max_relative_error(code_consensus(inst.experts, spec).posterior,
                                               code_consensus_oracle(inst.experts, spec).posterior));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 30.0, fmt("1000 instances, max rel error %.2e, %.2f s", worst, secs)};
}

// --- 4. gradients ----------------------------------------------------------

NodeId probe(Tape& t, NodeId out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Matrix& v = t.value(out);
  return t.sum(t.mul(out, t.constant(random_matrix(v.rows(), v.cols(), rng))));
}

Matrix signed_away_from_zero(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  Matrix m = random_matrix(r, c, rng, 0.1, 2.0);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (rng() & 1u) m.data()[i] = -m.data()[i];
  return m;
}

struct OpCase {
  std::string name;
  std::function<std::pair<GraphBuilder, std::vector<Matrix>>(std::mt19937_64&, std::uint64_t)> make;
};

std::vector<OpCase> op_cases() {
  using P = std::pair<GraphBuilder, std::vector<Matrix>>;
  using X = std::vector<NodeId>;
  std::vector<OpCase> ops;
  auto unary = [&](std::string name, std::function<NodeId(Tape&, NodeId)> f, double lo, double hi) {
    ops.push_back({name, [f, lo, hi](std::mt19937_64& g, std::uint64_t r) {
                     return P{[f, r](Tape& t, const X& x) { return probe(t, f(t, x[0]), r); }, {random_matrix(3, 4, g, lo, hi)}};
                   }});
  };
  auto binary = [&](std::string name, std::function<NodeId(Tape&, NodeId, NodeId)> f) {
    ops.push_back({name, [f](std::mt19937_64& g, std::uint64_t r) {
                     return P{[f, r](Tape& t, const X& x) { return probe(t, f(t, x[0], x[1]), r); },
                              {random_matrix(3, 4, g), random_matrix(3, 4, g)}};
                   }});
  };
  binary("add", [](Tape& t, NodeId a, NodeId b) { return t.add(a, b); });
  binary("sub", [](Tape& t, NodeId a, NodeId b) { return t.sub(a, b); });
  binary("mul", [](Tape& t, NodeId a, NodeId b) { return t.mul(a, b); });
  binary("gaussian_log_lik", [](Tape& t, NodeId a, NodeId b) { return t.gaussian_log_lik(a, b); });
  unary("scale", [](Tape& t, NodeId a) { return t.scale(a, -2.5); }, -1.0, 1.0);
  unary("add_const", [](Tape& t, NodeId a) { return t.add_const(a, 0.7); }, -1.0, 1.0);
  unary("softplus", [](Tape& t, NodeId a) { return t.softplus(a); }, -30.0, 30.0);
  unary("exp", [](Tape& t, NodeId a) { return t.exp(a); }, -1.0, 1.0);
  unary("log", [](Tape& t, NodeId a) { return t.log(a); }, 0.2, 3.0);
  unary("square", [](Tape& t, NodeId a) { return t.square(a); }, -1.0, 1.0);
  unary("sum", [](Tape& t, NodeId a) { return t.sum(a); }, -1.0, 1.0);
  unary("row_sum", [](Tape& t, NodeId a) { return t.row_sum(a); }, -1.0, 1.0);
  unary("slice_cols", [](Tape& t, NodeId a) { return t.slice_cols(a, 1, 2); }, -1.0, 1.0);
  unary("tile_rows", [](Tape& t, NodeId a) { return t.tile_rows(a, 3); }, -1.0, 1.0);
  unary("softmax", [](Tape& t, NodeId a) { return t.softmax(a); }, -3.0, 3.0);
  ops.push_back({"relu", [](std::mt19937_64& g, std::uint64_t r) {
                   return P{[r](Tape& t, const X& x) { return probe(t, t.relu(x[0]), r); }, {signed_away_from_zero(3, 4, g)}};
                 }});
  ops.push_back({"block_mean", [](std::mt19937_64& g, std::uint64_t r) {
                   return P{[r](Tape& t, const X& x) { return probe(t, t.block_mean(x[0], 3), r); }, {random_matrix(12, 1, g)}};
                 }});
  ops.push_back({"affine", [](std::mt19937_64& g, std::uint64_t r) {
                   return P{[r](Tape& t, const X& x) { return probe(t, t.affine(x[0], x[1], x[2]), r); },
                            {random_matrix(4, 3, g), random_matrix(3, 5, g), random_matrix(1, 5, g)}};
                 }});
  ops.push_back({"concat_rows", [](std::mt19937_64& g, std::uint64_t r) {
                   return P{[r](Tape& t, const X& x) {
                              const std::vector<NodeId> parts{x[0], x[1], x[0]};
                              return probe(t, t.concat_rows(parts), r);
                            },
                            {random_matrix(2, 3, g), random_matrix(4, 3, g)}};
                 }});
  ops.push_back({"kl_std_normal", [](std::mt19937_64& g, std::uint64_t r) {
                   return P{[r](Tape& t, const X& x) { return probe(t, t.kl_std_normal(x[0], x[1]), r); },
                            {random_matrix(4, 3, g, -2.0, 2.0), random_matrix(4, 3, g, 0.2, 3.0)}};
                 }});
  ops.push_back({"laplace_log_lik", [](std::mt19937_64& g, std::uint64_t r) {
                   const Matrix target = random_matrix(4, 3, g);
                   const Matrix pred = target + signed_away_from_zero(4, 3, g) * 0.5;
                   return P{[r](Tape& t, const X& x) { return probe(t, t.laplace_log_lik(x[0], x[1]), r); }, {pred, target}};
                 }});
  ops.push_back({"categorical_log_lik", [](std::mt19937_64& g, std::uint64_t r) {
                   std::vector<int> y(5);
                   for (int& c : y) c = static_cast<int>(g() % 4);
                   return P{[r, y](Tape& t, const X& x) { return probe(t, t.categorical_log_lik(x[0], y), r); },
                            {random_matrix(5, 4, g, -3.0, 3.0)}};
                 }});
  ops.push_back({"reparameterize", [](std::mt19937_64& g, std::uint64_t r) {
                   const Matrix eps = random_matrix(3, 2, g, -2.0, 2.0);
                   return P{[r, eps](Tape& t, const X& x) { return probe(t, reparameterize(t, x[0], x[1], eps), r); },
                            {random_matrix(3, 2, g), random_matrix(3, 2, g, 0.2, 2.0)}};
                 }});
  ops.push_back({"subset_consensus", [](std::mt19937_64& g, std::uint64_t r) {
                   const double rho = std::uniform_real_distribution<double>(0.0, 0.9)(g);
                   std::vector<Matrix> in;
                   for (int m = 0; m < 4; ++m) in.push_back(random_matrix(3, 2, g, -2.0, 2.0));
                   for (int m = 0; m < 4; ++m) in.push_back(random_matrix(3, 2, g, 0.3, 2.0));
                   const std::vector<std::vector<int>> subsets{{0}, {0, 1}, {0, 1, 2}, {2, 1, 0, 3}};
                   return P{[r, rho, subsets](Tape& t, const X& x) {
                              const std::vector<NodeId> means(x.begin(), x.begin() + 4), stds(x.begin() + 4, x.end());
                              return probe(t, t.subset_consensus(means, stds, subsets, rho), r);
                            },
                            in};
                 }});
  for (auto placement : {WeightPlacement::WeightedElbo, WeightPlacement::ReconOnly}) {
    ops.push_back({placement == WeightPlacement::WeightedElbo ? "objective" : "objective_recon_only",
                   [placement](std::mt19937_64& g, std::uint64_t r) {
                     const ObjectiveOptions opt{0.5 + static_cast<double>(r % 4), 1000.0, placement};
                     return P{[opt](Tape& t, const X& x) { return objective_node(t, x[0], x[1], x[2], opt); },
                              {random_matrix(1, 7, g, -20.0, 0.0), random_matrix(1, 7, g, 0.0, 5.0), random_matrix(1, 7, g)}};
                   }});
  }
  return ops;
}

// Gradient of the full objective with respect to every model parameter block,
// through encoders, consensus, decoders and subset weights.
double model_objective_gradient_error(std::uint64_t seed) {
  auto spec = SyntheticSpec::uniform(3, 3, 0.5);
  spec.factor_dim = 2;
  spec.rows = 10;
  const auto ds = generate(spec, seed);
  ModelConfig mc{ds.dims(), ds.families(), 2, {5}, 0.5};
  CodeVaeModel model(mc, seed);
  std::mt19937_64 rng(seed);
  model.pi_logits() = random_matrix(1, 7, rng);
  const Batch b = make_batch(ds, 0, 10);
  const Matrix eps = random_matrix(10, 2, rng, -2.0, 2.0);
  ForwardOptions f;
  f.objective.beta = 1.3;
  auto value = [&] {
    Tape t;
    return t.value(build_forward(t, model, b, eps, f).objective)(0, 0);
  };
  Tape t;
  const auto g = build_forward(t, model, b, eps, f);
  const Gradients grads = t.backward(g.objective);
  auto params = model.parameters();
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    for (int k = 0; k < 3; ++k) {
      const auto e = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.size()));
      const double orig = p.data()[e];
      const double h = 1e-6 * std::max(1.0, std::abs(orig));
      p.data()[e] = orig + h;
      const double up = value();
      p.data()[e] = orig - h;
      const double down = value();
      p.data()[e] = orig;
      worst = std::max(worst, codevae::testing::grad_rel_error(grads.at(g.params[i]).data()[e], (up - down) / (2 * h), 1.0));
    }
  }
  return worst;
}

Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_op;
  std::size_t checked = 0;
  const auto ops = op_cases();
  std::mt19937_64 rng(4);
  for (const auto& op : ops)
    for (std::uint64_t rep = 0; rep < 10; ++rep) {
      auto [build, inputs] = op.make(rng, rep);
      const auto res = check_gradients(build, std::move(inputs));
      checked += res.checked;
      if (res.max_rel_error > worst) {
        worst = res.max_rel_error;
        worst_op = op.name;
      }
    }
  double model_worst = 0.0;
  for (std::uint64_t rep = 0; rep < 10; ++rep) model_worst = std::max(model_worst, model_objective_gradient_error(rep + 1));
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && model_worst <= 1e-4 && secs < 60.0,
          fmt("%zu ops x 10 reps, %zu entries, max rel error %.2e (%s); full model objective %.2e; %.1f s", ops.size(),
              checked, worst, worst_op.c_str(), model_worst, secs)};
}

// --- 5. KL / entropy goldens -----------------------------------------------

Outcome kl_entropy_golden() {
  const double kl0 = kl_diag_std_normal(DiagonalGaussian(std::vector<double>(8, 0.0), std::vector<double>(8, 1.0)));
  const double kl2 = kl_diag_std_normal(DiagonalGaussian({0.0, 0.0}, {2.0, 2.0}));
  const double h7 = categorical_entropy(SubsetWeights(7));
  Tape t;
  const double kl0_graph =
      t.value(t.kl_std_normal(t.constant(Matrix::Zero(1, 8)), t.constant(Matrix::Ones(1, 8))))(0, 0);
  const bool ok = kl0 == 0.0 && kl0_graph == 0.0 && std::abs(h7 - std::log(7.0)) <= 1e-12 && std::abs(kl2 - 1.6137) <= 1e-4;
  return {ok, fmt("KL(N(0,I)||N(0,I))=%g, H(uniform 7)-ln7=%.1e, KL(D=2, sd=2)=%.6f", kl0, h7 - std::log(7.0), kl2)};
}

// --- 6, 7. default training runs -------------------------------------------

struct DefaultRun {
  std::uint64_t seed;
  TrainResult result;
  double mse0;
  double var0;
  PiTraceReport pi_trace;
};

std::vector<DefaultRun> default_runs(double& secs) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<DefaultRun> runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto spec = SyntheticSpec::uniform(3, 16, 0.5);
    spec.rows = 2048;
    const auto tr = generate(spec, seed);
    spec.rows = 1024;
    const auto te = generate(spec, held_out_seed(seed));
    TrainConfig cfg;
    cfg.seed = seed;
    auto r = train(cfg, tr, te);
    const Batch held = make_batch(te, 0, 512);
    std::mt19937_64 rng(seed);
    const auto mse = reconstruction_mse(r.model, held, 0, 4, rng);
    const double mse0 = std::accumulate(mse.begin(), mse.end(), 0.0) / static_cast<double>(mse.size());
    const Matrix& x = te.modalities[0].values;
    const Matrix centered = x.rowwise() - x.colwise().mean();
    const double var0 = centered.squaredNorm() / static_cast<double>((x.rows() - 1) * x.cols());
    auto report = pi_trace_report(r.model, held);
    runs.push_back({seed, std::move(r), mse0, var0, std::move(report)});
  }
  secs = seconds_since(t0);
  return runs;
}

Outcome training_trend(const std::vector<DefaultRun>& runs, double secs) {
  int improved = 0, fits = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto& tr = r.result.report.objective_trace;
    improved += tr.back() > tr.front();
    fits += r.mse0 < r.var0;
    detail += fmt("seed %llu: objective %.1f -> %.1f, mse0 %.3f vs var %.3f; ", static_cast<unsigned long long>(r.seed),
                  tr.front(), tr.back(), r.mse0, r.var0);
  }
  detail += fmt("%.0f s", secs);
  return {improved == 3 && fits == 3 && secs < 600.0, detail};
}

Outcome pi_trace_trend(const std::vector<DefaultRun>& runs) {
  int good = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto& rows = r.pi_trace.by_cardinality;
    bool monotone = true;
    for (std::size_t c = 1; c < rows.size(); ++c) monotone = monotone && rows[c].mean_trace <= rows[c - 1].mean_trace;
    const bool pi_up = rows.back().mean_pi > rows.front().mean_pi;
    good += monotone && pi_up;
    detail += fmt("seed %llu: pi %.6f/%.6f/%.6f trace %.3f/%.3f/%.3f; ", static_cast<unsigned long long>(r.seed),
                  rows[0].mean_pi, rows[1].mean_pi, rows[2].mean_pi, rows[0].mean_trace, rows[1].mean_trace,
                  rows[2].mean_trace);
  }
  detail += fmt("%d/3 seeds", good);
  return {good >= 2, detail};
}

// --- 8. ablation ------------------------------------------------------------

Outcome ablation_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  int good = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto spec = SyntheticSpec::uniform(3, 16, 0.5);
    spec.rows = 2048;
    const auto tr = generate(spec, seed);
    spec.rows = 1024;
    const auto te = generate(spec, held_out_seed(seed));
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.epochs = 50;
    AblationOptions opt;
    opt.eval.seed = seed;
    opt.eval.classifier.seed = seed;
    const auto res = ablation_compare(tr, te, cfg, opt);
    const auto& best = res.rows[0];
    const auto& base = res.rows[3];
    const bool ok = best.mean_elbo >= base.mean_elbo || best.mean_accuracy >= base.mean_accuracy;
    good += ok;
    detail += fmt("seed %llu: rho*=%.1f elbo %.3f vs %.3f, acc %.3f vs %.3f; ", static_cast<unsigned long long>(seed),
                  res.selected_rho, best.mean_elbo, base.mean_elbo, best.mean_accuracy, base.mean_accuracy);
  }
  detail += fmt("%d/3 seeds, %.0f s", good, seconds_since(t0));
  return {good >= 2, detail};
}

// --- 9. duplicated modalities ----------------------------------------------

Outcome edge_case_correlation() {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = true;
  for (double fraction : {0.0, 0.95}) {
    int good = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
      auto spec = SyntheticSpec::uniform(2, 16, 0.5);
      spec.duplication = Duplication{1, 0, fraction};
      spec.rows = 2048;
      const auto tr = generate(spec, seed);
      spec.rows = 16384;
      const auto te = generate(spec, held_out_seed(seed));
      TrainConfig cfg;
      cfg.seed = seed;
      const double betas[] = {1.0}, rhos[] = {0.0, 0.9};
      const auto grid = grid_search(cfg, betas, rhos, tr, generation_distance_metric(te, 0, 16384, 5));
      const double d0 = grid.cells[0].metric, d9 = grid.cells[1].metric;
      const bool win = fraction == 0.0 ? d9 <= d0 : d0 <= d9;
      good += win;
      detail += fmt("f=%.2f seed %llu: rho0 %.3f rho0.9 %.3f; ", fraction, static_cast<unsigned long long>(seed), d0, d9);
    }
    ok = ok && good >= 2;
    detail += fmt("[f=%.2f %d/3] ", fraction, good);
  }
  const double secs = seconds_since(t0);
  detail += fmt("%.0f s", secs);
  return {ok && secs < 900.0, detail};
}

// --- 10. determinism ---------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CODEVAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  std::vector<fs::path> dirs;
  for (const char* name : {"a", "b"}) {
    const auto dir = codevae::testing::temp_dir(std::string("acceptance_det_") + name);
    if (run_cli("gen-data --out " + dir.string() + " --rows 512 --test-rows 256 --seed 7") != 0 ||
        run_cli("train --out " + dir.string() + " --epochs 5 --seed 7 --rho 0.4") != 0) {
      return {false, "cli run failed"};
    }
    dirs.push_back(dir);
  }
  int same = 0;
  const char* files[] = {"model.bin", "model.manifest", "train_trace.csv", "train_subsets.csv"};
  for (const char* f : files) same += slurp(dirs[0] / f) == slurp(dirs[1] / f) && !slurp(dirs[0] / f).empty();
  return {same == 4, fmt("%d/4 output files byte-identical across two runs", same)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  report(1, toy_golden);
  report(2, poe_subsumption);
  report(3, oracle_equivalence);
  report(4, gradient_checks);
  report(5, kl_entropy_golden);
  double secs = 0.0;
  std::vector<DefaultRun> runs;
  report(6, [&] {
    runs = default_runs(secs);
    return training_trend(runs, secs);
  });
  report(7, [&] { return runs.empty() ? Outcome{false, "no training runs"} : pi_trace_trend(runs); });
  report(8, ablation_trend);
  report(9, edge_case_correlation);
  report(10, determinism);
  return failures == 0 ? 0 : 1;
}
