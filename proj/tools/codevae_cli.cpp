// codevae: toy example, consensus checks, synthetic data, training, grid
// search, evaluation and ablations. Exit codes: 0 success, 1 numerical
// failure, 2 usage or I/O error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "codevae/codevae.hpp"

namespace fs = std::filesystem;
using namespace codevae;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainFlags {
  std::uint64_t seed = 1;
  double beta = 1.0;
  double rho = 0.0;
  int epochs = 200;
  int batch = 128;
  int latent_dim = 8;
  int modalities = 0;
  double entropy_scale = 1000.0;
  std::string pi_mode = "learned";
  bool strict_eq4 = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool single_rho_beta) {
  cmd->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  if (single_rho_beta) {
    cmd->add_option("--beta", f.beta, "KL weight")->capture_default_str();
    cmd->add_option("--rho", f.rho, "Expert error correlation")->capture_default_str();
  }
  cmd->add_option("--epochs", f.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch", f.batch, "Minibatch size")->capture_default_str();
  cmd->add_option("--latent-dim", f.latent_dim, "Latent dimension")->capture_default_str();
  cmd->add_option("--modalities", f.modalities, "Expected modality count (checked against the data)");
  cmd->add_option("--entropy-scale", f.entropy_scale, "Weight of the subset-weight entropy")->capture_default_str();
  cmd->add_option("--pi-mode", f.pi_mode, "Subset weights")->check(CLI::IsMember({"learned", "uniform"}))->capture_default_str();
  cmd->add_flag("--strict-eq4", f.strict_eq4, "Weight only the reconstruction terms by pi");
}

TrainConfig to_config(const TrainFlags& f) {
  TrainConfig c;
  c.seed = f.seed;
  c.beta = f.beta;
  c.rho = f.rho;
  c.epochs = f.epochs;
  c.batch_size = f.batch;
  c.latent_dim = f.latent_dim;
  c.entropy_scale = f.entropy_scale;
  c.pi_mode = pi_mode_from_string(f.pi_mode);
  c.strict_eq4 = f.strict_eq4;
  c.validate();
  return c;
}

/// Applies key=value lines from --config to options not given on the command line.
void apply_config(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  for (const auto& [key, value] : read_key_values(path)) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt || key == "config") throw UsageError(path + ": unknown key '" + key + "' for " + cmd->get_name());
    if (opt->count() == 0) {
      opt->add_result(value);
      opt->run_callback();
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

fs::path require_out(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
  return out;
}

struct Splits {
  MultimodalDataset train;
  MultimodalDataset test;
};

Splits load_splits(const fs::path& dir, int expected_modalities) {
  for (const char* name : {"train.cmm", "test.cmm"})
    if (!fs::exists(dir / name)) throw FormatError("missing " + (dir / name).string() + " (run gen-data first)");
  Splits s{load((dir / "train.cmm").string()), load((dir / "test.cmm").string())};
  if (expected_modalities > 0 && static_cast<int>(s.train.modality_count()) != expected_modalities) {
    throw UsageError("--modalities " + std::to_string(expected_modalities) + " does not match the data (" +
                     std::to_string(s.train.modality_count()) + ")");
  }
  return s;
}

int cmd_toy(double rho, const std::string& out) {
  const std::vector<DiagonalGaussian> experts{DiagonalGaussian(4.0, std::sqrt(3.0)), DiagonalGaussian(8.0, 1.0)};
  const CorrelationSpec spec{rho};
  const auto code = code_consensus(experts, spec).posterior;
  const auto poe = poe_consensus(experts).posterior;
  const auto moe = moe_moments(experts);
  const auto w = winkler_two_expert(4.0, std::sqrt(3.0), 8.0, 1.0, rho);
  std::ostringstream csv;
  csv << "method,mean,variance\n";
  csv << "code," << format_real(code.mean(0)) << ',' << format_real(code.variance(0)) << '\n';
  csv << "poe," << format_real(poe.mean(0)) << ',' << format_real(poe.variance(0)) << '\n';
  csv << "moe," << format_real(moe.mean(0)) << ',' << format_real(moe.variance(0)) << '\n';
  csv << "winkler," << format_real(w.mean) << ',' << format_real(w.variance) << '\n';
  std::cout << "experts: N(4, 3) and N(8, 1), rho = " << format_real(rho) << '\n' << csv.str();
  std::cout << "winkler weights: " << format_real(w.w1) << ", " << format_real(w.w2) << '\n';
  if (!out.empty()) {
    write_text(require_out(out) / "toy.csv", csv.str());
    write_text(fs::path(out) / "toy_weights.csv",
               "rho,w1,w2\n" + format_real(rho) + "," + format_real(w.w1) + "," + format_real(w.w2) + "\n");
  }
  return 0;
}

int cmd_consensus_check(int trials, std::uint64_t seed) {
  if (trials < 1) throw UsageError("--trials must be at least 1");
  const auto rep = run_consensus_check(trials, seed);
  std::printf("trials=%d failures=%d max_oracle_rel_error=%.3e max_poe_rel_error=%.3e\n", rep.trials, rep.failures,
              rep.max_oracle_error, rep.max_poe_error);
  if (rep.passed()) return 0;
  const auto& f = *rep.first_failure;
  std::printf("first failure: instance seed=%llu experts=%zu dim=%zu rho=%.6f\n",
              static_cast<unsigned long long>(f.seed), f.experts.size(), f.experts.front().dim(), f.rho);
  return kExitFailure;
}

struct GenFlags {
  std::uint64_t seed = 1;
  int modalities = 3;
  std::size_t rows = 2048;
  std::size_t test_rows = 1024;
  double duplicate_fraction = -1.0;
};

int cmd_gen_data(const GenFlags& g, const std::string& out) {
  const fs::path dir = require_out(out);
  SyntheticSpec spec = SyntheticSpec::uniform(g.modalities, 16, 0.5);
  if (g.duplicate_fraction >= 0.0) {
    if (g.modalities < 2) throw UsageError("--duplicate-fraction needs at least two modalities");
    spec.duplication = Duplication{1, 0, g.duplicate_fraction};
  }
  spec.rows = g.rows;
  spec.validate();
  const auto train_set = generate(spec, g.seed);
  spec.rows = g.test_rows;
  const auto test_set = generate(spec, held_out_seed(g.seed));
  save(train_set, (dir / "train.cmm").string());
  save(test_set, (dir / "test.cmm").string());
  std::cout << "gen-data: " << train_set.rows() << " train rows, " << test_set.rows() << " test rows, "
            << g.modalities << " modalities -> " << dir.string() << '\n';
  return 0;
}

int cmd_train(const TrainFlags& f, const std::string& out) {
  const fs::path dir = require_out(out);
  const TrainConfig cfg = to_config(f);
  const Splits data = load_splits(dir, f.modalities);
  const TrainResult r = train(cfg, data.train, data.test, (dir / "model").string());

  std::ostringstream trace;
  trace << "epoch,objective\n";
  for (std::size_t e = 0; e < r.report.objective_trace.size(); ++e) {
    trace << e + 1 << ',' << format_real(r.report.objective_trace[e]) << '\n';
  }
  write_text(dir / "train_trace.csv", trace.str());
  std::ostringstream subsets;
  subsets << "subset,cardinality,pi,trace\n";
  for (std::size_t k = 0; k < r.model.subsets().size(); ++k) {
    const auto& s = r.model.subsets()[k];
    subsets << s.label() << ',' << s.cardinality() << ',' << format_real(r.report.pi[k]) << ','
            << format_real(r.report.subset_trace[k]) << '\n';
  }
  write_text(dir / "train_subsets.csv", subsets.str());

  std::cout << "train: " << r.report.steps << " steps";
  if (!r.report.objective_trace.empty()) {
    std::cout << ", objective " << format_real(r.report.objective_trace.front()) << " -> "
              << format_real(r.report.objective_trace.back());
  }
  std::printf(", %.2f s, checkpoint %s\n", r.report.wall_seconds, r.report.checkpoint_path.c_str());
  return 0;
}

SelectionMetric pick_metric(const std::string& name, const MultimodalDataset& heldout, std::uint64_t seed) {
  if (name == "elbo") return mean_elbo_metric(heldout, 512, 8, seed);
  if (name == "frechet") return generation_distance_metric(heldout, 0, static_cast<int>(heldout.rows()), seed);
  throw UsageError("unknown metric '" + name + "'");
}

int cmd_grid(const TrainFlags& f, std::vector<double> betas, std::vector<double> rhos, const std::string& metric,
             int jobs, const std::string& out) {
  const fs::path dir = require_out(out);
  if (jobs < 1) throw UsageError("--jobs must be at least 1");
  const TrainConfig tmpl = to_config(f);
  const Splits data = load_splits(dir, f.modalities);
  const auto result = grid_search(tmpl, betas, rhos, data.train, pick_metric(metric, data.test, f.seed), jobs);
  std::ostringstream csv;
  write_grid_csv(result, csv);
  write_text(dir / "grid.csv", csv.str());
  std::cout << "grid: " << result.cells.size() << " cells";
  if (const auto* b = result.best_cell()) {
    std::cout << ", best beta=" << format_real(b->beta) << " rho=" << format_real(b->rho) << " " << metric << "="
              << format_real(b->metric) << '\n';
    return 0;
  }
  std::cout << ", every cell failed\n";
  return kExitFailure;
}

int cmd_eval(std::uint64_t seed, const std::string& out) {
  const fs::path dir = require_out(out);
  const fs::path prefix = dir / "model";
  if (!fs::exists(prefix.string() + ".manifest")) throw FormatError("missing checkpoint " + prefix.string() + ".manifest");
  const Checkpoint ck = load_checkpoint(prefix.string());
  const Splits data = load_splits(dir, 0);
  if (data.test.dims() != ck.model.config().dims) throw FormatError("checkpoint does not match the dataset");

  EvalOptions opt;
  opt.seed = seed;
  opt.classifier.seed = seed;
  const EvalReport rep = evaluate(ck.model, data.train, data.test, opt);
  std::ostringstream subsets, cards, recon;
  write_subset_csv(rep, subsets);
  write_cardinality_csv(rep, cards);
  write_text(dir / "eval_subsets.csv", subsets.str());
  write_text(dir / "eval_cardinality.csv", cards.str());

  recon << "subset,modality,mse,frechet\n";
  std::mt19937_64 rng(seed);
  const Batch held = make_batch(data.test, 0, data.test.rows());
  for (int m = 0; m < ck.model.modalities(); ++m) {
    if (ck.model.config().families[static_cast<std::size_t>(m)] == Likelihood::Categorical) continue;
    const auto mse = reconstruction_mse(ck.model, held, m, 4, rng);
    const auto fd = conditional_generation_distance(ck.model, held, m, rng);
    for (std::size_t k = 0; k < mse.size(); ++k) {
      recon << ck.model.subsets()[k].label() << ',' << m << ',' << format_real(mse[k]) << ',' << format_real(fd[k])
            << '\n';
    }
  }
  write_text(dir / "eval_reconstruction.csv", recon.str());
  std::cout << "eval: mean subset ELBO " << format_real(rep.mean_elbo()) << ", mean accuracy "
            << format_real(rep.mean_accuracy()) << '\n';
  return 0;
}

int cmd_ablate(const TrainFlags& f, std::vector<double> rhos, const std::string& out) {
  const fs::path dir = require_out(out);
  const TrainConfig base = to_config(f);
  const Splits data = load_splits(dir, f.modalities);
  AblationOptions opt;
  opt.rho_grid = std::move(rhos);
  opt.eval.seed = f.seed;
  opt.eval.classifier.seed = f.seed;
  const auto res = ablation_compare(data.train, data.test, base, opt);
  std::ostringstream csv, grid;
  write_ablation_csv(res, csv);
  write_grid_csv(res.rho_search, grid);
  write_text(dir / "ablation.csv", csv.str());
  write_text(dir / "ablation_rho.csv", grid.str());
  std::cout << "ablate: selected rho " << format_real(res.selected_rho) << ", " << res.rows.size() << " variants\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consensus-of-dependent-experts multimodal VAE tools"};
  app.require_subcommand(1);
  std::string out, config;

  double toy_rho = 0.6;
  auto* toy = app.add_subcommand("toy", "Two-expert toy example: CoDE, PoE, MoE and Winkler weights");
  toy->add_option("--rho", toy_rho, "Expert error correlation")->capture_default_str();
  toy->add_option("--out", out, "Also write CSV tables to this directory");
  toy->add_option("--config", config, "key=value file; flags win");

  int trials = 1000;
  std::uint64_t check_seed = 1;
  auto* check = app.add_subcommand("consensus-check", "Random cross-check of the consensus solver");
  check->add_option("--trials", trials, "Number of random instances")->capture_default_str();
  check->add_option("--seed", check_seed, "Random seed")->capture_default_str();
  check->add_option("--config", config, "key=value file; flags win");

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic train.cmm and test.cmm");
  gen_cmd->add_option("--out", out, "Output directory");
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--modalities", gen.modalities, "Number of modalities")->capture_default_str();
  gen_cmd->add_option("--rows", gen.rows, "Training rows")->capture_default_str();
  gen_cmd->add_option("--test-rows", gen.test_rows, "Held-out rows")->capture_default_str();
  gen_cmd->add_option("--duplicate-fraction", gen.duplicate_fraction,
                      "Make modality 1 a copy of modality 0 with this noise fraction");
  gen_cmd->add_option("--config", config, "key=value file; flags win");

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train on <out>/train.cmm and save <out>/model.*");
  train_cmd->add_option("--out", out, "Working directory");
  add_train_flags(train_cmd, train_flags, true);
  train_cmd->add_option("--config", config, "key=value file; flags win");

  TrainFlags grid_flags;
  std::vector<double> betas{0.1, 1, 5, 10, 15, 20}, rhos{0, 0.2, 0.4, 0.6, 0.8};
  std::string metric = "elbo";
  int jobs = 1;
  auto* grid_cmd = app.add_subcommand("grid", "Beta x rho grid search, writes <out>/grid.csv");
  grid_cmd->add_option("--out", out, "Working directory");
  add_train_flags(grid_cmd, grid_flags, false);
  grid_cmd->add_option("--beta", betas, "Beta grid")->delimiter(',')->capture_default_str();
  grid_cmd->add_option("--rho", rhos, "Rho grid")->delimiter(',')->capture_default_str();
  grid_cmd->add_option("--metric", metric, "Selection metric")->check(CLI::IsMember({"elbo", "frechet"}))->capture_default_str();
  grid_cmd->add_option("--jobs", jobs, "Parallel grid cells")->capture_default_str();
  grid_cmd->add_option("--config", config, "key=value file; flags win");

  std::uint64_t eval_seed = 1;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate <out>/model.* on <out>/test.cmm");
  eval_cmd->add_option("--out", out, "Working directory");
  eval_cmd->add_option("--seed", eval_seed, "Random seed")->capture_default_str();
  eval_cmd->add_option("--config", config, "key=value file; flags win");

  TrainFlags ablate_flags;
  std::vector<double> ablate_rhos{0, 0.2, 0.4, 0.6, 0.8};
  auto* ablate_cmd = app.add_subcommand("ablate", "Learned vs equal subset weights, cross-validated rho vs 0");
  ablate_cmd->add_option("--out", out, "Working directory");
  add_train_flags(ablate_cmd, ablate_flags, false);
  ablate_cmd->add_option("--beta", ablate_flags.beta, "KL weight")->capture_default_str();
  ablate_cmd->add_option("--rho", ablate_rhos, "Rho grid for cross-validation")->delimiter(',')->capture_default_str();
  ablate_cmd->add_option("--config", config, "key=value file; flags win");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    apply_config(cmd, config);
    if (cmd == toy) return cmd_toy(toy_rho, out);
    if (cmd == check) return cmd_consensus_check(trials, check_seed);
    if (cmd == gen_cmd) return cmd_gen_data(gen, out);
    if (cmd == train_cmd) return cmd_train(train_flags, out);
    if (cmd == grid_cmd) return cmd_grid(grid_flags, betas, rhos, metric, jobs, out);
    if (cmd == eval_cmd) return cmd_eval(eval_seed, out);
    if (cmd == ablate_cmd) return cmd_ablate(ablate_flags, ablate_rhos, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
