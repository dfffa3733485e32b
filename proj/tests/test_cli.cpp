#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "support.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
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

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

/// Working directory with a small generated dataset.
fs::path prepared(const std::string& name, int modalities = 2) {
  const auto dir = codevae::testing::temp_dir("cli_" + name);
  const int rc = run("gen-data --out " + dir.string() + " --modalities " + std::to_string(modalities) +
                     " --rows 96 --test-rows 64 --seed 3");
  EXPECT_EQ(rc, 0);
  return dir;
}

const std::string kQuick = " --epochs 1 --batch 32 --latent-dim 2";

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("train --epochs"), 2);
  EXPECT_EQ(run("consensus-check --trials 0"), 2);
  EXPECT_EQ(run("toy --rho 1.5"), 2);
  EXPECT_EQ(run("train --pi-mode sometimes --out /tmp"), 2);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run("--help"), 0); }

TEST(Cli, ToyWritesTables) {
  const auto dir = codevae::testing::temp_dir("cli_toy");
  ASSERT_EQ(run("toy --out " + dir.string()), 0);
  const std::string csv = slurp(dir / "toy.csv");
  EXPECT_EQ(csv.rfind("method,mean,variance\ncode,8.0816", 0), 0u) << csv;
  EXPECT_NE(csv.find("\npoe,7,"), std::string::npos);
  EXPECT_EQ(first_line(dir / "toy_weights.csv"), "rho,w1,w2");
}

TEST(Cli, ConsensusCheckPasses) { EXPECT_EQ(run("consensus-check --trials 50 --seed 4"), 0); }

TEST(Cli, TrainEvalPipeline) {
  const auto dir = prepared("pipeline");
  ASSERT_EQ(run("train --out " + dir.string() + kQuick), 0);
  for (const char* f : {"model.bin", "model.manifest", "train_trace.csv", "train_subsets.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(first_line(dir / "train_trace.csv"), "epoch,objective");
  EXPECT_EQ(first_line(dir / "train_subsets.csv"), "subset,cardinality,pi,trace");
  ASSERT_EQ(run("eval --out " + dir.string()), 0);
  EXPECT_EQ(first_line(dir / "eval_subsets.csv"), "subset,cardinality,pi,trace,elbo,accuracy");
  EXPECT_EQ(first_line(dir / "eval_cardinality.csv"), "cardinality,subsets,mean_pi,mean_trace,mean_elbo,mean_accuracy");
  EXPECT_EQ(first_line(dir / "eval_reconstruction.csv"), "subset,modality,mse,frechet");
}

TEST(Cli, MissingInputsExitTwo) {
  const auto empty = codevae::testing::temp_dir("cli_empty");
  EXPECT_EQ(run("eval --out " + empty.string()), 2);
  EXPECT_EQ(run("train --out " + empty.string() + kQuick), 2);
  const auto dir = prepared("mismatch");
  EXPECT_EQ(run("train --out " + dir.string() + kQuick + " --modalities 3"), 2);
  std::ofstream(dir / "train.cmm", std::ios::app) << "garbage";
  EXPECT_EQ(run("train --out " + dir.string() + kQuick), 2);
}

TEST(Cli, ConfigFileValuesYieldToFlags) {
  const auto dir = prepared("config");
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "# quick run\nepochs = 2\nbatch = 32\nlatent-dim = 2\nseed = 9\n";
  }
  ASSERT_EQ(run("train --out " + dir.string() + " --config " + (dir / "run.cfg").string()), 0);
  std::string manifest = slurp(dir / "model.manifest");
  EXPECT_NE(manifest.find("epochs=2\n"), std::string::npos);
  EXPECT_NE(manifest.find("seed=9\n"), std::string::npos);
  ASSERT_EQ(run("train --out " + dir.string() + " --config " + (dir / "run.cfg").string() + " --epochs 1"), 0);
  manifest = slurp(dir / "model.manifest");
  EXPECT_NE(manifest.find("epochs=1\n"), std::string::npos);
  EXPECT_NE(manifest.find("seed=9\n"), std::string::npos);

  std::ofstream(dir / "bad.cfg") << "epochs two\n";
  EXPECT_EQ(run("train --out " + dir.string() + " --config " + (dir / "bad.cfg").string()), 2);
  std::ofstream(dir / "unknown.cfg") << "colour=blue\n";
  EXPECT_EQ(run("train --out " + dir.string() + " --config " + (dir / "unknown.cfg").string()), 2);
}

TEST(Cli, RepeatedTrainingIsByteIdentical) {
  const auto a = prepared("det_a");
  const auto b = prepared("det_b");
  ASSERT_EQ(run("train --out " + a.string() + kQuick + " --rho 0.3"), 0);
  ASSERT_EQ(run("train --out " + b.string() + kQuick + " --rho 0.3"), 0);
  for (const char* f : {"train.cmm", "test.cmm", "model.bin", "model.manifest", "train_trace.csv", "train_subsets.csv"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST(Cli, GridWritesOneRowPerCell) {
  const auto dir = prepared("grid");
  ASSERT_EQ(run("grid --out " + dir.string() + kQuick + " --beta 1,2 --rho 0,0.5 --jobs 2"), 0);
  std::ifstream in(dir / "grid.csv");
  std::string line;
  int rows = -1;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(first_line(dir / "grid.csv"), "beta,rho,seed,metric,status");
  EXPECT_EQ(run("grid --out " + dir.string() + kQuick + " --rho 0,1.2"), 2);
  EXPECT_EQ(run("grid --out " + dir.string() + kQuick + " --jobs 0"), 2);
}

TEST(Cli, AblateWritesVariants) {
  const auto dir = prepared("ablate");
  ASSERT_EQ(run("ablate --out " + dir.string() + kQuick + " --rho 0,0.5"), 0);
  EXPECT_EQ(first_line(dir / "ablation.csv"), "variant,pi_mode,rho,mean_elbo,mean_accuracy");
  EXPECT_TRUE(fs::exists(dir / "ablation_rho.csv"));
}
