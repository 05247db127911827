#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "sotu/checkpoint_io.hpp"
#include "sotu/cli.hpp"
#include "sotu/harness.hpp"
#include "test_util.hpp"

namespace sotu {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

/// Small but complete pipeline configuration written to `dir/small.cfg`.
fs::path write_small_config(const fs::path& dir) {
  std::ofstream f(dir / "small.cfg");
  f << "# quick pipeline\n"
       "hidden_dims = 12\nembed_dim = 8\nepochs = 3\nbatch_size = 8\npretrain_epochs = 3\n"
       "num_classes = 6\nbase_classes = 6\ntrain_per_class = 12\ntest_per_class = 10\n"
       "num_tasks = 3\nbuffer_per_class = 5\nmask_rate = 0.8\nseed = 17\nstream_seed = 4\n";
  return dir / "small.cfg";
}

TEST(Cli, MaskRerunIsBitIdentical) {
  const auto dir = testing::scratch_dir("cli_mask");
  Rng rng(1);
  ParamSet pre, ft;
  pre.add("w", testing::random_tensor(rng, {50}));
  ft.add("w", testing::random_tensor(rng, {50}));
  save_paramset(pre, dir / "pre.sotu");
  save_paramset(ft, dir / "ft.sotu");
  const auto d = (dir / "d.sotu").string();
  ASSERT_EQ(cli({"delta", "--ft", (dir / "ft.sotu").string(), "--base", (dir / "pre.sotu").string(), "--out", d}).code, 0);
  for (const char* out : {"a.sdelta", "b.sdelta"}) {
    const auto r = cli({"mask", "--in", d, "--base", (dir / "pre.sotu").string(), "--p", "0.9", "--seed", "7",
                        "--out", (dir / out).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir / "a.sdelta"), slurp(dir / "b.sdelta"));
  const auto sd = load_sparse_delta(dir / "a.sdelta");
  EXPECT_EQ(sd.seed, 7u);
  EXPECT_EQ(sd.base, fingerprint(pre));
  EXPECT_NEAR(sd.keep_prob, 0.1, 1e-15);
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"mask", "--bogus", "1"}).code, 1);
  const auto missing = cli({"mask", "--in", "x"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("--help"), std::string::npos);
  EXPECT_EQ(cli({"mask", "--in", "/nonexistent.sotu", "--base", "/nonexistent.sotu", "--out", "/tmp/x"}).code, 1);
  EXPECT_EQ(cli({"run", "--mask_rate", "1.5"}).code, 1);
  EXPECT_EQ(cli({"run", "--epochs", "many"}).code, 1);
  EXPECT_EQ(cli({"sweep", "--rates", "0.5,abc"}).code, 1);
}

TEST(Cli, HelpListsFlagsWithDefaults) {
  const auto top = cli({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"pretrain", "finetune", "delta", "mask", "merge", "similarity", "collisions", "prototypes",
                          "evaluate", "run", "sweep", "probe-attention"}) {
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    const auto r = cli({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
  }
  const auto run = cli({"run", "--help"});
  for (const auto& key : config_keys()) EXPECT_NE(run.out.find("--" + key), std::string::npos) << key;
  EXPECT_NE(run.out.find("--config"), std::string::npos);
  EXPECT_NE(run.out.find("0.9"), std::string::npos);
  const auto mask = cli({"mask", "--help"});
  EXPECT_NE(mask.out.find("--seed"), std::string::npos);
}

TEST(Cli, FlagsOverrideConfigFileOverDefaults) {
  const auto dir = testing::scratch_dir("cli_precedence");
  const auto cfg = write_small_config(dir);
  const auto out = dir / "run";
  const auto r = cli({"run", "--config", cfg.string(), "--epochs", "2", "--output_dir", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto used = load_config(out / "config.cfg");
  EXPECT_EQ(used.hyper.epochs, 2u);          // flag
  EXPECT_EQ(used.num_tasks, 3u);             // file
  EXPECT_EQ(used.projection.nonlinearity,    // default
            RunConfig{}.projection.nonlinearity);
}

TEST(Cli, DemoConfigRunEmitsAllOutputs) {
  const auto dir = testing::scratch_dir("cli_demo");
  const auto r = cli({"run", "--config", SOTU_SOURCE_DIR "/configs/demo.cfg", "--output_dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"metrics.csv", "summary.csv", "similarity.csv", "collisions.csv", "manifest.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto again = testing::scratch_dir("cli_demo_again");
  ASSERT_EQ(cli({"run", "--config", SOTU_SOURCE_DIR "/configs/demo.cfg", "--output_dir", again.string()}).code, 0);
  EXPECT_EQ(slurp(dir / "metrics.csv"), slurp(again / "metrics.csv"));
  EXPECT_EQ(slurp(dir / "summary.csv"), slurp(again / "summary.csv"));
}

TEST(Cli, HandComposedPipelineMatchesRun) {
  const auto dir = testing::scratch_dir("cli_compose");
  const auto cfg = write_small_config(dir).string();
  const auto ref = dir / "ref";
  const auto r = cli({"run", "--config", cfg, "--output_dir", ref.string()});
  ASSERT_EQ(r.code, 0) << r.err;

  const auto hand = dir / "hand";
  fs::create_directories(hand);
  auto ok = [](const CliResult& res) {
    EXPECT_EQ(res.code, 0) << res.err;
    return res.code == 0;
  };
  const auto pre = (hand / "pre.sotu").string();
  ASSERT_TRUE(ok(cli({"pretrain", "--config", cfg, "--data", (ref / "data/base_train.csv").string(), "--out", pre})));
  EXPECT_EQ(slurp(pre), slurp(ref / "pre.sotu"));

  const auto manifest = read_csv(ref / "manifest.csv");
  ASSERT_EQ(manifest.size(), 4u);
  ASSERT_EQ(manifest[0], (std::vector<std::string>{"task", "classes", "task_seed", "mask_seed", "prototype_seed"}));
  const auto used = load_config(ref / "config.cfg");

  std::vector<std::string> deltas, tests;
  std::string protos;
  for (std::size_t k = 1; k <= 3; ++k) {
    const auto& row = manifest[k];
    const auto tag = std::to_string(k);
    const auto train = (ref / ("data/task" + tag + "_train.csv")).string();
    tests.push_back((ref / ("data/task" + tag + "_test.csv")).string());
    const auto ft = (hand / ("ft" + tag + ".sotu")).string();
    const auto dense = (hand / ("d" + tag + ".sotu")).string();
    const auto sparse = (hand / ("task" + tag + ".sdelta")).string();
    ASSERT_TRUE(ok(cli({"finetune", "--config", cfg, "--base", pre, "--data", train, "--seed", row[2], "--out", ft})));
    ASSERT_TRUE(ok(cli({"delta", "--ft", ft, "--base", pre, "--out", dense})));
    ASSERT_TRUE(ok(cli({"mask", "--in", dense, "--base", pre, "--p", get_config_value(used, "mask_rate"), "--seed",
                        row[3], "--out", sparse})));
    EXPECT_EQ(slurp(sparse), slurp(ref / ("task" + tag + ".sdelta")));
    deltas.push_back(sparse);

    // Prototypes for task k come from the model merged up to task k.
    const auto merged_k = (hand / ("merged" + tag + ".sotu")).string();
    std::vector<std::string> merge{"merge", "--base", pre, "--out", merged_k, "--deltas"};
    merge.insert(merge.end(), deltas.begin(), deltas.end());
    ASSERT_TRUE(ok(cli(merge)));
    const auto next = (hand / ("protos" + tag + ".protos")).string();
    std::vector<std::string> proto{"prototypes", "--config", cfg, "--model", merged_k, "--data", train,
                                   "--seed", row[4], "--out", next};
    if (!protos.empty()) {
      proto.push_back("--protos-in");
      proto.push_back(protos);
    }
    ASSERT_TRUE(ok(cli(proto)));
    protos = next;
  }
  const auto merged = (hand / "merged3.sotu").string();
  EXPECT_EQ(slurp(merged), slurp(ref / "merged.sotu"));
  EXPECT_EQ(slurp(protos), slurp(ref / "prototypes.protos"));

  std::vector<std::string> eval{"evaluate", "--config", cfg, "--model", merged, "--protos", protos,
                                "--out", (hand / "acc.txt").string(), "--data"};
  eval.insert(eval.end(), tests.begin(), tests.end());
  const auto e = cli(eval);
  ASSERT_EQ(e.code, 0) << e.err;
  const auto metrics = read_csv(ref / "metrics.csv");
  ASSERT_EQ(metrics.size(), 4u);
  EXPECT_EQ(e.out, "accuracy=" + metrics[3][1] + "\n");

  // The analysis subcommands agree with the run's own reports.
  std::vector<std::string> sim{"similarity", "--out", (hand / "similarity.csv").string(), "--deltas"};
  sim.insert(sim.end(), deltas.begin(), deltas.end());
  ASSERT_TRUE(ok(cli(sim)));
  EXPECT_EQ(slurp(hand / "similarity.csv"), slurp(ref / "similarity.csv"));
  std::vector<std::string> col{"collisions", "--out", (hand / "collisions.csv").string(), "--deltas"};
  col.insert(col.end(), deltas.begin(), deltas.end());
  ASSERT_TRUE(ok(cli(col)));
  EXPECT_EQ(slurp(hand / "collisions.csv"), slurp(ref / "collisions.csv"));
}

TEST(Cli, MergeRejectsForeignBase) {
  const auto dir = testing::scratch_dir("cli_foreign");
  Rng rng(2);
  ParamSet a, b;
  a.add("w", testing::random_tensor(rng, {4}));
  b.add("w", testing::random_tensor(rng, {4}));
  save_paramset(a, dir / "a.sotu");
  save_paramset(b, dir / "b.sotu");
  ASSERT_EQ(cli({"mask", "--in", (dir / "a.sotu").string(), "--base", (dir / "a.sotu").string(), "--out",
                 (dir / "a.sdelta").string()})
                .code,
            0);
  const auto r = cli({"merge", "--base", (dir / "b.sotu").string(), "--deltas", (dir / "a.sdelta").string(), "--out",
                      (dir / "m.sotu").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("BaseMismatch"), std::string::npos);
}

TEST(Cli, SweepAndProbeWriteTheirFiles) {
  const auto dir = testing::scratch_dir("cli_sweep");
  const auto cfg = write_small_config(dir).string();
  const auto r = cli({"sweep", "--config", cfg, "--rates", "1,0.5", "--output_dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
  EXPECT_TRUE(fs::exists(dir / "sweep.svg"));
  const auto p = cli({"probe-attention", "--instances", "50", "--trials", "5", "--out", (dir / "stab.csv").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("max_violation="), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "stab.csv"));
}

}  // namespace
}  // namespace sotu
