#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "mxacl/checkpoint.hpp"
#include "mxacl/config.hpp"

namespace mxacl {
namespace {
namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// Fresh directory per test, removed afterwards.
class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("mxacl_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return cli::run(args, out_, err_);
  }

  void write(const std::string& name, const json& j) { std::ofstream(path(name)) << j.dump(); }

  /// Synthetic data under data/ and a tiny two-stage config under run.json.
  void tiny_setup(json regime = json::object(), std::size_t layers = 4) {
    write("spec.json", {{"n_train", 40}, {"n_eval", 24}, {"seed", 3}});
    ASSERT_EQ(run({"synth", "--spec", path("spec.json"), "--out", path("data")}), 0) << err_.str();
    json r = {{"epochs", 1}, {"stage2_epochs", 1}, {"batch_size", 8}};
    r.update(regime);
    write("run.json", {{"model",
                        {{"d_model", 16}, {"n_heads", 2}, {"n_layers", layers}, {"d_ff", 32}, {"d_exit", 8},
                         {"max_seq_len", 17}}},
                       {"regime", r},
                       {"data", {{"dir", path("data")}}},
                       {"out", path("run")},
                       {"seeds", {1}}});
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

// ------------------------------------------------------------------ run config

TEST(RunConfigTest, ValidationRules) {
  RunConfig c = parse_run_config({{"data", {{"synth", json::object()}}}});
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{0});
  EXPECT_THROW(parse_run_config(json::object()).validate(), ValidationError);  // no data source
  EXPECT_THROW(parse_run_config({{"data", {{"synth", json::object()}, {"dir", "d"}}}}).validate(), ValidationError);
  EXPECT_THROW(parse_run_config({{"data", {{"dir", "d"}}}, {"seeds", {1, 1}}}).validate(), ValidationError);
  EXPECT_THROW(parse_run_config({{"data", {{"dir", "d"}}}, {"seeds", json::array()}}).validate(), ValidationError);
  EXPECT_THROW(parse_run_config({{"preset", "nope"}}), ValidationError);
  EXPECT_THROW(parse_run_config({{"data", {{"path", "d"}}}}), ValidationError);
  EXPECT_THROW(parse_run_config({{"model", {{"d_model", "wide"}}}}), ValidationError);
  EXPECT_THROW(parse_run_config({{"data", {{"synth", {{"n_classes", 1}}}}}}).validate(), ValidationError);
}

TEST(RunConfigTest, PresetAppliedBeforeRegimeKeys) {
  const RunConfig c = parse_run_config({{"preset", "acl"}, {"regime", {{"acl_grad", false}}}});
  EXPECT_EQ(c.regime.stage1_objective, Objective::acl_embed);
  EXPECT_EQ(c.regime.objective, Objective::acl_cl);
  EXPECT_FALSE(c.regime.acl_grad);
}

// ------------------------------------------------------------------ synth

TEST_F(Cli, SynthWritesThreeFilesDeterministically) {
  write("spec.json", {{"n_train", 30}, {"n_eval", 12}, {"seed", 9}});
  ASSERT_EQ(run({"synth", "--spec", path("spec.json"), "--out", path("a")}), 0) << err_.str();
  ASSERT_EQ(run({"synth", "--spec", path("spec.json"), "--out", path("b")}), 0);
  for (const char* f : {"train.tsv", "eval.tsv", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(path("a") / f)) << f;
    EXPECT_EQ(slurp(path("a") / f), slurp(path("b") / f)) << f;
  }
  const json m = json::parse(slurp(path("a") / "manifest.json"));
  for (const char* k : {"name", "K", "n_train", "n_eval", "vocab_size", "seed"}) EXPECT_TRUE(m.contains(k)) << k;
  EXPECT_EQ(m["n_train"], 30);
  EXPECT_EQ(count_lines(slurp(path("a") / "train.tsv")), 30u);
}

TEST_F(Cli, SynthRejectsSingleClass) {
  write("spec.json", {{"n_classes", 1}});
  EXPECT_EQ(run({"synth", "--spec", path("spec.json"), "--out", path("a")}), cli::kValidation);
  EXPECT_FALSE(fs::exists(path("a") / "train.tsv"));
}

TEST_F(Cli, SynthRejectsUnknownKey) {
  write("spec.json", {{"n_clases", 3}});
  EXPECT_EQ(run({"synth", "--spec", path("spec.json"), "--out", path("a")}), cli::kValidation);
}

TEST_F(Cli, MissingInputIsIoError) {
  EXPECT_EQ(run({"synth", "--spec", path("absent.json"), "--out", path("a")}), cli::kIo);
  EXPECT_EQ(run({"curve", "--checkpoint", path("absent.bin"), "--data", path("absent")}), cli::kIo);
}

TEST_F(Cli, UsageErrorsAreValidationErrors) {
  EXPECT_EQ(run({}), cli::kValidation);
  EXPECT_EQ(run({"frobnicate"}), cli::kValidation);
  EXPECT_EQ(run({"train"}), cli::kValidation);
  EXPECT_EQ(run({"--help"}), 0);
}

// ------------------------------------------------------------------ train

TEST_F(Cli, TrainTwoStageWritesStageArtifacts) {
  tiny_setup({{"objective", "acl_cl"}, {"acl_grad", true}});
  ASSERT_EQ(run({"train", "--config", path("run.json")}), 0) << err_.str();
  for (const char* f : {"checkpoint_seed1_stage1.bin", "checkpoint_seed1.bin", "metrics_seed1.jsonl",
                        "angles_seed1.jsonl", "scores.csv", "config.resolved.json"}) {
    EXPECT_TRUE(fs::exists(path("run") / f)) << f;
  }
  std::istringstream metrics(slurp(path("run") / "metrics_seed1.jsonl"));
  std::set<int> stages;
  std::string line;
  while (std::getline(metrics, line)) {
    const json j = json::parse(line);
    for (const char* k : {"run_id", "stage", "epoch", "step", "exit_layer", "loss_ce", "loss_contrastive",
                          "lambda_prime", "lr", "train_acc", "eval_acc"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    stages.insert(j["stage"].get<int>());
  }
  EXPECT_EQ(stages, (std::set<int>{1, 2}));
  EXPECT_EQ(load_checkpoint(path("run") / "checkpoint_seed1_stage1.bin").stage1_complete(), true);
  const std::string scores = slurp(path("run") / "scores.csv");
  EXPECT_EQ(scores.substr(0, 23), "seed,exit_layer,score\n1");
  EXPECT_EQ(count_lines(scores), 5u);
}

TEST_F(Cli, ResolvedConfigFillsDefaults) {
  tiny_setup();
  ASSERT_EQ(run({"train", "--config", path("run.json")}), 0) << err_.str();
  const json r = json::parse(slurp(path("run") / "config.resolved.json"));
  EXPECT_EQ(r["regime"]["lambda"], 0.02);
  EXPECT_EQ(r["regime"]["temperature"], 0.5);
  EXPECT_EQ(r["regime"]["gamma_threshold"], 90.0);
  EXPECT_EQ(r["model"]["dropout"], 0.1);
  EXPECT_EQ(r["regime"]["regime"], "2st");
  EXPECT_EQ(r["model"]["n_classes"], 3);
  // The echo parses back to the same config.
  EXPECT_EQ(json(parse_run_config(r)), r);
}

TEST_F(Cli, FlagsOverrideFile) {
  tiny_setup({{"lambda", 0.1}});
  ASSERT_EQ(run({"train", "--config", path("run.json"), "--lambda", "0.5", "--seed", "4", "--out", path("other")}), 0)
      << err_.str();
  const json r = json::parse(slurp(path("other") / "config.resolved.json"));
  EXPECT_EQ(r["regime"]["lambda"], 0.5);
  EXPECT_EQ(r["seeds"], json::array({4}));
  EXPECT_TRUE(fs::exists(path("other") / "checkpoint_seed4.bin"));
}

TEST_F(Cli, PresetThenExplicitRegimeKeys) {
  tiny_setup({{"kd", false}});
  ASSERT_EQ(run({"train", "--config", path("run.json"), "--preset", "2st", "--epochs", "1"}), 0) << err_.str();
  const json r = json::parse(slurp(path("run") / "config.resolved.json"));
  EXPECT_EQ(r["preset"], "2st");
  EXPECT_EQ(r["regime"]["kd"], false);
  EXPECT_EQ(r["regime"]["objective"], "ce");
}

TEST_F(Cli, UnknownConfigKeyRejectedBeforeCompute) {
  tiny_setup();
  json j = json::parse(slurp(path("run.json")));
  j["regime"]["lamda"] = 0.1;
  write("run.json", j);
  EXPECT_EQ(run({"train", "--config", path("run.json")}), cli::kValidation);
  EXPECT_NE(err_.str().find("lamda"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("run")));
  j = json::parse(slurp(path("run.json")));
  j["regime"].erase("lamda");
  j["extra"] = 1;
  write("run.json", j);
  EXPECT_EQ(run({"train", "--config", path("run.json")}), cli::kValidation);
}

TEST_F(Cli, SameSeedTwiceIsByteIdentical) {
  tiny_setup({{"objective", "acl_cl"}, {"stage1_objective", "acl_embed"}, {"acl_grad", true}});
  ASSERT_EQ(run({"train", "--config", path("run.json"), "--out", path("a")}), 0) << err_.str();
  ASSERT_EQ(run({"train", "--config", path("run.json"), "--out", path("b")}), 0);
  for (const char* f : {"checkpoint_seed1.bin", "metrics_seed1.jsonl", "angles_seed1.jsonl", "scores.csv"}) {
    EXPECT_EQ(slurp(path("a") / f), slurp(path("b") / f)) << f;
  }
}

TEST_F(Cli, DivergenceExitsWithDiagnostic) {
  tiny_setup({{"lr", 1e300}, {"warmup_fraction", 0.0}});
  EXPECT_EQ(run({"train", "--config", path("run.json")}), cli::kDivergence) << err_.str();
  ASSERT_TRUE(fs::exists(path("run") / "divergence_seed1.json"));
  const json d = json::parse(slurp(path("run") / "divergence_seed1.json"));
  for (const char* k : {"run_id", "stage", "epoch", "step", "exit_layer", "error"}) EXPECT_TRUE(d.contains(k)) << k;
  EXPECT_FALSE(fs::exists(path("run") / "checkpoint_seed1.bin"));
}

// ------------------------------------------------------------------ checkpoint commands

TEST_F(Cli, CurveHasOneRowPerLayer) {
  tiny_setup();
  ASSERT_EQ(run({"train", "--config", path("run.json")}), 0) << err_.str();
  ASSERT_EQ(run({"curve", "--checkpoint", path("run") / "checkpoint_seed1.bin", "--data", path("data"), "--out",
                 path("curve")}),
            0)
      << err_.str();
  const std::string csv = slurp(path("curve") / "curve.csv");
  EXPECT_EQ(count_lines(csv), 5u);
  EXPECT_EQ(csv, out_.str());
  EXPECT_TRUE(fs::exists(path("curve") / "curve.resolved.json"));
}

TEST_F(Cli, EvalPoliciesAndErrors) {
  tiny_setup();
  ASSERT_EQ(run({"train", "--config", path("run.json")}), 0) << err_.str();
  const std::string ckpt = path("run") / "checkpoint_seed1.bin";
  ASSERT_EQ(run({"eval", "--checkpoint", ckpt, "--data", path("data"), "--out", path("ev")}), 0) << err_.str();
  const json full = json::parse(out_.str());
  EXPECT_EQ(full["avg_exit_layer"], 4.0);
  EXPECT_EQ(full["flops_ratio"], 1.0);
  EXPECT_EQ(count_lines(slurp(path("ev") / "eval_trace.jsonl")), 24u);
  ASSERT_EQ(run({"eval", "--checkpoint", ckpt, "--data", path("data"), "--policy", "fixed:2"}), 0);
  EXPECT_EQ(json::parse(out_.str())["avg_exit_layer"], 2.0);
  ASSERT_EQ(run({"eval", "--checkpoint", ckpt, "--data", path("data"), "--policy", "patience:1"}), 0);
  EXPECT_EQ(json::parse(out_.str())["avg_exit_layer"], 1.0);
  EXPECT_EQ(run({"eval", "--checkpoint", ckpt, "--data", path("data"), "--policy", "fixed:9"}), cli::kValidation);
  EXPECT_EQ(run({"eval", "--checkpoint", ckpt, "--data", path("data"), "--policy", "soon"}), cli::kValidation);
  EXPECT_EQ(run({"eval", "--checkpoint", ckpt, "--data", path("data"), "--split", "test"}), cli::kValidation);
}

TEST_F(Cli, AnglesTwoObjectivesTwoHistograms) {
  tiny_setup();
  ASSERT_EQ(run({"train", "--config", path("run.json")}), 0) << err_.str();
  const std::string ckpt = path("run") / "checkpoint_seed1.bin";
  for (const char* obj : {"ce+scl", "acl"}) {
    ASSERT_EQ(run({"angles", "--checkpoint", ckpt, "--data", path("data"), "--objective", obj, "--out", path("ang")}),
              0)
        << err_.str();
  }
  for (const char* tag : {"ce_scl_exit4", "acl_embed_exit4"}) {
    const json h = json::parse(slurp(path("ang") / (std::string("angle_hist_") + tag + ".json")));
    EXPECT_EQ(h["n_reports"], 4);  // 40 train records in batches of 10
    EXPECT_GE(h["min_deg"].get<double>(), 0.0);
    EXPECT_LE(h["max_deg"].get<double>(), 180.0);
    std::istringstream log(slurp(path("ang") / (std::string("angles_") + tag + ".jsonl")));
    std::string line;
    while (std::getline(log, line)) {
      const double g = json::parse(line)["gamma_deg"].get<double>();
      EXPECT_GE(g, 0.0);
      EXPECT_LE(g, 180.0);
    }
  }
  EXPECT_EQ(run({"angles", "--checkpoint", ckpt, "--data", path("data"), "--objective", "ce"}), cli::kValidation);
}

TEST_F(Cli, ExportRepresentations) {
  tiny_setup();
  ASSERT_EQ(run({"train", "--config", path("run.json")}), 0) << err_.str();
  ASSERT_EQ(run({"export-reps", "--checkpoint", path("run") / "checkpoint_seed1.bin", "--data", path("data"),
                 "--exit", "2", "--out", path("reps")}),
            0)
      << err_.str();
  // Header, 24 eval samples, 3 label embeddings.
  EXPECT_EQ(count_lines(slurp(path("reps") / "reps_exit2.csv")), 28u);
}

// ------------------------------------------------------------------ sweep

TEST_F(Cli, SweepDefaultGridSixRowsPerMethod) {
  tiny_setup(json::object(), 2);
  ASSERT_EQ(run({"sweep-lambda", "--config", path("run.json")}), 0) << err_.str();
  const std::string table = slurp(path("run") / "lambda_sweep.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "lambda,ce_scl,acl,ce_scl_std,acl_std");
  EXPECT_EQ(count_lines(table), 7u);
  // Per-seed scores: 2 methods x 6 lambdas x 1 seed x 2 exits, plus a header.
  EXPECT_EQ(count_lines(slurp(path("run") / "lambda_sweep_scores.csv")), 25u);
  const json s = json::parse(slurp(path("run") / "lambda_sweep_summary.json"));
  EXPECT_EQ(s["acl"]["mean_cross_layer_average"].size(), 6u);
  EXPECT_TRUE(s["ce_scl"].contains("spread"));
}

TEST_F(Cli, SweepSharedStageOneMatchesFreshRuns) {
  tiny_setup(json::object(), 2);
  RunConfig c = load_run_config(path("run.json"));
  const Dataset data = load_run_data(c);
  const Vocab vocab = Vocab::build(data.train);
  const cli::SweepResult sweep = cli::run_lambda_sweep(c, data, {"ce_scl"}, {0.1, 0.5});
  for (std::size_t g = 0; g < 2; ++g) {
    RunConfig one = c;
    one.regime = ablation_preset("ce_scl", c.regime);
    one.regime.lambda = sweep.grid[g];
    const cli::SeedRun fresh = cli::train_seed(one, data, vocab, 1);
    const ScoreTable t = make_score_table(score_model(fresh.model, data, vocab, 1));
    EXPECT_EQ(t.mean, sweep.cells[g].table.mean);
  }
}

TEST_F(Cli, SweepRejectsBadGrid) {
  tiny_setup(json::object(), 2);
  EXPECT_EQ(run({"sweep-lambda", "--config", path("run.json"), "--grid", "0.1,2"}), cli::kValidation);
}

}  // namespace
}  // namespace mxacl
