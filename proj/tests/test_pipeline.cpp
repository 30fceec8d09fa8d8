#include "dhn/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace {

using namespace dhn;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class TinyRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "dhn_pipeline_test";
    fs::remove_all(root_);
    config_ = parse_config(R"(
[data]
n_patients = 20
scans_per_patient = 3
image_size = 64
[train]
epochs = 1
lr = 5e-4
[eval]
topk = 1
[ablation]
cells = id/id;id/id
seeds = 1
)");
    config_.data.dir = root_ / "data";
    generate_dataset(config_.data.seed, config_.data.n_patients, config_.data.scans_per_patient, config_.data.synth, config_.data.dir);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static inline fs::path root_;
  static inline RunConfig config_;
};

TEST_F(TinyRun, OneEpochWritesCheckpointAndLogs) {
  const TrainResult r = run_training(config_, root_ / "run_a");
  ASSERT_EQ(r.table.size(), 1u);
  EXPECT_TRUE(fs::exists(root_ / "run_a/checkpoints/epoch_001.ckpt"));
  EXPECT_TRUE(fs::exists(root_ / "run_a/metrics.csv"));
  EXPECT_TRUE(fs::exists(root_ / "run_a/topk.csv"));
  ASSERT_TRUE(r.topk);
  EXPECT_FALSE(std::isnan(r.table[0].test.at("roc_auc")));
  EXPECT_EQ(r.topk->metrics.at("roc_auc").std, 0.0);

  const std::string echo = slurp(root_ / "run_a/config.ini");
  EXPECT_EQ(echo.rfind("; dhn ", 0), 0u);
  EXPECT_EQ(to_ini(parse_config(echo)), to_ini(config_));

  std::ifstream log(root_ / "run_a/step_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    ++lines;
    for (const char* key : {"\"l_obj\"", "\"l_reg\"", "\"l_cls\"", "\"l_bbox\"", "\"L_l\"", "\"L_g\"", "\"L\"",
                            "\"grad_norm\"", "\"step\""}) {
      EXPECT_NE(line.find(key), std::string::npos) << key;
    }
  }
  EXPECT_EQ(lines, 48);  // 16 training patients x 3 scans, one pair per step
}

TEST_F(TinyRun, SameSeedSameFirstStep) {
  const TrainResult a = run_training(config_, root_ / "run_b");
  const TrainResult b = run_training(config_, root_ / "run_c");
  EXPECT_EQ(a.first_step.L, b.first_step.L);
  EXPECT_EQ(a.first_step.L_g, b.first_step.L_g);
  EXPECT_EQ(a.first_step.l_obj, b.first_step.l_obj);
  EXPECT_EQ(slurp(root_ / "run_b/checkpoints/epoch_001.ckpt"), slurp(root_ / "run_c/checkpoints/epoch_001.ckpt"));
}

TEST_F(TinyRun, EvaluationIsRepeatableAndCurvesMonotone) {
  DhnModel m = make_model(config_.model, 3);
  const auto scans = load_split(config_.data.dir, "train");
  const EvalReport a = evaluate(m, scans, config_.eval), b = evaluate(m, scans, config_.eval);
  for (const auto& name : kMetricNames) {
    const double x = a.metrics.at(name), y = b.metrics.at(name);
    EXPECT_TRUE(x == y || (std::isnan(x) && std::isnan(y))) << name;
  }
  for (std::size_t i = 1; i < a.froc.y.size(); ++i) EXPECT_GE(a.froc.y[i], a.froc.y[i - 1]);
}

TEST_F(TinyRun, SingleClassSplitReportsPerMetricErrors) {
  const DhnModel m = make_model(config_.model, 4);
  auto scans = load_split(config_.data.dir, "train");
  std::erase_if(scans, [](const Scan& s) { return s.global_label == 1; });
  ASSERT_FALSE(scans.empty());
  const EvalReport r = evaluate(m, scans, config_.eval);
  EXPECT_TRUE(std::isnan(r.metrics.at("roc_auc")));
  EXPECT_TRUE(r.errors.count("roc_auc"));
  EXPECT_TRUE(std::isnan(r.metrics.at("froc_auc")));
  EXPECT_EQ(r.probabilities.size(), scans.size());
}

TEST_F(TinyRun, IdenticalAblationCellsGiveIdenticalRows) {
  const auto rows = run_ablation(config_, root_ / "ablation");
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) EXPECT_EQ(r.status, "ok");
  for (const auto& name : kMetricNames) {
    const double x = rows[0].metrics.at(name).mean, y = rows[1].metrics.at(name).mean;
    EXPECT_TRUE(x == y || (std::isnan(x) && std::isnan(y))) << name;
    const double s = rows[0].metrics.at(name).std;
    EXPECT_TRUE(s == 0.0 || std::isnan(s)) << name;
  }
  EXPECT_TRUE(fs::exists(root_ / "ablation/ablation.csv"));
}

TEST(NullModel, RocAucNearChance) {
  const fs::path dir = fs::temp_directory_path() / "dhn_null_model";
  fs::remove_all(dir);
  SynthConfig synth;
  synth.height = synth.width = 64;
  generate_dataset(21, 100, 1, synth, dir);
  auto scans = load_split(dir, "train");
  DhnConfig model_cfg;
  model_cfg.image_size = 64;
  double total = 0.0;
  const int seeds = 6;
  for (int s = 0; s < seeds; ++s) {
    const DhnModel m = make_model(model_cfg, 100 + s);
    total += evaluate(m, scans, EvalSection{}).metrics.at("roc_auc");
  }
  EXPECT_NEAR(total / seeds, 0.5, 0.1);
  fs::remove_all(dir);
}

}  // namespace
