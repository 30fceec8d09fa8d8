// Acceptance report: one PASS/FAIL line per criterion. Exit status is non-zero
// when any selected criterion fails. Criterion 10 is soft and prints WARN.
//
//   acceptance --only fast     criteria 1-8 (seconds)
//   acceptance --only e2e      criteria 9-10 (trains 7 toy models)
//   acceptance                 everything

#include "../oracles.hpp"
#include "dhn/augment.hpp"
#include "dhn/boxes.hpp"
#include "dhn/config.hpp"
#include "dhn/gradcheck.hpp"
#include "dhn/losses.hpp"
#include "dhn/metrics.hpp"
#include "dhn/ops.hpp"
#include "dhn/pipeline.hpp"
#include "dhn/synthdata.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

namespace {

using namespace dhn;
namespace fs = std::filesystem;

// Tolerances and sizes, fixed.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-6;
constexpr int kGradInstances = 20;
constexpr double kGradBudgetSeconds = 120.0;
constexpr int kDeformCases = 100;
constexpr double kDeformTolerance = 1e-12;
constexpr int kBoxPairs = 10000;
constexpr double kBoxTolerance = 1e-12;
constexpr int kNmsInstances = 1000;
constexpr int kMaxBoxes = 64;
constexpr int kMetricInstances = 500;
constexpr double kMetricTolerance = 1e-12;
constexpr int kSamplerDraws = 100000;
constexpr double kBinomialRateTolerance = 0.01;
constexpr double kUniformRateTolerance = 0.005;
constexpr double kPlanLength = 7.7;
constexpr double kPlanLengthTolerance = 0.03;
constexpr int kIsolationSteps = 10;
constexpr double kLossTolerance = 1e-12;
constexpr double kSmokeRoc = 0.85;
constexpr double kSmokeFrocSensitivity = 0.6;
constexpr double kSmokeBudgetSeconds = 20 * 60.0;

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << " (" << what << "): " << detail << std::endl;
  if (!pass) ++failures;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckOptions o;
  o.instances_per_op = kGradInstances;
  o.step = kGradStep;
  o.tolerance = kGradTolerance;
  const auto cases = standard_gradcheck_cases();
  double worst = 0.0;
  std::string failed;
  for (const auto& r : run_gradcheck(cases, o)) {
    worst = std::max(worst, r.max_relative_error);
    if (!r.passed || r.instances < kGradInstances) failed += " " + r.op;
  }
  const double secs = seconds_since(t0);
  report(1, failed.empty() && secs < kGradBudgetSeconds, "gradient suite",
         std::to_string(cases.size()) + " ops x " + std::to_string(kGradInstances) + " instances, max rel err " +
             fmt(worst) + ", " + fmt(secs) + "s" + (failed.empty() ? "" : ", failing:" + failed));
}

void criterion2() {
  std::mt19937_64 g(2);
  std::uniform_int_distribution<int> n(1, 2), c(1, 3), hw(4, 9), k(0, 1), s(1, 2), p(0, 1);
  std::normal_distribution<double> d(0.0, 1.0);
  const auto random_tensor = [&](Shape shape) {
    Buffer v(shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = d(g);
    return Tensor(std::move(shape), std::move(v));
  };
  double worst = 0.0;
  for (int t = 0; t < kDeformCases; ++t) {
    const Index N = n(g), C = c(g), H = hw(g), W = hw(g), O = c(g), kh = 2 * k(g) + 1, kw = 2 * k(g) + 1, st = s(g), pad = p(g);
    const Tensor x = random_tensor({N, C, H, W}), w = random_tensor({O, C, kh, kw}), b = random_tensor({O});
    const Index ho = (H + 2 * pad - kh) / st + 1, wo = (W + 2 * pad - kw) / st + 1;
    const Tensor off({N, 2 * kh * kw, ho, wo}, 0.0);
    const Tensor a = conv2d(x, w, b, st, pad), e = deformable_conv2d(x, w, off, b, st, pad);
    worst = std::max(worst, (a.values() - e.values()).abs().maxCoeff());
  }
  report(2, worst <= kDeformTolerance, "deformable degeneracy",
         std::to_string(kDeformCases) + " cases, max |deform - conv| " + fmt(worst));
}

void criterion3() {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> shift(-50, 50), scale(0.2, 5.0);
  double worst = 0.0, worst_sim = 0.0;
  for (int i = 0; i < kBoxPairs; ++i) {
    const Box a = oracle::random_box(g), b = oracle::random_box(g);
    worst = std::max({worst, std::abs(iou(a, b) - oracle::iou(a, b)), std::abs(giou(a, b) - oracle::giou(a, b)),
                      std::abs(giou_loss(a, b) - (1.0 - oracle::giou(a, b)))});
    const double s = scale(g), dx = shift(g), dy = shift(g);
    const auto sim = [&](const Box& r) { return Box{s * r.x1 + dx, s * r.y1 + dy, s * r.x2 + dx, s * r.y2 + dy}; };
    worst_sim = std::max(worst_sim, std::abs(giou(sim(a), sim(b)) - giou(a, b)));
  }
  report(3, worst <= kBoxTolerance && worst_sim <= kBoxTolerance, "box/gIoU oracle",
         std::to_string(kBoxPairs) + " pairs, max oracle diff " + fmt(worst) + ", max similarity drift " +
             fmt(worst_sim));
}

void criterion4() {
  std::mt19937_64 g(4);
  std::uniform_int_distribution<int> count(0, kMaxBoxes), grid(0, 7), gts(0, 8);
  std::uniform_real_distribution<double> thr(0.05, 0.95);
  int nms_bad = 0, match_bad = 0;
  for (int t = 0; t < kNmsInstances; ++t) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    const int n = count(g);
    for (int i = 0; i < n; ++i) {
      boxes.push_back(oracle::random_box(g, 40.0, 2.0));
      scores.push_back(grid(g) / 8.0);
    }
    const double th = thr(g);
    if (nms(boxes, scores, th) != oracle::nms(boxes, scores, th)) ++nms_bad;

    std::vector<Box> gt;
    const int m = gts(g);
    for (int i = 0; i < m; ++i) gt.push_back(oracle::random_box(g, 40.0, 2.0));
    const double fg = 0.3 + 0.4 * thr(g), bg = fg * thr(g);
    const MatchResult r = match_anchors(boxes, gt, fg, bg);
    const oracle::AnchorMatch ref = oracle::match_anchors(boxes, gt, fg, bg);
    for (std::size_t a = 0; a < boxes.size(); ++a) {
      if (static_cast<int>(r.labels[a]) != ref.labels[a] || r.matched_gt[a] != ref.matched[a]) {
        ++match_bad;
        break;
      }
    }
  }
  report(4, nms_bad == 0 && match_bad == 0, "NMS and anchor matching",
         std::to_string(kNmsInstances) + " instances each, mismatches nms " + std::to_string(nms_bad) +
             ", matching " + std::to_string(match_bad));
}

void criterion5() {
  std::mt19937_64 g(5);
  std::uniform_int_distribution<int> grid(0, 10), coin(0, 1), len(2, 40);
  double worst = 0.0, worst_dup = 0.0;
  for (int t = 0; t < kMetricInstances; ++t) {
    const int n = len(g);
    std::vector<int> y(static_cast<std::size_t>(n));
    std::vector<double> s(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = coin(g);
      s[static_cast<std::size_t>(i)] = grid(g) / 10.0;
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max({worst, std::abs(roc_auc(y, s) - oracle::roc_auc(y, s)),
                      std::abs(pr_auc(y, s) - oracle::pr_auc(y, s))});

    const auto recs = oracle::random_records(g, 10, 8);
    worst = std::max({worst, std::abs(froc(recs).auc - oracle::froc(recs, 0.4, 1.0).auc),
                      std::abs(afroc(recs).auc - oracle::afroc(recs, 0.4).auc),
                      std::abs(map_at_iou(recs) - oracle::map_at_iou(recs, 0.4))});

    std::vector<DetectionRecord> twice = recs;
    twice.insert(twice.end(), recs.begin(), recs.end());
    std::vector<int> y2 = y;
    std::vector<double> s2 = s;
    y2.insert(y2.end(), y.begin(), y.end());
    s2.insert(s2.end(), s.begin(), s.end());
    worst_dup = std::max({worst_dup, std::abs(froc(twice).auc - froc(recs).auc),
                          std::abs(afroc(twice).auc - afroc(recs).auc),
                          std::abs(map_at_iou(twice) - map_at_iou(recs)), std::abs(roc_auc(y2, s2) - roc_auc(y, s))});
  }
  report(5, worst <= kMetricTolerance && worst_dup <= kMetricTolerance, "metric oracles",
         std::to_string(kMetricInstances) + " instances, max oracle diff " + fmt(worst) +
             ", max duplication drift " + fmt(worst_dup));
}

void criterion6() {
  std::mt19937_64 g(6);
  std::map<TransformKind, int> bin_counts, uni_counts;
  double length = 0.0;
  for (int i = 0; i < kSamplerDraws; ++i) {
    const SamplePlan p = sample_binomial(0.9, g);
    length += static_cast<double>(p.transforms.size());
    for (const auto& t : p.transforms) ++bin_counts[t.kind];
    ++uni_counts[sample_uniform(g).transforms.at(0).kind];
  }
  double bin_dev = 0.0, uni_dev = 0.0;
  for (TransformKind k : kTransformTable) {
    const double expected = k == TransformKind::HFlip ? 0.5 : 0.9;
    bin_dev = std::max(bin_dev, std::abs(bin_counts[k] / static_cast<double>(kSamplerDraws) - expected));
    uni_dev = std::max(uni_dev, std::abs(uni_counts[k] / static_cast<double>(kSamplerDraws) - 1.0 / 9.0));
  }
  const double mean_len = length / kSamplerDraws;
  report(6,
         bin_dev <= kBinomialRateTolerance && uni_dev <= kUniformRateTolerance &&
             std::abs(mean_len - kPlanLength) <= kPlanLengthTolerance,
         "DHA sampler statistics",
         std::to_string(kSamplerDraws) + " draws, max binomial rate dev " + fmt(bin_dev) +
             ", max uniform rate dev " + fmt(uni_dev) + ", mean plan length " + fmt(mean_len));
}

void criterion7() {
  const IsolationReport r = gradient_isolation_check(kIsolationSteps, 7);
  report(7, r.steps == kIsolationSteps && r.max_local_grad_from_global == 0.0 && r.max_global_grad_from_local == 0.0,
         "gradient isolation",
         std::to_string(r.steps) + " steps, max |dL_g/d(local)| " + fmt(r.max_local_grad_from_global) +
             ", max |dL_l/d(global)| " + fmt(r.max_global_grad_from_local));
}

void criterion8() {
  const LossWeights w;
  const double lg = global_loss(Tensor::from({1}, {0.5}), std::vector<int>{1}, w.alpha1, w.alpha2).item();
  const double expected = 0.69 * std::log(2.0);
  Tensor g = Tensor::scalar(2.0, true), l = Tensor::scalar(4.0, true);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(tape, multitask_loss(g, l, w.lambda1, w.lambda2));
  }
  const bool pass = std::abs(lg - expected) <= kLossTolerance && g.grad()[0] == 0.35 && l.grad()[0] == 2.5;
  std::ostringstream os;
  os.precision(17);
  os << "L_g(y=1,p=0.5) = " << lg << " vs 0.69 ln 2 = " << expected << ", dL/dL_g = " << g.grad()[0]
     << ", dL/dL_l = " << l.grad()[0];
  report(8, pass, "loss arithmetic", os.str());
}

/// The frozen smoke configuration; see configs/toy.ini.
RunConfig smoke_config(const fs::path& data_dir) {
  RunConfig c = parse_config(R"(
[data]
seed = 11
n_patients = 250
image_size = 128
nodule_prob = 0.5
[model]
anchor_sizes = 6,8;10,13;17,24
[train]
lr = 7e-4
momentum = 0.975
clip_norm = 10
epochs = 10
seed = 1
phi_g = id
phi_l = id
[eval]
topk = 8
)");
  c.data.dir = data_dir;
  return c;
}

void criteria_e2e(const fs::path& work) {
  const RunConfig c = smoke_config(work / "data");
  fs::remove_all(work);
  generate_dataset(c.data.seed, c.data.n_patients, c.data.scans_per_patient, c.data.synth, c.data.dir);

  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = run_training(c, work / "smoke");
  const double secs = seconds_since(t0);
  const auto& last = r.table.back().test;
  const double roc = last.at("roc_auc"), sens = last.at("froc_sensitivity");
  report(9, roc >= kSmokeRoc && sens >= kSmokeFrocSensitivity && secs <= kSmokeBudgetSeconds,
         "end-to-end smoke",
         "final checkpoint test ROC-AUC " + fmt(roc) + " (>= " + fmt(kSmokeRoc) + "), FROC sensitivity at FPPI 1 " +
             fmt(sens) + " (>= " + fmt(kSmokeFrocSensitivity) + "), " + fmt(secs) + "s");

  RunConfig grid = c;
  grid.ablation.cells = {{AugStrategy::identity(), AugStrategy::identity()},
                         {AugStrategy::binomial(0.9), AugStrategy::uniform()}};
  grid.ablation.seeds = {1, 2, 3};
  const auto rows = run_ablation(grid, work / "ablation");
  const auto mean_roc = [](const AblationRow& row) {
    double s = 0.0;
    for (double v : row.seed_roc_auc) s += v;
    return row.seed_roc_auc.empty() ? NAN : s / static_cast<double>(row.seed_roc_auc.size());
  };
  const double base = mean_roc(rows[0]), dha = mean_roc(rows[1]);
  const std::string detail = "mean top-8 test ROC-AUC over 3 seeds: bin:0.9/uni " + fmt(dha) + ", id/id " + fmt(base);
  if (rows[0].status != "ok" || rows[1].status != "ok") {
    report(10, false, "directional ablation", "cell failed: " + rows[0].status + " / " + rows[1].status);
  } else if (dha >= base) {
    std::cout << "PASS criterion 10 (directional ablation): " << detail << std::endl;
  } else {
    std::cout << "WARN criterion 10 (directional ablation): " << detail
              << "; ordering not reproduced on this dataset (soft criterion)" << std::endl;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance report"};
  std::string only = "all";
  std::string work = (fs::temp_directory_path() / "dhn_acceptance").string();
  app.add_option("--only", only, "fast (1-8), e2e (9-10) or all")->check(CLI::IsMember({"fast", "e2e", "all"}));
  app.add_option("--work", work, "scratch directory for the end-to-end runs");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  try {
    if (only != "e2e") {
      criterion1();
      criterion2();
      criterion3();
      criterion4();
      criterion5();
      criterion6();
      criterion7();
      criterion8();
    }
    if (only != "fast") criteria_e2e(work);
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
