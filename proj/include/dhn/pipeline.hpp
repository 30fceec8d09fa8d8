#pragma once

#include "dhn/config.hpp"
#include "dhn/metrics.hpp"
#include "dhn/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dhn {

/// Metric columns reported for every evaluation, in table order.
/// froc_sensitivity is the best lesion sensitivity at FPPI <= fppi_max.
inline const std::vector<std::string> kMetricNames = {"roc_auc",   "pr_auc", "froc_auc",
                                                      "afroc_auc", "map",    "froc_sensitivity"};

struct EvalReport {
  std::map<std::string, double> metrics;      // NaN where a metric is undefined
  std::map<std::string, std::string> errors;  // diagnostic per undefined metric
  Curve froc, afroc;
  std::vector<DetectionRecord> records;
  std::vector<double> probabilities;
};

/// Runs infer over `scans` and computes every metric. A metric that cannot be
/// computed (for example ROC-AUC on a single-class split) is reported as NaN
/// with its diagnostic; the others are unaffected.
EvalReport evaluate(const DhnModel& model, std::span<const Scan> scans, const EvalSection& eval);

struct TrainResult {
  std::filesystem::path run_dir;
  std::vector<CheckpointMetrics> table;
  std::optional<TopkReport> topk;
  LossBreakdown first_step;
};

/// Trains on <data.dir>/train, checkpointing and evaluating val and test every
/// checkpoint_every epochs. Writes into `run_dir`: config.ini (echo with
/// version), step_log.jsonl, checkpoints/epoch_NNN.ckpt, metrics.csv and,
/// when at least eval.topk checkpoints exist, topk.csv. A non-finite loss
/// aborts with the step index and breakdown.
TrainResult run_training(const RunConfig& config, const std::filesystem::path& run_dir);

struct AblationRow {
  std::string phi_g, phi_l;
  std::vector<std::uint64_t> seeds;
  std::string status = "ok";  // or the failure message
  std::map<std::string, MetricSummary> metrics;  // pooled over each seed's top-k
  std::vector<double> seed_roc_auc;              // per-seed top-k mean ROC-AUC
};

/// Trains every cell with every seed (run dirs <out>/cellN/seedS) and writes
/// <out>/ablation.csv. Cell failures are recorded, not propagated.
std::vector<AblationRow> run_ablation(const RunConfig& config, const std::filesystem::path& out_dir);

void write_metrics_csv(std::span<const CheckpointMetrics> table, const std::filesystem::path& path);
void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path);

struct IsolationReport {
  int steps = 0;
  double max_local_grad_from_global = 0.0;  // max |dL_g / d(local-head params)|
  double max_global_grad_from_local = 0.0;  // max |dL_l / d(global-head params)|
  double max_coupling_error = 0.0;          // trunk: |dL - (l1 dL_g + l2 dL_l)|, relative
  bool passed() const { return max_local_grad_from_global == 0.0 && max_global_grad_from_local == 0.0 && max_coupling_error < 1e-10; }
};

/// Backward passes of L_g, L_l and L on `steps` random DHA batches of a small
/// model, comparing head gradients against exact zero and trunk gradients
/// against the weighted sum of the single-head passes.
IsolationReport gradient_isolation_check(int steps, std::uint64_t seed);

}  // namespace dhn
