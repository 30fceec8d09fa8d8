#pragma once

#include "dhn/box.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dhn {

/// Mann-Whitney AUC; tied positive/negative pairs count one half.
double roc_auc(std::span<const int> labels, std::span<const double> scores);

/// Average precision: sum over distinct score thresholds (descending) of
/// precision times the recall gained at that threshold.
double pr_auc(std::span<const int> labels, std::span<const double> scores);

struct ScoredBox {
  Box box;
  double score = 0.0;
};

struct DetectionRecord {
  std::string image_id;
  std::vector<ScoredBox> detections;
  std::vector<Box> gt;
};

struct MatchOutcome {
  std::vector<bool> true_positive;  // per detection, in input order
  std::vector<bool> gt_hit;
};

/// Greedy matching in descending score order (equal scores keep input order).
/// Each detection takes the unmatched ground truth of highest IoU (lowest index
/// on ties) and is a true positive when that IoU reaches the threshold.
MatchOutcome match_detections(const DetectionRecord& record, double iou_threshold);

struct Curve {
  std::string x_label, y_label;
  std::vector<double> x, y;
  double auc = 0.0;
};

/// Lesion sensitivity against false positives per image, one point per distinct
/// score threshold starting from (0,0). Clipped at fppi_max by linear
/// interpolation, extended flat to fppi_max, integrated by the trapezoid rule
/// and divided by fppi_max.
Curve froc(std::span<const DetectionRecord> records, double iou_threshold = 0.4, double fppi_max = 1.0);

/// Highest sensitivity over operating points whose FPPI does not exceed `fppi`.
double froc_sensitivity_at(std::span<const DetectionRecord> records, double fppi, double iou_threshold = 0.4);

/// Lesion sensitivity against the fraction of images holding at least one
/// false positive, extended flat to x = 1 and integrated by the trapezoid rule.
Curve afroc(std::span<const DetectionRecord> records, double iou_threshold = 0.4);

/// Single-class average precision over pooled detections, 101-point interpolated.
double map_at_iou(std::span<const DetectionRecord> records, double iou_threshold = 0.4);

/// Writes "x,y" rows under a header naming the axes.
void write_curve_csv(const Curve& curve, const std::filesystem::path& path);

struct CheckpointMetrics {
  std::string checkpoint;
  std::map<std::string, double> validation;
  std::map<std::string, double> test;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct TopkReport {
  std::vector<std::string> selected;
  std::map<std::string, MetricSummary> metrics;
};

/// Picks the k checkpoints with the highest validation `selection_metric`
/// (earlier checkpoints win ties; NaN ranks last) and summarises their test
/// metrics. Metrics that are NaN for a selected checkpoint summarise to NaN.
TopkReport topk_report(std::span<const CheckpointMetrics> table, std::size_t k, const std::string& selection_metric);

MetricSummary summarize(std::span<const double> values);

}  // namespace dhn
