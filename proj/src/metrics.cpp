#include "dhn/metrics.hpp"

#include "dhn/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dhn {

namespace {

void check_binary(std::span<const int> labels, std::span<const double> scores, const char* fn) {
  if (labels.size() != scores.size()) {
    throw std::invalid_argument(std::string(fn) + ": " + std::to_string(labels.size()) + " labels but " +
                                std::to_string(scores.size()) + " scores");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument(std::string(fn) + ": labels must be 0 or 1");
  }
}

/// Indices sorted by descending score; equal scores keep their input order.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double roc_auc(std::span<const int> labels, std::span<const double> scores) {
  check_binary(labels, scores, "roc_auc");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  const auto negatives = static_cast<std::ptrdiff_t>(labels.size()) - positives;
  if (positives == 0 || negatives == 0) {
    throw std::invalid_argument("roc_auc: need both classes, got " + std::to_string(positives) + " positive and " +
                                std::to_string(negatives) + " negative samples");
  }
  // Walk tie groups from the lowest score upwards.
  auto order = descending(scores);
  std::reverse(order.begin(), order.end());
  double wins = 0.0;
  double negatives_below = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos : neg) += 1.0;
      ++j;
    }
    wins += pos * negatives_below + 0.5 * pos * neg;
    negatives_below += neg;
    i = j;
  }
  return wins / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double pr_auc(std::span<const int> labels, std::span<const double> scores) {
  check_binary(labels, scores, "pr_auc");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0) throw std::invalid_argument("pr_auc: no positive samples");
  const auto order = descending(scores);
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, area = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / static_cast<double>(positives);
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return area;
}

MatchOutcome match_detections(const DetectionRecord& record, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw std::invalid_argument("match_detections: IoU threshold must lie in (0,1]");
  }
  MatchOutcome out;
  out.true_positive.assign(record.detections.size(), false);
  out.gt_hit.assign(record.gt.size(), false);
  std::vector<double> scores;
  for (const auto& d : record.detections) scores.push_back(d.score);
  for (std::size_t d : descending(scores)) {
    double best = -1.0;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < record.gt.size(); ++g) {
      if (out.gt_hit[g]) continue;
      const double v = iou(record.detections[d].box, record.gt[g]);
      if (v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best >= iou_threshold) {
      out.true_positive[d] = true;
      out.gt_hit[best_gt] = true;
    }
  }
  return out;
}

namespace {

/// Cumulative counts after admitting every detection scoring at least one
/// distinct threshold, in descending threshold order.
struct OperatingPoint {
  double threshold = 0.0;
  std::size_t tp = 0, fp = 0, images_with_fp = 0;
};

struct Sweep {
  std::size_t images = 0, gt = 0;
  std::vector<OperatingPoint> points;
};

Sweep sweep(std::span<const DetectionRecord> records, double iou_threshold, const char* fn) {
  struct Pooled {
    double score;
    bool tp;
    std::size_t image;
  };
  Sweep s;
  s.images = records.size();
  std::vector<Pooled> pooled;
  for (std::size_t i = 0; i < records.size(); ++i) {
    s.gt += records[i].gt.size();
    const MatchOutcome m = match_detections(records[i], iou_threshold);
    for (std::size_t d = 0; d < records[i].detections.size(); ++d) {
      pooled.push_back({records[i].detections[d].score, m.true_positive[d], i});
    }
  }
  if (s.gt == 0) throw std::invalid_argument(std::string(fn) + ": no ground-truth boxes in any image");
  std::stable_sort(pooled.begin(), pooled.end(), [](const Pooled& a, const Pooled& b) { return a.score > b.score; });
  std::vector<bool> has_fp(records.size(), false);
  OperatingPoint cur;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].score == pooled[i].score) {
      if (pooled[j].tp) {
        ++cur.tp;
      } else {
        ++cur.fp;
        if (!has_fp[pooled[j].image]) {
          has_fp[pooled[j].image] = true;
          ++cur.images_with_fp;
        }
      }
      ++j;
    }
    cur.threshold = pooled[i].score;
    s.points.push_back(cur);
    i = j;
  }
  return s;
}

/// Appends (x, y), replacing the previous point when x repeats.
void push_point(Curve& c, double x, double y) {
  if (!c.x.empty() && c.x.back() == x) {
    c.y.back() = y;
  } else {
    c.x.push_back(x);
    c.y.push_back(y);
  }
}

double trapezoid(const Curve& c) {
  double area = 0.0;
  for (std::size_t i = 1; i < c.x.size(); ++i) area += 0.5 * (c.x[i] - c.x[i - 1]) * (c.y[i] + c.y[i - 1]);
  return area;
}

}  // namespace

Curve froc(std::span<const DetectionRecord> records, double iou_threshold, double fppi_max) {
  if (!(fppi_max > 0.0)) throw std::invalid_argument("froc: fppi_max must be positive");
  const Sweep s = sweep(records, iou_threshold, "froc");
  Curve c{"fppi", "sensitivity", {}, {}, 0.0};
  push_point(c, 0.0, 0.0);
  const double n = static_cast<double>(s.images), g = static_cast<double>(s.gt);
  bool clipped = false;
  for (const auto& p : s.points) {
    const double x = static_cast<double>(p.fp) / n, y = static_cast<double>(p.tp) / g;
    if (x > fppi_max) {
      const double x0 = c.x.back(), y0 = c.y.back();
      push_point(c, fppi_max, y0 + (y - y0) * (fppi_max - x0) / (x - x0));
      clipped = true;
      break;
    }
    push_point(c, x, y);
  }
  if (!clipped && c.x.back() < fppi_max) push_point(c, fppi_max, c.y.back());
  c.auc = trapezoid(c) / fppi_max;
  return c;
}

double froc_sensitivity_at(std::span<const DetectionRecord> records, double fppi, double iou_threshold) {
  const Sweep s = sweep(records, iou_threshold, "froc_sensitivity_at");
  double best = 0.0;
  for (const auto& p : s.points) {
    if (static_cast<double>(p.fp) / static_cast<double>(s.images) <= fppi) {
      best = std::max(best, static_cast<double>(p.tp) / static_cast<double>(s.gt));
    }
  }
  return best;
}

Curve afroc(std::span<const DetectionRecord> records, double iou_threshold) {
  if (records.empty()) throw std::invalid_argument("afroc: no images");
  const Sweep s = sweep(records, iou_threshold, "afroc");
  Curve c{"fp_image_fraction", "sensitivity", {}, {}, 0.0};
  push_point(c, 0.0, 0.0);
  for (const auto& p : s.points) {
    push_point(c, static_cast<double>(p.images_with_fp) / static_cast<double>(s.images),
               static_cast<double>(p.tp) / static_cast<double>(s.gt));
  }
  if (c.x.back() < 1.0) push_point(c, 1.0, c.y.back());
  c.auc = trapezoid(c);
  return c;
}

double map_at_iou(std::span<const DetectionRecord> records, double iou_threshold) {
  const Sweep s = sweep(records, iou_threshold, "map_at_iou");
  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = static_cast<double>(i) / 100.0;
    double best = 0.0;
    for (const auto& p : s.points) {
      const double recall = static_cast<double>(p.tp) / static_cast<double>(s.gt);
      if (recall >= r) best = std::max(best, static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp));
    }
    ap += best;
  }
  return ap / 101.0;
}

void write_curve_csv(const Curve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write curve file " + path.string());
  out.precision(17);
  out << curve.x_label << ',' << curve.y_label << '\n';
  for (std::size_t i = 0; i < curve.x.size(); ++i) out << curve.x[i] << ',' << curve.y[i] << '\n';
  if (!out) throw std::runtime_error("failed writing curve file " + path.string());
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  if (values.empty()) return {NAN, NAN};
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

TopkReport topk_report(std::span<const CheckpointMetrics> table, std::size_t k, const std::string& selection_metric) {
  if (k == 0) throw std::invalid_argument("topk_report: k must be at least 1");
  if (table.size() < k) {
    throw std::invalid_argument("topk_report: need " + std::to_string(k) + " checkpoints, have " +
                                std::to_string(table.size()));
  }
  auto key = [&](std::size_t i) {
    const auto it = table[i].validation.find(selection_metric);
    if (it == table[i].validation.end()) {
      throw std::invalid_argument("topk_report: checkpoint " + table[i].checkpoint + " lacks validation metric " +
                                  selection_metric);
    }
    return std::isnan(it->second) ? -std::numeric_limits<double>::infinity() : it->second;
  };
  std::vector<std::size_t> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> keys;
  for (std::size_t i = 0; i < table.size(); ++i) keys.push_back(key(i));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] > keys[b]; });
  order.resize(k);

  TopkReport report;
  std::map<std::string, std::vector<double>> columns;
  for (std::size_t i : order) {
    report.selected.push_back(table[i].checkpoint);
    for (const auto& [name, value] : table[i].test) columns[name].push_back(value);
  }
  for (const auto& [name, values] : columns) {
    report.metrics[name] = values.size() == k ? summarize(values) : MetricSummary{NAN, NAN};
  }
  return report;
}

}  // namespace dhn
