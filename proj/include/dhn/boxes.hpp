#pragma once

#include "dhn/box.hpp"
#include "dhn/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace dhn {

template <typename Scalar>
Scalar intersection_area(const BasicBox<Scalar>& a, const BasicBox<Scalar>& b) {
  const Scalar iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const Scalar ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (iw > Scalar(0) && ih > Scalar(0)) ? iw * ih : Scalar(0);
}

template <typename Scalar>
BasicBox<Scalar> enclosing_box(const BasicBox<Scalar>& a, const BasicBox<Scalar>& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
}

template <typename Scalar>
Scalar iou(const BasicBox<Scalar>& a, const BasicBox<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  return uni > Scalar(0) ? inter / uni : Scalar(0);
}

/// IoU - (C - U) / C with C the area of the smallest enclosing box.
template <typename Scalar>
Scalar giou(const BasicBox<Scalar>& a, const BasicBox<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  const Scalar hull = enclosing_box(a, b).area();
  return inter / uni - (hull - uni) / hull;
}

template <typename Scalar>
Scalar giou_loss(const BasicBox<Scalar>& pred, const BasicBox<Scalar>& target) {
  return Scalar(1) - giou(pred, target);
}

/// Faster R-CNN box parameterisation relative to an anchor.
struct BoxDeltas {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

/// Upper bound applied to dw/dh before exponentiation when decoding.
inline const double kMaxLogScale = std::log(1000.0 / 16.0);

BoxDeltas encode_deltas(const Box& anchor, const Box& gt);
/// Exact inverse of encode_deltas (apart from the kMaxLogScale clamp); no clipping.
Box decode_deltas(const Box& anchor, const BoxDeltas& deltas);
Box clip_box(const Box& box, double width, double height);

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first. A box is suppressed when its
/// IoU with a kept box exceeds `iou_threshold`.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

struct LevelShape {
  Index height = 0, width = 0;
};

/// Anchors of every pyramid level, ordered (level, row, col, size, ratio).
struct AnchorSet {
  std::vector<std::vector<Box>> levels;
  std::vector<LevelShape> shapes;
  std::vector<double> strides;
  std::vector<std::vector<double>> sizes;
  std::vector<double> aspect_ratios;

  std::size_t per_cell(std::size_t level) const { return sizes[level].size() * aspect_ratios.size(); }
  std::size_t total() const;
  std::size_t level_offset(std::size_t level) const;
  std::vector<Box> flat() const;
};

/// `aspect_ratios` are height / width; every anchor of size s has area s^2.
AnchorSet generate_anchors(std::span<const LevelShape> level_shapes, std::span<const double> strides,
                           std::span<const std::vector<double>> sizes, std::span<const double> aspect_ratios);

enum class MatchLabel : std::int8_t { ignore = -1, negative = 0, positive = 1 };

struct MatchResult {
  std::vector<MatchLabel> labels;
  std::vector<int> matched_gt;  // -1 unless positive
};

/// IoU-threshold matching with the forced best-anchor rule: for each ground
/// truth, the first anchor attaining its highest non-zero IoU becomes positive.
MatchResult match_anchors(std::span<const Box> anchors, std::span<const Box> gt_boxes, double fg_iou, double bg_iou);

/// FPN level heuristic floor(k_max + log2(sqrt(area) / 224)) clamped to
/// [k_min, k_max].
int assign_fpn_level(const Box& box, int k_min, int k_max);

// Differentiable forms used by the detection losses.

/// anchors (constant) and deltas [K,4] -> decoded boxes [K,4] as (x1,y1,x2,y2).
Tensor decode_deltas(std::span<const Box> anchors, const Tensor& deltas);
/// 1 - gIoU per row of pred [K,4] against constant targets -> [K].
Tensor giou_loss(const Tensor& pred, std::span<const Box> targets);

Box box_row(const Tensor& boxes, Index row);

}  // namespace dhn
