#include "dhn/boxes.hpp"
#include "kernels.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace dhn {

using kernels::require;

BoxDeltas encode_deltas(const Box& anchor, const Box& gt) {
  require(anchor.width() > 0.0 && anchor.height() > 0.0, "encode_deltas: anchor must have positive extent");
  require(gt.width() > 0.0 && gt.height() > 0.0, "encode_deltas: ground-truth box must have positive extent");
  return {(gt.center_x() - anchor.center_x()) / anchor.width(), (gt.center_y() - anchor.center_y()) / anchor.height(),
          std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

Box decode_deltas(const Box& anchor, const BoxDeltas& d) {
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = d.dx * aw + anchor.center_x();
  const double cy = d.dy * ah + anchor.center_y();
  const double w = aw * std::exp(std::min(d.dw, kMaxLogScale));
  const double h = ah * std::exp(std::min(d.dh, kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& box, double width, double height) { return box.clipped(width, height); }

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  require(boxes.size() == scores.size(), "nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    keep.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(boxes[cur], boxes[other]) > iou_threshold) suppressed[other] = 1;
    }
  }
  return keep;
}

std::size_t AnchorSet::total() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.size();
  return n;
}

std::size_t AnchorSet::level_offset(std::size_t level) const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < level; ++k) n += levels[k].size();
  return n;
}

std::vector<Box> AnchorSet::flat() const {
  std::vector<Box> out;
  out.reserve(total());
  for (const auto& l : levels) out.insert(out.end(), l.begin(), l.end());
  return out;
}

AnchorSet generate_anchors(std::span<const LevelShape> level_shapes, std::span<const double> strides,
                           std::span<const std::vector<double>> sizes, std::span<const double> aspect_ratios) {
  require(!level_shapes.empty(), "generate_anchors: no levels");
  require(level_shapes.size() == strides.size() && level_shapes.size() == sizes.size(),
          "generate_anchors: need one stride and one size set per level");
  require(!aspect_ratios.empty(), "generate_anchors: no aspect ratios");
  const double image_h = static_cast<double>(level_shapes[0].height) * strides[0];
  const double image_w = static_cast<double>(level_shapes[0].width) * strides[0];
  AnchorSet set;
  for (std::size_t k = 0; k < level_shapes.size(); ++k) {
    const auto& shape = level_shapes[k];
    require(strides[k] > 0.0 && shape.height >= 1 && shape.width >= 1, "generate_anchors: invalid level geometry");
    require(static_cast<double>(shape.height) * strides[k] == image_h &&
                static_cast<double>(shape.width) * strides[k] == image_w,
            "generate_anchors: level " + std::to_string(k) + " shape " + std::to_string(shape.height) + "x" +
                std::to_string(shape.width) + " is inconsistent with stride " + std::to_string(strides[k]));
    require(!sizes[k].empty(), "generate_anchors: empty size set");
    std::vector<Box> anchors;
    anchors.reserve(static_cast<std::size_t>(shape.height * shape.width) * sizes[k].size() * aspect_ratios.size());
    for (Index row = 0; row < shape.height; ++row) {
      for (Index col = 0; col < shape.width; ++col) {
        const double cy = strides[k] * (static_cast<double>(row) + 0.5);
        const double cx = strides[k] * (static_cast<double>(col) + 0.5);
        for (double size : sizes[k]) {
          for (double ratio : aspect_ratios) {
            require(size > 0.0 && ratio > 0.0, "generate_anchors: sizes and ratios must be positive");
            const double w = size / std::sqrt(ratio);
            const double h = size * std::sqrt(ratio);
            anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
          }
        }
      }
    }
    set.levels.push_back(std::move(anchors));
    set.shapes.push_back(shape);
    set.strides.push_back(strides[k]);
    set.sizes.push_back(sizes[k]);
  }
  set.aspect_ratios.assign(aspect_ratios.begin(), aspect_ratios.end());
  return set;
}

MatchResult match_anchors(std::span<const Box> anchors, std::span<const Box> gt_boxes, double fg_iou, double bg_iou) {
  require(fg_iou >= bg_iou, "match_anchors: fg_iou must be >= bg_iou");
  MatchResult result;
  result.labels.assign(anchors.size(), MatchLabel::negative);
  result.matched_gt.assign(anchors.size(), -1);
  if (gt_boxes.empty()) return result;

  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<int> best_gt(anchors.size(), 0);
  std::vector<double> gt_best_iou(gt_boxes.size(), 0.0);
  std::vector<std::size_t> gt_best_anchor(gt_boxes.size(), anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors[a], gt_boxes[g]);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = a;
      }
    }
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (best_iou[a] >= fg_iou) {
      result.labels[a] = MatchLabel::positive;
    } else if (best_iou[a] >= bg_iou) {
      result.labels[a] = MatchLabel::ignore;
    }
  }
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (gt_best_anchor[g] < anchors.size()) result.labels[gt_best_anchor[g]] = MatchLabel::positive;
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (result.labels[a] == MatchLabel::positive) result.matched_gt[a] = best_gt[a];
  }
  return result;
}

int assign_fpn_level(const Box& box, int k_min, int k_max) {
  const double area = box.area();
  if (!(area > 0.0)) return k_min;
  const double k = std::floor(static_cast<double>(k_max) + std::log2(std::sqrt(area) / 224.0));
  return static_cast<int>(std::clamp(k, static_cast<double>(k_min), static_cast<double>(k_max)));
}

Box box_row(const Tensor& boxes, Index row) {
  const double* v = boxes.values().data() + 4 * row;
  return {v[0], v[1], v[2], v[3]};
}

Tensor decode_deltas(std::span<const Box> anchors, const Tensor& deltas) {
  require(deltas.rank() == 2 && deltas.dim(1) == 4 && deltas.dim(0) == static_cast<Index>(anchors.size()),
          "decode_deltas: deltas must be [K,4] with one anchor per row, got " + shape_str(deltas.shape()));
  const Index k = deltas.dim(0);
  Buffer out(4 * k);
  const Buffer& d = deltas.values();
  for (Index i = 0; i < k; ++i) {
    const Box b = decode_deltas(anchors[static_cast<std::size_t>(i)], {d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]});
    out.segment(4 * i, 4) << b.x1, b.y1, b.x2, b.y2;
  }
  std::vector<Box> anchor_copy(anchors.begin(), anchors.end());
  return record_op("decode_deltas", {k, 4}, std::move(out), {deltas},
                   {[anchor_copy = std::move(anchor_copy), deltas, k](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     const Buffer& d = deltas.values();
                     for (Index i = 0; i < k; ++i) {
                       const Box& a = anchor_copy[static_cast<std::size_t>(i)];
                       const double gx1 = g[4 * i], gy1 = g[4 * i + 1], gx2 = g[4 * i + 2], gy2 = g[4 * i + 3];
                       const double w = a.width() * std::exp(std::min(d[4 * i + 2], kMaxLogScale));
                       const double h = a.height() * std::exp(std::min(d[4 * i + 3], kMaxLogScale));
                       (*in[0])[4 * i] += a.width() * (gx1 + gx2);
                       (*in[0])[4 * i + 1] += a.height() * (gy1 + gy2);
                       if (d[4 * i + 2] < kMaxLogScale) (*in[0])[4 * i + 2] += 0.5 * w * (gx2 - gx1);
                       if (d[4 * i + 3] < kMaxLogScale) (*in[0])[4 * i + 3] += 0.5 * h * (gy2 - gy1);
                     }
                   }});
}

namespace {

/// d(1 - gIoU)/d(x1,y1,x2,y2) of `p` against fixed `t`.
std::array<double, 4> giou_loss_gradient(const Box& p, const Box& t) {
  const double w = p.width(), h = p.height();
  const double iw = std::min(p.x2, t.x2) - std::max(p.x1, t.x1);
  const double ih = std::min(p.y2, t.y2) - std::max(p.y1, t.y1);
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = p.area() + t.area() - inter;
  const double cw = std::max(p.x2, t.x2) - std::min(p.x1, t.x1);
  const double ch = std::max(p.y2, t.y2) - std::min(p.y1, t.y1);
  const double hull = cw * ch;

  const std::array<double, 4> d_area = {-h, -w, h, w};
  std::array<double, 4> d_inter = {0.0, 0.0, 0.0, 0.0};
  if (overlap) {
    d_inter[0] = p.x1 > t.x1 ? -ih : 0.0;
    d_inter[1] = p.y1 > t.y1 ? -iw : 0.0;
    d_inter[2] = p.x2 < t.x2 ? ih : 0.0;
    d_inter[3] = p.y2 < t.y2 ? iw : 0.0;
  }
  const std::array<double, 4> d_hull = {p.x1 < t.x1 ? -ch : 0.0, p.y1 < t.y1 ? -cw : 0.0, p.x2 > t.x2 ? ch : 0.0,
                                        p.y2 > t.y2 ? cw : 0.0};
  std::array<double, 4> out{};
  for (int c = 0; c < 4; ++c) {
    const double d_union = d_area[c] - d_inter[c];
    out[c] = -d_inter[c] / uni + inter * d_union / (uni * uni) - d_union / hull + uni * d_hull[c] / (hull * hull);
  }
  return out;
}

}  // namespace

Tensor giou_loss(const Tensor& pred, std::span<const Box> targets) {
  require(pred.rank() == 2 && pred.dim(1) == 4 && pred.dim(0) == static_cast<Index>(targets.size()),
          "giou_loss: predictions must be [K,4] with one target per row, got " + shape_str(pred.shape()));
  const Index k = pred.dim(0);
  Buffer out(k);
  for (Index i = 0; i < k; ++i) {
    const Box p = box_row(pred, i);
    require(p.is_canonical(), "giou_loss: predicted box is not canonical");
    out[i] = giou_loss(p, targets[static_cast<std::size_t>(i)]);
  }
  std::vector<Box> target_copy(targets.begin(), targets.end());
  return record_op("giou_loss", {k}, std::move(out), {pred},
                   {[target_copy = std::move(target_copy), pred, k](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     for (Index i = 0; i < k; ++i) {
                       const auto d = giou_loss_gradient(box_row(pred, i), target_copy[static_cast<std::size_t>(i)]);
                       for (int c = 0; c < 4; ++c) (*in[0])[4 * i + c] += g[i] * d[static_cast<std::size_t>(c)];
                     }
                   }});
}

}  // namespace dhn
