#include "dhn/model.hpp"

#include "dhn/ops.hpp"
#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace dhn {

using kernels::require;

void DhnConfig::validate() const {
  require(image_size >= 32 && image_size % 16 == 0,
          "image_size must be a positive multiple of 16 (at least 32), got " + std::to_string(image_size));
  require(stem_width > 0 && fpn_width > 0 && global_width > 0 && roi_hidden > 0 && roi_pool > 0,
          "layer widths must be positive");
  for (Index w : stage_widths) require(w > 0, "stage widths must be positive");
  require(deformable_stages >= 0 && deformable_stages <= 3, "deformable_stages must lie in [0,3]");
  require(anchor_sizes.size() == kStrides.size(), "anchor_sizes needs one list per pyramid level (3)");
  for (const auto& s : anchor_sizes) {
    require(!s.empty(), "every pyramid level needs at least one anchor size");
    for (double v : s) require(v > 0.0, "anchor sizes must be positive");
  }
  require(!anchor_ratios.empty(), "anchor_ratios must not be empty");
  for (double r : anchor_ratios) require(r > 0.0, "anchor ratios must be positive");
  require(rpn_bg_iou <= rpn_fg_iou, "rpn_bg_iou must not exceed rpn_fg_iou");
  require(rpn_batch > 0 && roi_batch > 0, "sampling batch sizes must be positive");
  require(rpn_positive_fraction > 0.0 && rpn_positive_fraction <= 1.0 && roi_positive_fraction > 0.0 &&
              roi_positive_fraction <= 1.0,
          "positive fractions must lie in (0,1]");
  require(rpn_pre_nms_train >= 0 && rpn_post_nms_train >= 0 && rpn_pre_nms_test >= 0 && rpn_post_nms_test >= 0 &&
              detections_per_image >= 0,
          "proposal and detection caps must be non-negative");
}

bool is_global_head_param(std::string_view name) { return name.starts_with(kGlobalHeadPrefix); }
bool is_local_head_param(std::string_view name) {
  return name.starts_with(kRpnPrefix) || name.starts_with(kRoiPrefix);
}

namespace {

const Tensor& P(const DhnModel& m, const std::string& name) { return m.params.at(name); }

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Buffer v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = d(rng);
  return Tensor(std::move(shape), std::move(v));
}

void add_conv(ParameterSet& ps, std::mt19937_64& rng, const std::string& name, Index out, Index in, Index k,
              double gain = 1.0) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(in * k * k));
  ps.add(name + ".weight", normal_tensor({out, in, k, k}, stddev, rng));
  ps.add(name + ".bias", Tensor({out}, 0.0));
}

void add_zero_conv(ParameterSet& ps, const std::string& name, Index out, Index in, Index k) {
  ps.add(name + ".weight", Tensor({out, in, k, k}, 0.0));
  ps.add(name + ".bias", Tensor({out}, 0.0));
}

void add_linear(ParameterSet& ps, std::mt19937_64& rng, const std::string& name, Index out, Index in, double stddev) {
  ps.add(name + ".weight", normal_tensor({out, in}, stddev, rng));
  ps.add(name + ".bias", Tensor({out}, 0.0));
}

std::string block_name(std::size_t stage, int block) {
  return "backbone.stage" + std::to_string(stage + 1) + ".block" + std::to_string(block);
}

bool stage_is_deformable(const DhnConfig& c, std::size_t stage) {
  return static_cast<int>(stage) >= 3 - c.deformable_stages;
}

Index anchors_per_cell(const DhnConfig& c, std::size_t level) {
  return static_cast<Index>(c.anchor_sizes[level].size() * c.anchor_ratios.size());
}

}  // namespace

DhnModel make_model(const DhnConfig& config, std::uint64_t seed) {
  config.validate();
  DhnModel m;
  m.config = config;
  std::mt19937_64 rng(seed);
  ParameterSet& ps = m.params;
  const auto& c = config;

  add_conv(ps, rng, "backbone.stem", c.stem_width, 1, 3);
  Index in = c.stem_width;
  for (std::size_t s = 0; s < 3; ++s) {
    const Index out = c.stage_widths[s];
    for (int b = 0; b < 2; ++b) {
      const std::string name = block_name(s, b);
      const Index block_in = b == 0 ? in : out;
      add_conv(ps, rng, name + ".conv1", out, block_in, 3);
      // Residual branches start small so the un-normalised stack keeps its scale.
      add_conv(ps, rng, name + ".conv2", out, out, 3, 0.25);
      if (stage_is_deformable(c, s)) {
        add_zero_conv(ps, name + ".conv1.offset", 18, block_in, 3);
        add_zero_conv(ps, name + ".conv2.offset", 18, out, 3);
      }
      if (b == 0 && (s > 0 || block_in != out)) add_conv(ps, rng, name + ".down", out, block_in, 1);
    }
    in = out;
  }

  for (std::size_t k = 0; k < 3; ++k) {
    add_conv(ps, rng, "fpn.lateral" + std::to_string(k), c.fpn_width, c.stage_widths[k], 1);
    add_conv(ps, rng, "fpn.output" + std::to_string(k), c.fpn_width, c.fpn_width, 3);
  }

  add_conv(ps, rng, "global.conv1", c.global_width, c.fpn_width, 3);
  add_conv(ps, rng, "global.conv2", c.global_width, c.global_width, 3);
  add_linear(ps, rng, "global.fc", 2, c.global_width, 1.0 / std::sqrt(static_cast<double>(c.global_width)));

  const Index a = anchors_per_cell(c, 0);
  for (std::size_t k = 1; k < 3; ++k) {
    require(anchors_per_cell(c, k) == a, "every pyramid level needs the same number of anchors per cell");
  }
  add_conv(ps, rng, "rpn.conv", c.fpn_width, c.fpn_width, 3);
  ps.add("rpn.objectness.weight", normal_tensor({a, c.fpn_width, 1, 1}, 0.01, rng));
  ps.add("rpn.objectness.bias", Tensor({a}, 0.0));
  ps.add("rpn.deltas.weight", normal_tensor({4 * a, c.fpn_width, 1, 1}, 0.01, rng));
  ps.add("rpn.deltas.bias", Tensor({4 * a}, 0.0));

  const Index flat = c.fpn_width * c.roi_pool * c.roi_pool;
  add_linear(ps, rng, "roi.fc1", c.roi_hidden, flat, std::sqrt(2.0 / static_cast<double>(flat)));
  add_linear(ps, rng, "roi.fc2", c.roi_hidden, c.roi_hidden, std::sqrt(2.0 / static_cast<double>(c.roi_hidden)));
  add_linear(ps, rng, "roi.cls", 2, c.roi_hidden, 0.01);
  add_linear(ps, rng, "roi.deltas", 4, c.roi_hidden, 0.001);

  std::vector<LevelShape> shapes;
  for (double stride : DhnConfig::kStrides) {
    const Index e = c.image_size / static_cast<Index>(stride);
    shapes.push_back({e, e});
  }
  const std::vector<double> strides(DhnConfig::kStrides.begin(), DhnConfig::kStrides.end());
  m.anchors = generate_anchors(shapes, strides, c.anchor_sizes, c.anchor_ratios);
  return m;
}

Tensor image_batch(std::span<const Tensor> images) {
  require(!images.empty(), "image_batch: no images");
  const Shape& s = images.front().shape();
  require(s.size() == 3 && s[0] == 1, "image_batch: images must be [1,H,W], got " + shape_str(s));
  const Index plane = s[1] * s[2];
  Buffer v(static_cast<Index>(images.size()) * plane);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].shape() == s, "image_batch: mixed image shapes " + shape_str(s) + " and " +
                                        shape_str(images[i].shape()));
    v.segment(static_cast<Index>(i) * plane, plane) = (images[i].values() - 128.0) / 64.0;
  }
  return Tensor({static_cast<Index>(images.size()), 1, s[1], s[2]}, std::move(v));
}

namespace {

Tensor conv(const DhnModel& m, const std::string& name, const Tensor& x, Index stride, Index padding) {
  return conv2d(x, P(m, name + ".weight"), P(m, name + ".bias"), stride, padding);
}

Tensor conv3x3(const DhnModel& m, const std::string& name, const Tensor& x, Index stride, bool deformable) {
  if (!deformable) return conv(m, name, x, stride, 1);
  const Tensor offsets = conv(m, name + ".offset", x, stride, 1);
  return deformable_conv2d(x, P(m, name + ".weight"), offsets, P(m, name + ".bias"), stride, 1);
}

}  // namespace

std::vector<Tensor> backbone_forward(const DhnModel& m, const Tensor& x) {
  require(x.rank() == 4 && x.dim(1) == 1, "backbone_forward: input must be [N,1,H,W], got " + shape_str(x.shape()));
  require(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
          "backbone_forward: spatial extent " + shape_str(x.shape()) + " is not divisible by 16");
  Tensor h = maxpool2d(relu(conv(m, "backbone.stem", x, 2, 1)), 2, 2);
  std::vector<Tensor> stages;
  for (std::size_t s = 0; s < 3; ++s) {
    const bool deformable = stage_is_deformable(m.config, s);
    for (int b = 0; b < 2; ++b) {
      const std::string name = block_name(s, b);
      const Index stride = (b == 0 && s > 0) ? 2 : 1;
      Tensor y = relu(conv3x3(m, name + ".conv1", h, stride, deformable));
      y = conv3x3(m, name + ".conv2", y, 1, deformable);
      const Tensor shortcut = m.params.contains(name + ".down.weight") ? conv(m, name + ".down", h, stride, 0) : h;
      h = relu(add(y, shortcut));
    }
    stages.push_back(h);
  }
  return stages;
}

std::vector<Tensor> fpn_forward(const DhnModel& m, std::span<const Tensor> stages) {
  require(!stages.empty() && stages.size() <= 3, "fpn_forward: expected 1 to 3 stage outputs");
  for (std::size_t k = 1; k < stages.size(); ++k) {
    require(stages[k].dim(2) * 2 == stages[k - 1].dim(2) && stages[k].dim(3) * 2 == stages[k - 1].dim(3),
            "fpn_forward: each stage must halve the previous resolution");
  }
  const std::size_t first = 3 - stages.size();
  std::vector<Tensor> pyramid(stages.size());
  Tensor merged;
  for (std::size_t i = stages.size(); i-- > 0;) {
    const std::string k = std::to_string(first + i);
    const Tensor lateral = conv(m, "fpn.lateral" + k, stages[i], 1, 0);
    merged = merged.defined() ? add(lateral, upsample_nearest2x(merged)) : lateral;
    pyramid[i] = conv(m, "fpn.output" + k, merged, 1, 1);
  }
  return pyramid;
}

Tensor global_head_forward(const DhnModel& m, std::span<const Tensor> pyramid) {
  require(!pyramid.empty(), "global_head_forward: empty pyramid");
  const Tensor& top = pyramid.back();
  Tensor h = relu(conv(m, "global.conv1", top, 1, 1));
  h = relu(conv(m, "global.conv2", h, 1, 1));
  const Tensor logits = linear(global_maxpool(h), P(m, "global.fc.weight"), P(m, "global.fc.bias"));
  const Tensor probs = softmax(logits);
  const Index n = top.dim(0);
  std::vector<Index> positive(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) positive[static_cast<std::size_t>(i)] = 2 * i + 1;
  return gather(probs, std::move(positive), {n});
}

RpnOutput rpn_forward(const DhnModel& m, std::span<const Tensor> pyramid) {
  const AnchorSet& anchors = m.anchors;
  require(pyramid.size() == anchors.levels.size(), "rpn_forward: pyramid has " + std::to_string(pyramid.size()) +
                                                       " levels but anchors cover " +
                                                       std::to_string(anchors.levels.size()));
  const Index n = pyramid.front().dim(0);
  const Index a = static_cast<Index>(anchors.per_cell(0));
  std::vector<Tensor> obj_parts, delta_parts;
  std::vector<Index> obj_base, delta_base;
  Index obj_total = 0, delta_total = 0;
  for (std::size_t l = 0; l < pyramid.size(); ++l) {
    const LevelShape& s = anchors.shapes[l];
    require(pyramid[l].dim(2) == s.height && pyramid[l].dim(3) == s.width,
            "rpn_forward: level " + std::to_string(l) + " is " + shape_str(pyramid[l].shape()) +
                " but anchors expect " + std::to_string(s.height) + "x" + std::to_string(s.width));
    const Tensor h = relu(conv(m, "rpn.conv", pyramid[l], 1, 1));
    const Tensor obj = conv(m, "rpn.objectness", h, 1, 0);
    const Tensor del = conv(m, "rpn.deltas", h, 1, 0);
    obj_base.push_back(obj_total);
    delta_base.push_back(delta_total);
    obj_total += obj.numel();
    delta_total += del.numel();
    obj_parts.push_back(reshape(obj, {obj.numel()}));
    delta_parts.push_back(reshape(del, {del.numel()}));
  }
  const Tensor obj_all = concat(obj_parts);
  const Tensor delta_all = concat(delta_parts);

  const Index per_image = static_cast<Index>(anchors.total());
  std::vector<Index> obj_index, delta_index;
  obj_index.reserve(static_cast<std::size_t>(n * per_image));
  delta_index.reserve(static_cast<std::size_t>(4 * n * per_image));
  for (Index img = 0; img < n; ++img) {
    for (std::size_t l = 0; l < pyramid.size(); ++l) {
      const Index h = anchors.shapes[l].height, w = anchors.shapes[l].width;
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          for (Index k = 0; k < a; ++k) {
            obj_index.push_back(obj_base[l] + ((img * a + k) * h + y) * w + x);
            for (Index c = 0; c < 4; ++c) {
              delta_index.push_back(delta_base[l] + ((img * 4 * a + 4 * k + c) * h + y) * w + x);
            }
          }
        }
      }
    }
  }
  RpnOutput out;
  out.images = n;
  out.anchors_per_image = per_image;
  out.objectness = gather(obj_all, std::move(obj_index), {n * per_image});
  out.deltas = gather(delta_all, std::move(delta_index), {n * per_image, 4});
  return out;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

BoxDeltas delta_row(const Buffer& deltas, Index row) {
  return {deltas[4 * row], deltas[4 * row + 1], deltas[4 * row + 2], deltas[4 * row + 3]};
}

}  // namespace

std::vector<ScoredBox> rpn_proposals(const DhnModel& m, const RpnOutput& rpn, Index n, int pre_nms_per_level,
                                     int post_nms, double image_height, double image_width) {
  const AnchorSet& anchors = m.anchors;
  const Buffer& obj = rpn.objectness.values();
  const Buffer& del = rpn.deltas.values();
  const Index base = n * rpn.anchors_per_image;
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t l = 0; l < anchors.levels.size(); ++l) {
    const Index offset = static_cast<Index>(anchors.level_offset(l));
    const Index count = static_cast<Index>(anchors.levels[l].size());
    std::vector<Index> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    const auto keep = std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(pre_nms_per_level, 0)));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](Index x, Index y) {
                        const double sx = obj[base + offset + x], sy = obj[base + offset + y];
                        return sx > sy || (sx == sy && x < y);
                      });
    for (std::size_t i = 0; i < keep; ++i) {
      const Index a = order[i];
      const Box b = clip_box(decode_deltas(anchors.levels[l][static_cast<std::size_t>(a)],
                                           delta_row(del, base + offset + a)),
                             image_width, image_height);
      if (b.width() < 1.0 || b.height() < 1.0) continue;
      boxes.push_back(b);
      scores.push_back(sigmoid(obj[base + offset + a]));
    }
  }
  std::vector<ScoredBox> out;
  for (std::size_t i : nms(boxes, scores, m.config.rpn_nms)) {
    if (static_cast<int>(out.size()) >= post_nms) break;
    out.push_back({boxes[i], scores[i]});
  }
  return out;
}

RoiOutput roi_head_forward(const DhnModel& m, std::span<const Tensor> pyramid,
                           std::span<const std::pair<Index, Box>> rois) {
  const auto& c = m.config;
  require(!rois.empty(), "roi_head_forward: no regions");
  std::vector<RoiRequest> requests;
  for (const auto& [n, box] : rois) {
    const int k = assign_fpn_level(box, 2, 2 + static_cast<int>(pyramid.size()) - 1);
    requests.push_back({n, static_cast<Index>(k - 2), box});
  }
  std::vector<double> scales;
  for (std::size_t l = 0; l < pyramid.size(); ++l) scales.push_back(1.0 / DhnConfig::kStrides[l]);
  const Tensor crops = multiscale_roi_align(pyramid, scales, requests, c.roi_pool);
  const Index r = static_cast<Index>(rois.size());
  Tensor h = reshape(crops, {r, crops.numel() / r});
  h = relu(linear(h, P(m, "roi.fc1.weight"), P(m, "roi.fc1.bias")));
  h = relu(linear(h, P(m, "roi.fc2.weight"), P(m, "roi.fc2.bias")));
  return {linear(h, P(m, "roi.cls.weight"), P(m, "roi.cls.bias")),
          linear(h, P(m, "roi.deltas.weight"), P(m, "roi.deltas.bias"))};
}

std::vector<ScoredBox> roi_detections(const DhnModel& m, const RoiOutput& out,
                                      std::span<const std::pair<Index, Box>> rois, Index n, double image_height,
                                      double image_width) {
  const auto& c = m.config;
  const Buffer& logits = out.class_logits.values();
  const Buffer& del = out.deltas.values();
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    if (rois[i].first != n) continue;
    const Index r = static_cast<Index>(i);
    const double fg = sigmoid(logits[2 * r + 1] - logits[2 * r]);
    if (fg < c.roi_score_threshold) continue;
    const Box b = clip_box(decode_deltas(rois[i].second, delta_row(del, r)), image_width, image_height);
    if (!b.is_canonical()) continue;
    boxes.push_back(b);
    scores.push_back(fg);
  }
  std::vector<ScoredBox> dets;
  for (std::size_t i : nms(boxes, scores, c.roi_nms)) {
    if (static_cast<int>(dets.size()) >= c.detections_per_image) break;
    dets.push_back({boxes[i], scores[i]});
  }
  return dets;
}

std::vector<Inference> infer(const DhnModel& m, std::span<const Tensor> images) {
  require(active_tape() == nullptr, "infer: must not run while a tape is recording");
  std::vector<Inference> results;
  for (const Tensor& image : images) {
    const Tensor x = image_batch(std::span(&image, 1));
    const auto stages = backbone_forward(m, x);
    const auto pyramid = fpn_forward(m, stages);
    Inference res;
    res.global_probability = global_head_forward(m, pyramid)[0];
    const double h = static_cast<double>(x.dim(2)), w = static_cast<double>(x.dim(3));
    const RpnOutput rpn = rpn_forward(m, pyramid);
    const auto proposals = rpn_proposals(m, rpn, 0, m.config.rpn_pre_nms_test, m.config.rpn_post_nms_test, h, w);
    if (!proposals.empty()) {
      std::vector<std::pair<Index, Box>> rois;
      for (const auto& p : proposals) rois.emplace_back(0, p.box);
      res.detections = roi_detections(m, roi_head_forward(m, pyramid, rois), rois, 0, h, w);
    }
    results.push_back(std::move(res));
  }
  return results;
}

namespace {

/// Up to floor(batch * fraction) positives, negatives filling the remainder.
void sample_indices(std::vector<Index>& positives, std::vector<Index>& negatives, int batch, double fraction,
                    std::mt19937_64& rng) {
  const auto max_pos = static_cast<std::size_t>(std::floor(batch * fraction));
  std::shuffle(positives.begin(), positives.end(), rng);
  if (positives.size() > max_pos) positives.resize(max_pos);
  std::shuffle(negatives.begin(), negatives.end(), rng);
  const auto max_neg = static_cast<std::size_t>(batch) - positives.size();
  if (negatives.size() > max_neg) negatives.resize(max_neg);
}

Tensor slice_batch(const Tensor& t, Index begin, Index end) { return slice(t, begin, end); }

}  // namespace

StepLosses forward_losses(const DhnModel& m, std::span<const View> views, const LossWeights& weights,
                          std::mt19937_64& rng) {
  weights.validate();
  const auto& c = m.config;
  std::vector<const View*> global_views, local_views;
  for (const View& v : views) (v.route == Route::global ? global_views : local_views).push_back(&v);
  require(!views.empty(), "forward_losses: no views");

  std::vector<Tensor> images;
  for (const View* v : global_views) images.push_back(v->image);
  for (const View* v : local_views) images.push_back(v->image);
  const Tensor x = image_batch(images);
  const auto stages = backbone_forward(m, x);
  const auto pyramid = fpn_forward(m, stages);
  const Index ng = static_cast<Index>(global_views.size()), nl = static_cast<Index>(local_views.size());

  StepLosses out;
  if (ng > 0) {
    std::vector<Tensor> g_pyr;
    for (const Tensor& level : pyramid) g_pyr.push_back(slice_batch(level, 0, ng));
    std::vector<int> labels;
    for (const View* v : global_views) labels.push_back(v->global_label);
    out.L_g = global_loss(global_head_forward(m, g_pyr), labels, weights.alpha1, weights.alpha2);
  } else {
    out.L_g = Tensor::scalar(0.0);
  }

  SampledObjectness obj;
  SampledRegression rpn_reg, roi_reg;
  SampledClassification cls;
  if (nl > 0) {
    std::vector<Tensor> l_pyr;
    for (const Tensor& level : pyramid) l_pyr.push_back(slice_batch(level, ng, ng + nl));
    const RpnOutput rpn = rpn_forward(m, l_pyr);
    const std::vector<Box> anchors = m.anchors.flat();
    const Index per_image = rpn.anchors_per_image;
    const double h = static_cast<double>(x.dim(2)), w = static_cast<double>(x.dim(3));

    std::vector<Index> obj_rows, reg_rows;
    std::vector<std::pair<Index, Box>> rois;
    std::vector<int> roi_labels;
    std::vector<Box> roi_targets;
    for (Index i = 0; i < nl; ++i) {
      const std::vector<Box>& gt = local_views[static_cast<std::size_t>(i)]->boxes;
      const MatchResult match = match_anchors(anchors, gt, c.rpn_fg_iou, c.rpn_bg_iou);
      std::vector<Index> pos, negs;
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (match.labels[a] == MatchLabel::positive) pos.push_back(static_cast<Index>(a));
        if (match.labels[a] == MatchLabel::negative) negs.push_back(static_cast<Index>(a));
      }
      sample_indices(pos, negs, c.rpn_batch, c.rpn_positive_fraction, rng);
      for (Index a : pos) {
        obj_rows.push_back(i * per_image + a);
        obj.targets.push_back(1.0);
        reg_rows.push_back(i * per_image + a);
        rpn_reg.references.push_back(anchors[static_cast<std::size_t>(a)]);
        rpn_reg.targets.push_back(gt[static_cast<std::size_t>(match.matched_gt[static_cast<std::size_t>(a)])]);
      }
      for (Index a : negs) {
        obj_rows.push_back(i * per_image + a);
        obj.targets.push_back(0.0);
      }

      // Proposals for the ROI head come from the current RPN, plus the ground truth.
      std::vector<Box> props;
      for (const auto& p : rpn_proposals(m, rpn, i, c.rpn_pre_nms_train, c.rpn_post_nms_train, h, w)) {
        props.push_back(p.box);
      }
      props.insert(props.end(), gt.begin(), gt.end());
      std::vector<Index> roi_pos, roi_neg;
      std::vector<int> roi_match(props.size(), -1);
      for (std::size_t p = 0; p < props.size(); ++p) {
        double best = 0.0;
        for (std::size_t g = 0; g < gt.size(); ++g) {
          const double v = iou(props[p], gt[g]);
          if (v > best) {
            best = v;
            roi_match[p] = static_cast<int>(g);
          }
        }
        (best >= c.roi_fg_iou ? roi_pos : roi_neg).push_back(static_cast<Index>(p));
      }
      sample_indices(roi_pos, roi_neg, c.roi_batch, c.roi_positive_fraction, rng);
      for (Index p : roi_pos) {
        rois.emplace_back(i, props[static_cast<std::size_t>(p)]);
        roi_labels.push_back(1);
        roi_targets.push_back(gt[static_cast<std::size_t>(roi_match[static_cast<std::size_t>(p)])]);
      }
      for (Index p : roi_neg) {
        rois.emplace_back(i, props[static_cast<std::size_t>(p)]);
        roi_labels.push_back(0);
      }
    }

    if (!obj_rows.empty()) {
      const Index k = static_cast<Index>(obj_rows.size());
      obj.logits = gather(rpn.objectness, std::move(obj_rows), {k});
    }
    if (!reg_rows.empty()) {
      std::vector<Index> idx;
      for (Index r : reg_rows) {
        for (Index q = 0; q < 4; ++q) idx.push_back(4 * r + q);
      }
      rpn_reg.deltas = gather(rpn.deltas, std::move(idx), {static_cast<Index>(reg_rows.size()), 4});
    }
    if (!rois.empty()) {
      const RoiOutput head = roi_head_forward(m, l_pyr, rois);
      cls.logits = head.class_logits;
      cls.labels = roi_labels;
      std::vector<Index> idx;
      for (std::size_t r = 0; r < rois.size(); ++r) {
        if (roi_labels[r] != 1) continue;
        roi_reg.references.push_back(rois[r].second);
        for (Index q = 0; q < 4; ++q) idx.push_back(4 * static_cast<Index>(r) + q);
      }
      roi_reg.targets = roi_targets;
      if (!roi_reg.references.empty()) {
        roi_reg.deltas = gather(head.deltas, std::move(idx), {static_cast<Index>(roi_reg.references.size()), 4});
      }
    }
  }
  out.local = local_loss(obj, rpn_reg, cls, roi_reg);
  out.L_l = out.local.total;
  out.L = multitask_loss(out.L_g, out.L_l, weights.lambda1, weights.lambda2);

  LossBreakdown& b = out.breakdown;
  b.l_obj = out.local.l_obj.item();
  b.l_reg = out.local.l_reg.item();
  b.l_cls = out.local.l_cls.item();
  b.l_bbox = out.local.l_bbox.item();
  b.L_l = out.L_l.item();
  b.L_g = out.L_g.item();
  b.L = out.L.item();
  return out;
}

LossBreakdown train_step(DhnModel& model, SgdState& state, std::span<const Scan> scans, const AugStrategy& phi_g,
                         const AugStrategy& phi_l, const LossWeights& weights, const SgdConfig& sgd,
                         std::mt19937_64& rng) {
  require(!scans.empty(), "train_step: no scans");
  std::vector<View> views;
  for (const Scan& s : scans) {
    require(s.global_label == 0 || s.global_label == 1,
            "train_step: scan " + s.scan_id + " has no valid global label (" + std::to_string(s.global_label) + ")");
    require((s.global_label == 1) == !s.gt_boxes.empty(),
            "train_step: scan " + s.scan_id + " label disagrees with its boxes");
    auto pair = dha_pair(s, phi_g, phi_l, rng);
    views.push_back(std::move(pair[0]));
    views.push_back(std::move(pair[1]));
  }
  model.params.zero_grad();
  Tape tape;
  LossBreakdown breakdown;
  {
    TapeScope scope(tape);
    StepLosses losses = forward_losses(model, views, weights, rng);
    breakdown = losses.breakdown;
    if (!std::isfinite(breakdown.L)) return breakdown;
    backward(tape, losses.L);
  }
  breakdown.grad_norm = clip_grad_norm(model.params, sgd.clip_norm);
  sgd_step(model.params, sgd.lr, sgd.momentum, state);
  return breakdown;
}

}  // namespace dhn
