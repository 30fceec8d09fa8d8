#pragma once

#include "dhn/augment.hpp"
#include "dhn/boxes.hpp"
#include "dhn/losses.hpp"
#include "dhn/metrics.hpp"
#include "dhn/parameters.hpp"
#include "dhn/scan.hpp"
#include "dhn/tensor.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace dhn {

struct DhnConfig {
  Index image_size = 128;
  Index stem_width = 16;
  std::array<Index, 3> stage_widths = {16, 32, 64};
  int deformable_stages = 2;  // counted from the last stage
  Index fpn_width = 32;
  Index global_width = 32;
  Index roi_hidden = 64;
  Index roi_pool = 7;

  /// Anchor side lengths per pyramid level (strides 4, 8, 16) and height/width ratios.
  std::vector<std::vector<double>> anchor_sizes = {{6.0, 8.0}, {10.0, 13.0}, {17.0, 24.0}};
  std::vector<double> anchor_ratios = {1.0};

  double rpn_fg_iou = 0.7;
  double rpn_bg_iou = 0.3;
  int rpn_batch = 64;
  double rpn_positive_fraction = 0.5;
  int rpn_pre_nms_train = 300;  // per level
  int rpn_post_nms_train = 100;
  int rpn_pre_nms_test = 300;
  int rpn_post_nms_test = 50;
  double rpn_nms = 0.7;

  double roi_fg_iou = 0.5;
  int roi_batch = 32;
  double roi_positive_fraction = 0.25;
  double roi_score_threshold = 0.05;
  double roi_nms = 0.5;
  int detections_per_image = 10;

  void validate() const;
  static constexpr std::array<double, 3> kStrides = {4.0, 8.0, 16.0};
};

struct DhnModel {
  DhnConfig config;
  AnchorSet anchors;
  ParameterSet params;
};

/// Parameter names start with one of these; the trunk is everything else.
inline constexpr const char* kGlobalHeadPrefix = "global.";
inline constexpr const char* kRpnPrefix = "rpn.";
inline constexpr const char* kRoiPrefix = "roi.";

bool is_global_head_param(std::string_view name);
bool is_local_head_param(std::string_view name);

/// He-initialised convolutions, zero offset branches, small output layers.
DhnModel make_model(const DhnConfig& config, std::uint64_t seed);

/// Scans' [1,H,W] intensities stacked to [N,1,H,W] and mapped to (x - 128) / 64.
Tensor image_batch(std::span<const Tensor> images);

/// Stage outputs at strides 4, 8 and 16.
std::vector<Tensor> backbone_forward(const DhnModel& model, const Tensor& x);
/// Levels P2..P4, fine to coarse, each fpn_width channels.
std::vector<Tensor> fpn_forward(const DhnModel& model, std::span<const Tensor> stages);
/// Nodule probability [N] from the coarsest level.
Tensor global_head_forward(const DhnModel& model, std::span<const Tensor> pyramid);

struct RpnOutput {
  Tensor objectness;  // [N*M] logits, image-major then anchor order
  Tensor deltas;      // [N*M, 4]
  Index images = 0;
  Index anchors_per_image = 0;
};
RpnOutput rpn_forward(const DhnModel& model, std::span<const Tensor> pyramid);

/// Decoded, clipped, per-level top-k, NMS'd boxes for image `n` of `rpn`,
/// scored by sigmoid objectness in descending order.
std::vector<ScoredBox> rpn_proposals(const DhnModel& model, const RpnOutput& rpn, Index n, int pre_nms_per_level,
                                     int post_nms, double image_height, double image_width);

struct RoiOutput {
  Tensor class_logits;  // [R, 2]
  Tensor deltas;        // [R, 4]
};
/// ROI features for every (image, box) request; levels chosen by assign_fpn_level.
RoiOutput roi_head_forward(const DhnModel& model, std::span<const Tensor> pyramid,
                           std::span<const std::pair<Index, Box>> rois);

/// Foreground-scored boxes: decode, clip, drop rows below the score threshold,
/// NMS, cap at detections_per_image.
std::vector<ScoredBox> roi_detections(const DhnModel& model, const RoiOutput& out,
                                      std::span<const std::pair<Index, Box>> rois, Index n, double image_height,
                                      double image_width);

struct Inference {
  double global_probability = 0.0;
  std::vector<ScoredBox> detections;
};

/// One shared trunk pass per image, no augmentation, no tape.
std::vector<Inference> infer(const DhnModel& model, std::span<const Tensor> images);

struct StepLosses {
  Tensor L_g, L_l, L;
  LocalLoss local;
  LossBreakdown breakdown;
};

/// Runs the trunk on [global views..., local views...] as one batch, routes
/// global views to the global head and local views to the local head, and
/// builds L = lambda1 * L_g + lambda2 * L_l. A head with no views contributes 0.
/// `rng` drives anchor and proposal sampling.
StepLosses forward_losses(const DhnModel& model, std::span<const View> views, const LossWeights& weights,
                          std::mt19937_64& rng);

struct SgdConfig {
  double lr = 5e-5;
  double momentum = 0.975;
  double clip_norm = 0.0;  // 0 disables gradient clipping
};

/// DHA training step over `scans`: one routed view pair per scan, forward,
/// backward, SGD update. Rejects scans whose label disagrees with their boxes.
LossBreakdown train_step(DhnModel& model, SgdState& state, std::span<const Scan> scans, const AugStrategy& phi_g,
                         const AugStrategy& phi_l, const LossWeights& weights, const SgdConfig& sgd,
                         std::mt19937_64& rng);

}  // namespace dhn
