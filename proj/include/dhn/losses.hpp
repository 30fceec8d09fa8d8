#pragma once

#include "dhn/box.hpp"
#include "dhn/tensor.hpp"

#include <span>
#include <vector>

namespace dhn {

struct LossWeights {
  double alpha1 = 0.69;  // positive-class weight of the global cross-entropy
  double alpha2 = 1.76;  // negative-class weight
  double lambda1 = 0.35; // global head
  double lambda2 = 2.5;  // local head

  void validate() const;
};

inline constexpr double kProbabilityClamp = 1e-7;

/// Weighted binary cross-entropy summed over the batch:
/// -sum_i [a1 y_i log p_i + a2 (1 - y_i) log(1 - p_i)], p clamped to [1e-7, 1 - 1e-7].
Tensor global_loss(const Tensor& probs, std::span<const int> labels, double alpha1, double alpha2);

/// Objectness logits [K] of the sampled anchors with their 0/1 targets.
struct SampledObjectness {
  Tensor logits;
  std::vector<double> targets;
};

/// Deltas [P,4] of positive samples, the boxes they are relative to (anchors or
/// proposals) and the matched ground truth.
struct SampledRegression {
  Tensor deltas;
  std::vector<Box> references;
  std::vector<Box> targets;
};

/// Class logits [K,2] of sampled proposals with labels in {0,1}.
struct SampledClassification {
  Tensor logits;
  std::vector<int> labels;
};

struct LocalLoss {
  Tensor l_obj, l_reg, l_cls, l_bbox;
  Tensor total;
};

/// Sum of four per-term means. Regression terms are gIoU losses on decoded
/// boxes; every term is exactly 0 when its sample set is empty.
LocalLoss local_loss(const SampledObjectness& rpn_obj, const SampledRegression& rpn_reg,
                     const SampledClassification& roi_cls, const SampledRegression& roi_reg);

Tensor multitask_loss(const Tensor& global, const Tensor& local, double lambda1, double lambda2);

struct LossBreakdown {
  double l_obj = 0.0, l_reg = 0.0, l_cls = 0.0, l_bbox = 0.0;
  double L_l = 0.0, L_g = 0.0, L = 0.0;
  double grad_norm = 0.0;  // before clipping; set by train_step
};

}  // namespace dhn
