#include "dhn/losses.hpp"

#include "dhn/boxes.hpp"
#include "dhn/ops.hpp"
#include "kernels.hpp"

namespace dhn {

using kernels::require;

void LossWeights::validate() const {
  require(alpha1 > 0.0 && alpha2 > 0.0 && lambda1 > 0.0 && lambda2 > 0.0,
          "loss weights alpha1, alpha2, lambda1, lambda2 must all be positive");
}

Tensor global_loss(const Tensor& probs, std::span<const int> labels, double alpha1, double alpha2) {
  require(probs.numel() == static_cast<Index>(labels.size()),
          "global_loss: " + std::to_string(probs.numel()) + " probabilities for " + std::to_string(labels.size()) +
              " labels");
  const Index n = probs.numel();
  Buffer pos(n), negw(n);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require(y == 0 || y == 1, "global_loss: label " + std::to_string(y) + " at index " + std::to_string(i) +
                                  " is not 0 or 1");
    pos[i] = alpha1 * y;
    negw[i] = alpha2 * (1 - y);
  }
  const Tensor p = clamp(reshape(probs, {n}), kProbabilityClamp, 1.0 - kProbabilityClamp);
  const Tensor one_minus = add(neg(p), Tensor({n}, 1.0));
  const Tensor terms = add(mul(log(p), Tensor({n}, std::move(pos))), mul(log(one_minus), Tensor({n}, std::move(negw))));
  return neg(sum(terms));
}

namespace {

Tensor regression_term(const SampledRegression& reg, const char* name) {
  const std::size_t k = reg.references.size();
  require(reg.targets.size() == k, std::string(name) + ": " + std::to_string(k) + " positive samples but " +
                                       std::to_string(reg.targets.size()) + " matched ground-truth boxes");
  if (k == 0) return Tensor::scalar(0.0);
  require(reg.deltas.rank() == 2 && reg.deltas.dim(0) == static_cast<Index>(k) && reg.deltas.dim(1) == 4,
          std::string(name) + ": deltas must be [P,4], got " + shape_str(reg.deltas.shape()));
  return mean(giou_loss(decode_deltas(reg.references, reg.deltas), reg.targets));
}

}  // namespace

LocalLoss local_loss(const SampledObjectness& rpn_obj, const SampledRegression& rpn_reg,
                     const SampledClassification& roi_cls, const SampledRegression& roi_reg) {
  LocalLoss out;
  out.l_obj = rpn_obj.targets.empty() ? Tensor::scalar(0.0) : bce_with_logits(rpn_obj.logits, rpn_obj.targets);
  out.l_reg = regression_term(rpn_reg, "l_reg");
  out.l_cls = roi_cls.labels.empty() ? Tensor::scalar(0.0) : softmax_cross_entropy(roi_cls.logits, roi_cls.labels);
  out.l_bbox = regression_term(roi_reg, "l_bbox");
  out.total = add(add(out.l_obj, out.l_reg), add(out.l_cls, out.l_bbox));
  return out;
}

Tensor multitask_loss(const Tensor& global, const Tensor& local, double lambda1, double lambda2) {
  return add(scalar_mul(global, lambda1), scalar_mul(local, lambda2));
}

}  // namespace dhn
