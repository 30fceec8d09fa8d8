#pragma once

#include "dhn/box.hpp"
#include "dhn/tensor.hpp"

#include <span>
#include <vector>

namespace dhn {

// Pointwise ops. Binary ops require identical shapes; there is no broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scalar_mul(const Tensor& a, double s);
/// Subgradient 0 at 0.
Tensor relu(const Tensor& a);
/// Rejects non-positive entries, naming the first offending flat index.
Tensor log(const Tensor& a);
/// Gradient passes only strictly inside (lo, hi).
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Layout ops.
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenates along the leading axis; trailing extents must agree.
Tensor concat(std::span<const Tensor> parts);
/// Rows [begin, end) of the leading axis.
Tensor slice(const Tensor& a, Index begin, Index end);
/// out.flat[i] = a.flat[indices[i]]; repeated indices accumulate gradient.
Tensor gather(const Tensor& a, std::vector<Index> indices, Shape out_shape);
/// Nearest-neighbour x2 upsampling of [N,C,H,W].
Tensor upsample_nearest2x(const Tensor& a);

/// input [N,C,H,W], weight [O,C,kh,kw] (odd kernel), bias [O] -> [N,O,H',W'] with
/// H' = floor((H + 2 * padding - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Index stride, Index padding);

/// Deformable convolution. `offsets` is [N, 2*kh*kw, H', W'] holding a (dy, dx)
/// pair per kernel tap in row-major tap order. Each tap reads the input at its
/// regular grid position plus the offset through bilinear interpolation; reads
/// outside the image are zero.
Tensor deformable_conv2d(const Tensor& input, const Tensor& weight, const Tensor& offsets, const Tensor& bias,
                         Index stride, Index padding);

/// Bilinear read of every channel of input [C,H,W] at lattice position (y, x).
/// Neighbours outside [0,H) x [0,W) contribute 0.
Tensor bilinear_sample(const Tensor& input, double y, double x);

/// Crops `box` (image pixels) from a [C,h,w] feature map whose stride is
/// 1/spatial_scale into a [C,P,P] tensor. Each bin averages 2x2 bilinear
/// samples; pixel centres map to feature lattice points (half-pixel aligned).
Tensor roi_align(const Tensor& level, const Box& box, Index output_size, double spatial_scale);

struct RoiRequest {
  Index batch = 0;
  Index level = 0;
  Box box;
};

/// Batched ROIAlign over a pyramid of [N,C,h_k,w_k] maps -> [K,C,P,P].
Tensor multiscale_roi_align(std::span<const Tensor> levels, std::span<const double> spatial_scales,
                            std::span<const RoiRequest> rois, Index output_size);

/// input [N,D], weight [K,D], bias [K] -> [N,K].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Unpadded max pooling of [N,C,H,W]. Gradient goes to the first maximum in
/// row-major window order.
Tensor maxpool2d(const Tensor& input, Index kernel, Index stride);
/// [N,C,H,W] -> [N,C].
Tensor global_maxpool(const Tensor& input);

/// Row-wise softmax of [N,K], K >= 2.
Tensor softmax(const Tensor& input);

/// Mean binary cross-entropy of logits [K] against 0/1 targets.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);
/// Mean cross-entropy of logits [K,C] against class labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace dhn
