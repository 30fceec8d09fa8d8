#include "dhn/ops.hpp"
#include "kernels.hpp"

#include <memory>

namespace dhn {

using kernels::BilinearStencil;
using kernels::ConstMatrixMap;
using kernels::MatrixMap;
using kernels::require;
using kernels::RowMatrix;

namespace {

struct ConvGeometry {
  Index batch, channels, height, width;
  Index out_channels, kh, kw;
  Index stride, padding;
  Index out_h, out_w;

  Index taps() const { return kh * kw; }
  Index patch() const { return channels * kh * kw; }
  Index positions() const { return out_h * out_w; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

ConvGeometry conv_geometry(const char* op, const Tensor& input, const Tensor& weight, const Tensor& bias,
                           Index stride, Index padding) {
  require(input.rank() == 4, std::string(op) + ": input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 4, std::string(op) + ": weight must be [O,C,kh,kw], got " + shape_str(weight.shape()));
  require(input.dim(1) == weight.dim(1), std::string(op) + ": input channels of " + shape_str(input.shape()) +
                                             " do not match weight " + shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
          std::string(op) + ": bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  require(weight.dim(2) % 2 == 1 && weight.dim(3) % 2 == 1, std::string(op) + ": kernel extents must be odd");
  require(stride >= 1 && padding >= 0, std::string(op) + ": stride must be >= 1 and padding >= 0");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                 weight.dim(3), stride, padding, 0, 0};
  const Index span_h = g.height + 2 * padding - g.kh;
  const Index span_w = g.width + 2 * padding - g.kw;
  require(span_h >= 0 && span_w >= 0, std::string(op) + ": kernel of " + shape_str(weight.shape()) +
                                           " does not fit padded input " + shape_str(input.shape()));
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;
  return g;
}

void im2col(const ConvGeometry& g, const double* image, RowMatrix& cols) {
  cols.resize(g.patch(), g.positions());
  for (Index c = 0; c < g.channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        double* row = cols.row((c * g.kh + i) * g.kw + j).data();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index y = oy * g.stride - g.padding + i;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index x = ox * g.stride - g.padding + j;
            row[oy * g.out_w + ox] =
                (y >= 0 && y < g.height && x >= 0 && x < g.width) ? plane[y * g.width + x] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const RowMatrix& cols, double* image) {
  for (Index c = 0; c < g.channels; ++c) {
    double* plane = image + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const double* row = cols.row((c * g.kh + i) * g.kw + j).data();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index y = oy * g.stride - g.padding + i;
          if (y < 0 || y >= g.height) continue;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index x = ox * g.stride - g.padding + j;
            if (x >= 0 && x < g.width) plane[y * g.width + x] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

/// Sampling stencils of a deformable convolution for one image, laid out
/// [tap][position].
std::vector<BilinearStencil> deformable_stencils(const ConvGeometry& g, const double* offsets) {
  std::vector<BilinearStencil> stencils(static_cast<std::size_t>(g.taps() * g.positions()));
  const Index positions = g.positions();
  for (Index i = 0; i < g.kh; ++i) {
    for (Index j = 0; j < g.kw; ++j) {
      const Index t = i * g.kw + j;
      const double* dy = offsets + (2 * t) * positions;
      const double* dx = offsets + (2 * t + 1) * positions;
      for (Index oy = 0; oy < g.out_h; ++oy) {
        for (Index ox = 0; ox < g.out_w; ++ox) {
          const Index p = oy * g.out_w + ox;
          const double y = static_cast<double>(oy * g.stride - g.padding + i) + dy[p];
          const double x = static_cast<double>(ox * g.stride - g.padding + j) + dx[p];
          stencils[static_cast<std::size_t>(t * positions + p)] = BilinearStencil(y, x);
        }
      }
    }
  }
  return stencils;
}

void deformable_im2col(const ConvGeometry& g, const double* image, const std::vector<BilinearStencil>& stencils,
                       RowMatrix& cols) {
  cols.resize(g.patch(), g.positions());
  const Index positions = g.positions();
  for (Index c = 0; c < g.channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (Index t = 0; t < g.taps(); ++t) {
      double* row = cols.row(c * g.taps() + t).data();
      const BilinearStencil* s = stencils.data() + t * positions;
      for (Index p = 0; p < positions; ++p) row[p] = s[p].read(plane, g.height, g.width);
    }
  }
}

/// Shared GEMM stage: out[n] = W * cols[n] + b, plus the matching backward.
Tensor conv_from_columns(const char* op, const ConvGeometry& g, std::shared_ptr<std::vector<RowMatrix>> columns,
                         const Tensor& weight, const Tensor& bias, std::vector<Tensor> inputs,
                         std::function<void(Index n, const RowMatrix& dcols, GradSlots in)> scatter_columns) {
  const Index per_out = g.out_channels * g.positions();
  Buffer out(g.batch * per_out);
  ConstMatrixMap w(weight.values().data(), g.out_channels, g.patch());
  for (Index n = 0; n < g.batch; ++n) {
    MatrixMap o(out.data() + n * per_out, g.out_channels, g.positions());
    o.noalias() = w * (*columns)[static_cast<std::size_t>(n)];
    o.colwise() += bias.values().matrix();
  }
  return record_op(
      op, {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      {[g, columns, weight, scatter = std::move(scatter_columns)](const Buffer& grad, GradSlots in) {
        // inputs are (input, weight, bias, [offsets]); slot order set by caller.
        const Index per_out = g.out_channels * g.positions();
        ConstMatrixMap w(weight.values().data(), g.out_channels, g.patch());
        RowMatrix dcols;
        for (Index n = 0; n < g.batch; ++n) {
          ConstMatrixMap go(grad.data() + n * per_out, g.out_channels, g.positions());
          const RowMatrix& cols = (*columns)[static_cast<std::size_t>(n)];
          if (in[1]) MatrixMap(in[1]->data(), g.out_channels, g.patch()).noalias() += go * cols.transpose();
          if (in[2]) in[2]->matrix() += go.rowwise().sum();
          if (scatter) {
            dcols.noalias() = w.transpose() * go;
            scatter(n, dcols, in);
          }
        }
      }});
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Index stride, Index padding) {
  const ConvGeometry g = conv_geometry("conv2d", input, weight, bias, stride, padding);
  auto columns = std::make_shared<std::vector<RowMatrix>>(static_cast<std::size_t>(g.batch));
  const Index per_in = g.channels * g.height * g.width;
  for (Index n = 0; n < g.batch; ++n) {
    const double* image = input.values().data() + n * per_in;
    auto& cols = (*columns)[static_cast<std::size_t>(n)];
    if (g.is_pointwise()) {
      cols = ConstMatrixMap(image, g.channels, g.positions());
    } else {
      im2col(g, image, cols);
    }
  }
  auto scatter = [g, per_in](Index n, const RowMatrix& dcols, GradSlots in) {
    if (!in[0]) return;
    double* image = in[0]->data() + n * per_in;
    if (g.is_pointwise()) {
      MatrixMap(image, g.channels, g.positions()) += dcols;
    } else {
      col2im(g, dcols, image);
    }
  };
  return conv_from_columns("conv2d", g, std::move(columns), weight, bias, {input, weight, bias},
                           input.requires_grad() ? std::function<void(Index, const RowMatrix&, GradSlots)>(scatter)
                                                 : nullptr);
}

Tensor deformable_conv2d(const Tensor& input, const Tensor& weight, const Tensor& offsets, const Tensor& bias,
                         Index stride, Index padding) {
  const ConvGeometry g = conv_geometry("deformable_conv2d", input, weight, bias, stride, padding);
  require(offsets.rank() == 4 && offsets.dim(0) == g.batch,
          "deformable_conv2d: offsets must be [N,2*kh*kw,H',W'], got " + shape_str(offsets.shape()));
  require(offsets.dim(1) == 2 * g.taps(), "deformable_conv2d: offset channel count " + std::to_string(offsets.dim(1)) +
                                              " must equal 2*kh*kw = " + std::to_string(2 * g.taps()));
  require(offsets.dim(2) == g.out_h && offsets.dim(3) == g.out_w,
          "deformable_conv2d: offsets spatial extent " + shape_str(offsets.shape()) + " must match the output extent");

  auto columns = std::make_shared<std::vector<RowMatrix>>(static_cast<std::size_t>(g.batch));
  const Index per_in = g.channels * g.height * g.width;
  const Index per_off = 2 * g.taps() * g.positions();
  for (Index n = 0; n < g.batch; ++n) {
    const auto stencils = deformable_stencils(g, offsets.values().data() + n * per_off);
    deformable_im2col(g, input.values().data() + n * per_in, stencils, (*columns)[static_cast<std::size_t>(n)]);
  }

  auto scatter = [g, per_in, per_off, input, offsets](Index n, const RowMatrix& dcols, GradSlots in) {
    const auto stencils = deformable_stencils(g, offsets.values().data() + n * per_off);
    const Index positions = g.positions();
    const double* image = input.values().data() + n * per_in;
    for (Index c = 0; c < g.channels; ++c) {
      const double* plane = image + c * g.height * g.width;
      for (Index t = 0; t < g.taps(); ++t) {
        const double* drow = dcols.row(c * g.taps() + t).data();
        const BilinearStencil* s = stencils.data() + t * positions;
        if (in[0]) {
          double* gplane = in[0]->data() + n * per_in + c * g.height * g.width;
          for (Index p = 0; p < positions; ++p) s[p].scatter(gplane, g.height, g.width, drow[p]);
        }
        if (in[3]) {
          double* goy = in[3]->data() + n * per_off + (2 * t) * positions;
          double* gox = goy + positions;
          for (Index p = 0; p < positions; ++p) {
            double dy = 0.0, dx = 0.0;
            s[p].position_gradient(plane, g.height, g.width, dy, dx);
            goy[p] += drow[p] * dy;
            gox[p] += drow[p] * dx;
          }
        }
      }
    }
  };
  const bool needs_scatter = input.requires_grad() || offsets.requires_grad();
  return conv_from_columns("deformable_conv2d", g, std::move(columns), weight, bias, {input, weight, bias, offsets},
                           needs_scatter ? std::function<void(Index, const RowMatrix&, GradSlots)>(scatter) : nullptr);
}

Tensor bilinear_sample(const Tensor& input, double y, double x) {
  require(input.rank() == 3, "bilinear_sample: input must be [C,H,W], got " + shape_str(input.shape()));
  const Index channels = input.dim(0), h = input.dim(1), w = input.dim(2);
  const BilinearStencil s(y, x);
  Buffer out(channels);
  for (Index c = 0; c < channels; ++c) out[c] = s.read(input.values().data() + c * h * w, h, w);
  return record_op("bilinear_sample", {channels}, std::move(out), {input},
                   {[s, channels, h, w](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     for (Index c = 0; c < channels; ++c) s.scatter(in[0]->data() + c * h * w, h, w, g[c]);
                   }});
}

namespace {

constexpr Index kRoiSamples = 2;

/// Stencils for one ROI laid out [bin_y][bin_x][sample], kRoiSamples^2 per bin.
std::vector<BilinearStencil> roi_stencils(const Box& box, Index output_size, double spatial_scale) {
  const Box b = box.canonical();
  const double y1 = b.y1 * spatial_scale - 0.5, x1 = b.x1 * spatial_scale - 0.5;
  const double bin_h = (b.y2 - b.y1) * spatial_scale / static_cast<double>(output_size);
  const double bin_w = (b.x2 - b.x1) * spatial_scale / static_cast<double>(output_size);
  std::vector<BilinearStencil> stencils;
  stencils.reserve(static_cast<std::size_t>(output_size * output_size * kRoiSamples * kRoiSamples));
  for (Index py = 0; py < output_size; ++py) {
    for (Index px = 0; px < output_size; ++px) {
      for (Index sy = 0; sy < kRoiSamples; ++sy) {
        for (Index sx = 0; sx < kRoiSamples; ++sx) {
          const double y = y1 + (static_cast<double>(py) + (static_cast<double>(sy) + 0.5) / kRoiSamples) * bin_h;
          const double x = x1 + (static_cast<double>(px) + (static_cast<double>(sx) + 0.5) / kRoiSamples) * bin_w;
          stencils.emplace_back(y, x);
        }
      }
    }
  }
  return stencils;
}

void roi_forward(const double* feature, Index channels, Index h, Index w, const std::vector<BilinearStencil>& stencils,
                 Index bins, double* out) {
  constexpr Index per_bin = kRoiSamples * kRoiSamples;
  for (Index c = 0; c < channels; ++c) {
    const double* plane = feature + c * h * w;
    for (Index b = 0; b < bins; ++b) {
      double acc = 0.0;
      for (Index s = 0; s < per_bin; ++s) acc += stencils[static_cast<std::size_t>(b * per_bin + s)].read(plane, h, w);
      out[c * bins + b] = acc / static_cast<double>(per_bin);
    }
  }
}

void roi_backward(double* grad_feature, Index channels, Index h, Index w, const std::vector<BilinearStencil>& stencils,
                  Index bins, const double* grad_out) {
  constexpr Index per_bin = kRoiSamples * kRoiSamples;
  for (Index c = 0; c < channels; ++c) {
    double* plane = grad_feature + c * h * w;
    for (Index b = 0; b < bins; ++b) {
      const double g = grad_out[c * bins + b] / static_cast<double>(per_bin);
      for (Index s = 0; s < per_bin; ++s) stencils[static_cast<std::size_t>(b * per_bin + s)].scatter(plane, h, w, g);
    }
  }
}

}  // namespace

Tensor roi_align(const Tensor& level, const Box& box, Index output_size, double spatial_scale) {
  require(level.rank() == 3, "roi_align: feature map must be [C,h,w], got " + shape_str(level.shape()));
  require(output_size >= 1, "roi_align: output size must be >= 1");
  require(spatial_scale > 0.0, "roi_align: spatial scale must be positive");
  const Index channels = level.dim(0), h = level.dim(1), w = level.dim(2);
  const Index bins = output_size * output_size;
  auto stencils = roi_stencils(box, output_size, spatial_scale);
  Buffer out(channels * bins);
  roi_forward(level.values().data(), channels, h, w, stencils, bins, out.data());
  return record_op("roi_align", {channels, output_size, output_size}, std::move(out), {level},
                   {[stencils = std::move(stencils), channels, h, w, bins](const Buffer& g, GradSlots in) {
                     if (in[0]) roi_backward(in[0]->data(), channels, h, w, stencils, bins, g.data());
                   }});
}

Tensor multiscale_roi_align(std::span<const Tensor> levels, std::span<const double> spatial_scales,
                            std::span<const RoiRequest> rois, Index output_size) {
  require(!levels.empty(), "multiscale_roi_align: no pyramid levels");
  require(levels.size() == spatial_scales.size(), "multiscale_roi_align: one spatial scale per level required");
  require(!rois.empty(), "multiscale_roi_align: no regions");
  const Index channels = levels[0].dim(1);
  for (const auto& l : levels) {
    require(l.rank() == 4 && l.dim(1) == channels, "multiscale_roi_align: levels must be [N,C,h,w] with equal C");
  }
  const Index bins = output_size * output_size;
  const Index per_roi = channels * bins;
  Buffer out(static_cast<Index>(rois.size()) * per_roi);
  auto stencils = std::make_shared<std::vector<std::vector<BilinearStencil>>>();
  stencils->reserve(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const RoiRequest& roi = rois[r];
    require(roi.level >= 0 && roi.level < static_cast<Index>(levels.size()), "multiscale_roi_align: bad level index");
    const Tensor& l = levels[static_cast<std::size_t>(roi.level)];
    require(roi.batch >= 0 && roi.batch < l.dim(0), "multiscale_roi_align: bad batch index");
    stencils->push_back(roi_stencils(roi.box, output_size, spatial_scales[static_cast<std::size_t>(roi.level)]));
    const Index h = l.dim(2), w = l.dim(3);
    roi_forward(l.values().data() + roi.batch * channels * h * w, channels, h, w, stencils->back(), bins,
                out.data() + static_cast<Index>(r) * per_roi);
  }
  std::vector<Tensor> inputs(levels.begin(), levels.end());
  std::vector<RoiRequest> requests(rois.begin(), rois.end());
  std::vector<std::pair<Index, Index>> extents;
  for (const auto& l : levels) extents.emplace_back(l.dim(2), l.dim(3));
  return record_op("multiscale_roi_align", {static_cast<Index>(rois.size()), channels, output_size, output_size},
                   std::move(out), std::move(inputs),
                   {[stencils, requests = std::move(requests), extents = std::move(extents), channels, bins,
                     per_roi](const Buffer& g, GradSlots in) {
                     for (std::size_t r = 0; r < requests.size(); ++r) {
                       const auto level = static_cast<std::size_t>(requests[r].level);
                       if (!in[level]) continue;
                       const auto [h, w] = extents[level];
                       roi_backward(in[level]->data() + requests[r].batch * channels * h * w, channels, h, w,
                                    (*stencils)[r], bins, g.data() + static_cast<Index>(r) * per_roi);
                     }
                   }});
}

}  // namespace dhn
