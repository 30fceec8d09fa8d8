#include "dhn/ops.hpp"
#include "kernels.hpp"

#include <cmath>

namespace dhn {

using kernels::require;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return record_op("add", a.shape(), a.values() + b.values(), {a, b},
                   {[](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g;
                     if (in[1]) *in[1] += g;
                   }});
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return record_op("sub", a.shape(), a.values() - b.values(), {a, b},
                   {[](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g;
                     if (in[1]) *in[1] -= g;
                   }});
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return record_op("mul", a.shape(), a.values() * b.values(), {a, b},
                   {[a, b](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g * b.values();
                     if (in[1]) *in[1] += g * a.values();
                   }});
}

Tensor neg(const Tensor& a) {
  return record_op("neg", a.shape(), -a.values(), {a}, {[](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] -= g;
                   }});
}

Tensor scalar_mul(const Tensor& a, double s) {
  return record_op("scalar_mul", a.shape(), a.values() * s, {a}, {[s](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g * s;
                   }});
}

Tensor relu(const Tensor& a) {
  return record_op("relu", a.shape(), a.values().max(0.0), {a}, {[a](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += (a.values() > 0.0).select(g, 0.0);
                   }});
}

Tensor log(const Tensor& a) {
  const Buffer& v = a.values();
  for (Index i = 0; i < v.size(); ++i) {
    require(v[i] > 0.0, "log: non-positive input " + std::to_string(v[i]) + " at index " + std::to_string(i));
  }
  return record_op("log", a.shape(), v.log(), {a}, {[a](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g / a.values();
                   }});
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  require(lo < hi, "clamp: lower bound must be below upper bound");
  return record_op("clamp", a.shape(), a.values().max(lo).min(hi), {a}, {[a, lo, hi](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += ((a.values() > lo) && (a.values() < hi)).select(g, 0.0);
                   }});
}

Tensor sum(const Tensor& a) {
  return record_op("sum", {1}, Buffer::Constant(1, a.values().sum()), {a}, {[](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g[0];
                   }});
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  return record_op("mean", {1}, Buffer::Constant(1, a.values().sum() / n), {a}, {[n](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g[0] / n;
                   }});
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  return record_op("reshape", std::move(shape), a.values(), {a}, {[](const Buffer& g, GradSlots in) {
                     if (in[0]) *in[0] += g;
                   }});
}

Tensor concat(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat: no inputs");
  Shape trailing(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index rows = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    require(t == trailing, "concat: trailing shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                               shape_str(p.shape()));
    rows += p.dim(0);
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  Buffer out(shape_numel(out_shape));
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.segment(at, p.numel()) = p.values();
    at += p.numel();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<Index> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return record_op("concat", std::move(out_shape), std::move(out), std::move(inputs),
                   {[offsets, sizes](const Buffer& g, GradSlots in) {
                     for (std::size_t k = 0; k < in.size(); ++k) {
                       if (in[k]) *in[k] += g.segment(offsets[k], sizes[k]);
                     }
                   }});
}

Tensor slice(const Tensor& a, Index begin, Index end) {
  require(begin >= 0 && begin < end && end <= a.dim(0),
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
              shape_str(a.shape()));
  const Index row = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = end - begin;
  const Index offset = begin * row, count = (end - begin) * row;
  return record_op("slice", std::move(out_shape), a.values().segment(offset, count), {a},
                   {[offset, count](const Buffer& g, GradSlots in) {
                     if (in[0]) in[0]->segment(offset, count) += g;
                   }});
}

Tensor gather(const Tensor& a, std::vector<Index> indices, Shape out_shape) {
  require(shape_numel(out_shape) == static_cast<Index>(indices.size()),
          "gather: " + std::to_string(indices.size()) + " indices do not fill " + shape_str(out_shape));
  const Buffer& v = a.values();
  Buffer out(static_cast<Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < v.size(), "gather: index out of range");
    out[static_cast<Index>(i)] = v[indices[i]];
  }
  return record_op("gather", std::move(out_shape), std::move(out), {a},
                   {[indices = std::move(indices)](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     for (std::size_t i = 0; i < indices.size(); ++i) (*in[0])[indices[i]] += g[static_cast<Index>(i)];
                   }});
}

Tensor upsample_nearest2x(const Tensor& a) {
  require(a.rank() == 4, "upsample_nearest2x: expected [N,C,H,W], got " + shape_str(a.shape()));
  const Index planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  const Index oh = 2 * h, ow = 2 * w;
  Buffer out(planes * oh * ow);
  const Buffer& v = a.values();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < oh; ++y) {
      for (Index x = 0; x < ow; ++x) out[(p * oh + y) * ow + x] = v[(p * h + y / 2) * w + x / 2];
    }
  }
  return record_op("upsample_nearest2x", {a.dim(0), a.dim(1), oh, ow}, std::move(out), {a},
                   {[planes, h, w](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     const Index oh = 2 * h, ow = 2 * w;
                     for (Index p = 0; p < planes; ++p) {
                       for (Index y = 0; y < oh; ++y) {
                         for (Index x = 0; x < ow; ++x) (*in[0])[(p * h + y / 2) * w + x / 2] += g[(p * oh + y) * ow + x];
                       }
                     }
                   }});
}

}  // namespace dhn
