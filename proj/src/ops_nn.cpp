#include "dhn/ops.hpp"
#include "kernels.hpp"

#include <cmath>

namespace dhn {

using kernels::ConstMatrixMap;
using kernels::MatrixMap;
using kernels::require;

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require(input.rank() == 2 && weight.rank() == 2 && bias.rank() == 1,
          "linear: expected input [N,D], weight [K,D], bias [K]");
  require(input.dim(1) == weight.dim(1), "linear: inner dimension mismatch between input " +
                                             shape_str(input.shape()) + " and weight " + shape_str(weight.shape()));
  require(bias.dim(0) == weight.dim(0), "linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                                            shape_str(weight.shape()));
  const Index n = input.dim(0), d = input.dim(1), k = weight.dim(0);
  Buffer out(n * k);
  MatrixMap o(out.data(), n, k);
  o.noalias() = ConstMatrixMap(input.values().data(), n, d) * ConstMatrixMap(weight.values().data(), k, d).transpose();
  o.rowwise() += bias.values().matrix().transpose();
  return record_op("linear", {n, k}, std::move(out), {input, weight, bias},
                   {[input, weight, n, d, k](const Buffer& g, GradSlots in) {
                     ConstMatrixMap go(g.data(), n, k);
                     if (in[0]) {
                       MatrixMap(in[0]->data(), n, d).noalias() += go * ConstMatrixMap(weight.values().data(), k, d);
                     }
                     if (in[1]) {
                       MatrixMap(in[1]->data(), k, d).noalias() +=
                           go.transpose() * ConstMatrixMap(input.values().data(), n, d);
                     }
                     if (in[2]) in[2]->matrix() += go.colwise().sum().transpose();
                   }});
}

Tensor maxpool2d(const Tensor& input, Index kernel, Index stride) {
  require(input.rank() == 4, "maxpool2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(kernel >= 1 && stride >= 1, "maxpool2d: kernel and stride must be positive");
  const Index planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  require(kernel <= h && kernel <= w, "maxpool2d: kernel " + std::to_string(kernel) + " larger than input " +
                                          shape_str(input.shape()));
  const Index oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  Buffer out(planes * oh * ow);
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Buffer& v = input.values();
  for (Index p = 0; p < planes; ++p) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Index best = p * h * w + (oy * stride) * w + ox * stride;
        for (Index i = 0; i < kernel; ++i) {
          for (Index j = 0; j < kernel; ++j) {
            const Index at = p * h * w + (oy * stride + i) * w + ox * stride + j;
            if (v[at] > v[best]) best = at;
          }
        }
        const Index o = (p * oh + oy) * ow + ox;
        out[o] = v[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return record_op("maxpool2d", {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                   {[argmax = std::move(argmax)](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     for (std::size_t o = 0; o < argmax.size(); ++o) (*in[0])[argmax[o]] += g[static_cast<Index>(o)];
                   }});
}

Tensor global_maxpool(const Tensor& input) {
  require(input.rank() == 4, "global_maxpool: input must be [N,C,H,W], got " + shape_str(input.shape()));
  const Index planes = input.dim(0) * input.dim(1), area = input.dim(2) * input.dim(3);
  Buffer out(planes);
  std::vector<Index> argmax(static_cast<std::size_t>(planes));
  const Buffer& v = input.values();
  for (Index p = 0; p < planes; ++p) {
    Index best = p * area;
    for (Index i = 1; i < area; ++i) {
      if (v[p * area + i] > v[best]) best = p * area + i;
    }
    out[p] = v[best];
    argmax[static_cast<std::size_t>(p)] = best;
  }
  return record_op("global_maxpool", {input.dim(0), input.dim(1)}, std::move(out), {input},
                   {[argmax = std::move(argmax)](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     for (std::size_t p = 0; p < argmax.size(); ++p) (*in[0])[argmax[p]] += g[static_cast<Index>(p)];
                   }});
}

Tensor softmax(const Tensor& input) {
  require(input.rank() == 2 && input.dim(1) >= 2, "softmax: input must be [N,K] with K >= 2, got " +
                                                      shape_str(input.shape()));
  const Index n = input.dim(0), k = input.dim(1);
  Buffer out(n * k);
  MatrixMap y(out.data(), n, k);
  ConstMatrixMap x(input.values().data(), n, k);
  for (Index r = 0; r < n; ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  Buffer probs = out;
  return record_op("softmax", {n, k}, std::move(out), {input},
                   {[probs = std::move(probs), n, k](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     ConstMatrixMap y(probs.data(), n, k);
                     ConstMatrixMap go(g.data(), n, k);
                     MatrixMap gi(in[0]->data(), n, k);
                     for (Index r = 0; r < n; ++r) {
                       const double dot = go.row(r).dot(y.row(r));
                       gi.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
                     }
                   }});
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  require(logits.rank() == 1 && logits.dim(0) == static_cast<Index>(targets.size()),
          "bce_with_logits: logits must be [K] with one target each");
  const Index k = logits.dim(0);
  const Buffer& z = logits.values();
  double total = 0.0;
  for (Index i = 0; i < k; ++i) {
    const double t = targets[static_cast<std::size_t>(i)];
    total += std::max(z[i], 0.0) - z[i] * t + std::log1p(std::exp(-std::abs(z[i])));
  }
  std::vector<double> tgt(targets.begin(), targets.end());
  return record_op("bce_with_logits", {1}, Buffer::Constant(1, total / static_cast<double>(k)), {logits},
                   {[logits, tgt = std::move(tgt), k](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     const Buffer& z = logits.values();
                     for (Index i = 0; i < k; ++i) {
                       const double sig = 1.0 / (1.0 + std::exp(-z[i]));
                       (*in[0])[i] += g[0] * (sig - tgt[static_cast<std::size_t>(i)]) / static_cast<double>(k);
                     }
                   }});
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && logits.dim(0) == static_cast<Index>(labels.size()),
          "softmax_cross_entropy: logits must be [K,C] with one label per row");
  const Index n = logits.dim(0), c = logits.dim(1);
  ConstMatrixMap x(logits.values().data(), n, c);
  Buffer probs(n * c);
  MatrixMap p(probs.data(), n, c);
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    require(label >= 0 && label < c, "softmax_cross_entropy: label out of range");
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    total += lse - x(r, label);
    p.row(r) = (x.row(r).array() - lse).exp().matrix();
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return record_op("softmax_cross_entropy", {1}, Buffer::Constant(1, total / static_cast<double>(n)), {logits},
                   {[probs = std::move(probs), lab = std::move(lab), n, c](const Buffer& g, GradSlots in) {
                     if (!in[0]) return;
                     const double scale = g[0] / static_cast<double>(n);
                     for (Index r = 0; r < n; ++r) {
                       for (Index j = 0; j < c; ++j) {
                         const double onehot = (j == lab[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
                         (*in[0])[r * c + j] += scale * (probs[r * c + j] - onehot);
                       }
                     }
                   }});
}

}  // namespace dhn
