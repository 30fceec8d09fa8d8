#include "dhn/gradcheck.hpp"

#include "dhn/boxes.hpp"
#include "dhn/ops.hpp"

#include <cmath>
#include <sstream>

namespace dhn {

namespace {

double projected(const Tensor& out, const Buffer& weights) { return (out.values() * weights).sum(); }

}  // namespace

double gradient_relative_error(const GraphFn& graph, std::span<const Tensor> inputs, double step,
                               std::mt19937_64& rng) {
  std::vector<Tensor> args(inputs.begin(), inputs.end());
  for (auto& t : args) {
    if (t.requires_grad() && t.has_grad()) t.zero_grad();
  }

  Tape tape;
  Buffer weights;
  {
    TapeScope scope(tape);
    Tensor out = graph(args);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    weights = Buffer::NullaryExpr(out.numel(), [&] { return u(rng); });
    Tensor loss = sum(mul(out, Tensor(out.shape(), weights)));
    backward(tape, loss);
  }

  double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
  for (auto& t : args) {
    if (!t.requires_grad()) continue;
    const Buffer analytic = t.has_grad() ? t.grad() : Buffer::Zero(t.numel());
    Buffer& values = t.mutable_values();
    for (Index i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = projected(graph(args), weights);
      values[i] = saved - step;
      const double minus = projected(graph(args), weights);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      diff_sq += (analytic[i] - numeric) * (analytic[i] - numeric);
      analytic_sq += analytic[i] * analytic[i];
      numeric_sq += numeric * numeric;
    }
  }
  const double scale = std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-8});
  return std::sqrt(diff_sq) / scale;
}

std::vector<GradcheckResult> run_gradcheck(std::span<const GradcheckCase> cases, const GradcheckOptions& options) {
  std::vector<GradcheckResult> results;
  std::mt19937_64 rng(options.seed);
  for (const auto& c : cases) {
    GradcheckResult r;
    r.op = c.op;
    for (int i = 0; i < options.instances_per_op; ++i) {
      try {
        const auto inputs = c.make_inputs(rng);
        const double err = gradient_relative_error(c.graph, inputs, options.step, rng);
        r.max_relative_error = std::max(r.max_relative_error, std::isnan(err) ? INFINITY : err);
        ++r.instances;
      } catch (const std::exception& e) {
        r.passed = false;
        r.detail = e.what();
        break;
      }
    }
    if (!(r.max_relative_error < options.tolerance)) {
      r.passed = false;
      if (r.detail.empty()) {
        std::ostringstream os;
        os << "relative error " << r.max_relative_error << " exceeds " << options.tolerance;
        r.detail = os.str();
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

namespace {

using Rng = std::mt19937_64;

Index pick(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Tensor random_tensor(Rng& rng, Shape shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
  Buffer v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v), grad);
}

/// Values bounded away from zero by at least `gap`, for kinked ops.
Tensor away_from_zero(Rng& rng, Shape shape, double gap) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) {
    double& v = t.mutable_values()[i];
    if (std::abs(v) < gap) v = v < 0.0 ? -gap - std::abs(v) : gap + v;
  }
  return t;
}

/// Distinct values spaced at least 1e-3 apart in random order, so no window
/// maximum sits within the finite-difference step of a tie.
Tensor distinct_values(Rng& rng, Shape shape) {
  const Index n = shape_numel(shape);
  std::vector<double> vals(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) vals[static_cast<std::size_t>(i)] = static_cast<double>(i) * 1e-2 + uniform(rng, 0.0, 1e-3);
  std::shuffle(vals.begin(), vals.end(), rng);
  Buffer v(n);
  for (Index i = 0; i < n; ++i) v[i] = vals[static_cast<std::size_t>(i)];
  return Tensor(std::move(shape), std::move(v), true);
}

Shape random_shape(Rng& rng, int max_rank = 3) {
  Shape s(static_cast<std::size_t>(pick(rng, 1, max_rank)));
  for (auto& d : s) d = pick(rng, 1, 6);
  return s;
}

double fractional(Rng& rng, double lo, double hi) {
  // Uniform position whose fractional part stays within [0.05, 0.95].
  for (;;) {
    const double v = uniform(rng, lo, hi);
    const double f = v - std::floor(v);
    if (f > 0.05 && f < 0.95) return v;
  }
}

Box random_box(Rng& rng, double extent) {
  const double x1 = uniform(rng, 0.0, extent * 0.6), y1 = uniform(rng, 0.0, extent * 0.6);
  return {x1, y1, x1 + uniform(rng, 1.0, extent * 0.4), y1 + uniform(rng, 1.0, extent * 0.4)};
}

struct ConvSetup {
  Index n, c, h, w, o, k, stride, pad;
};

ConvSetup random_conv(Rng& rng) {
  for (;;) {
    ConvSetup s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 3, 6), pick(rng, 3, 6), pick(rng, 1, 3),
                pick(rng, 0, 1) * 2 + 1, pick(rng, 1, 2), pick(rng, 0, 1)};
    const Index sh = s.h + 2 * s.pad - s.k, sw = s.w + 2 * s.pad - s.k;
    if (sh >= 0 && sw >= 0) return s;
  }
}

}  // namespace

std::vector<GradcheckCase> standard_gradcheck_cases() {
  std::vector<GradcheckCase> cases;
  auto binary = [](Rng& rng) {
    const Shape s = random_shape(rng);
    return std::vector<Tensor>{random_tensor(rng, s), random_tensor(rng, s)};
  };
  auto unary = [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, random_shape(rng))}; };

  cases.push_back({"add", binary, [](auto in) { return add(in[0], in[1]); }});
  cases.push_back({"sub", binary, [](auto in) { return sub(in[0], in[1]); }});
  cases.push_back({"mul", binary, [](auto in) { return mul(in[0], in[1]); }});
  cases.push_back({"neg", unary, [](auto in) { return neg(in[0]); }});
  cases.push_back({"scalar_mul", unary, [](auto in) { return scalar_mul(in[0], -2.5); }});
  cases.push_back({"relu", [](Rng& rng) { return std::vector<Tensor>{away_from_zero(rng, random_shape(rng), 1e-3)}; },
                   [](auto in) { return relu(in[0]); }});
  cases.push_back({"log",
                   [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, random_shape(rng), true, 0.2, 3.0)}; },
                   [](auto in) { return log(in[0]); }});
  cases.push_back({"clamp",
                   [](Rng& rng) {
                     Tensor t = random_tensor(rng, random_shape(rng), true, -2.0, 2.0);
                     for (Index i = 0; i < t.numel(); ++i) {
                       double& v = t.mutable_values()[i];
                       if (std::abs(std::abs(v) - 1.0) < 1e-3) v *= 1.01;
                     }
                     return std::vector<Tensor>{t};
                   },
                   [](auto in) { return clamp(in[0], -1.0, 1.0); }});
  cases.push_back({"sum", unary, [](auto in) { return sum(in[0]); }});
  cases.push_back({"mean", unary, [](auto in) { return mean(in[0]); }});
  cases.push_back({"fanout", unary, [](auto in) { return mul(add(in[0], scalar_mul(in[0], 2.0)), in[0]); }});
  cases.push_back({"reshape", unary, [](auto in) { return reshape(in[0], {in[0].numel()}); }});
  cases.push_back({"concat",
                   [](Rng& rng) {
                     const Index cols = pick(rng, 1, 6);
                     std::vector<Tensor> parts;
                     for (Index i = 0, n = pick(rng, 1, 3); i < n; ++i) parts.push_back(random_tensor(rng, {pick(rng, 1, 4), cols}));
                     return parts;
                   },
                   [](auto in) { return concat(in); }});
  cases.push_back({"slice",
                   [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, {pick(rng, 2, 6), pick(rng, 1, 6)})}; },
                   [](auto in) { return slice(in[0], 1, in[0].dim(0)); }});
  cases.push_back({"gather", unary, [](auto in) {
                     std::vector<Index> idx;
                     for (Index i = 0; i < 2 * in[0].numel(); ++i) idx.push_back((i * 7 + 3) % in[0].numel());
                     return gather(in[0], idx, {static_cast<Index>(idx.size())});
                   }});
  cases.push_back({"upsample_nearest2x",
                   [](Rng& rng) {
                     return std::vector<Tensor>{random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)})};
                   },
                   [](auto in) { return upsample_nearest2x(in[0]); }});
  cases.push_back({"conv2d",
                   [](Rng& rng) {
                     const ConvSetup s = random_conv(rng);
                     Tensor stride_pad({2}, 0.0);
                     stride_pad.mutable_values() << static_cast<double>(s.stride), static_cast<double>(s.pad);
                     return std::vector<Tensor>{random_tensor(rng, {s.n, s.c, s.h, s.w}), random_tensor(rng, {s.o, s.c, s.k, s.k}),
                                                random_tensor(rng, {s.o}), stride_pad};
                   },
                   [](auto in) {
                     return conv2d(in[0], in[1], in[2], static_cast<Index>(in[3][0]), static_cast<Index>(in[3][1]));
                   }});
  cases.push_back({"deformable_conv2d",
                   [](Rng& rng) {
                     const ConvSetup s = random_conv(rng);
                     const Index oh = (s.h + 2 * s.pad - s.k) / s.stride + 1, ow = (s.w + 2 * s.pad - s.k) / s.stride + 1;
                     Tensor offsets({s.n, 2 * s.k * s.k, oh, ow}, 0.0, true);
                     for (Index i = 0; i < offsets.numel(); ++i) offsets.mutable_values()[i] = fractional(rng, -1.5, 1.5);
                     Tensor stride_pad({2}, 0.0);
                     stride_pad.mutable_values() << static_cast<double>(s.stride), static_cast<double>(s.pad);
                     return std::vector<Tensor>{random_tensor(rng, {s.n, s.c, s.h, s.w}), random_tensor(rng, {s.o, s.c, s.k, s.k}),
                                                offsets, random_tensor(rng, {s.o}), stride_pad};
                   },
                   [](auto in) {
                     return deformable_conv2d(in[0], in[1], in[2], in[3], static_cast<Index>(in[4][0]),
                                              static_cast<Index>(in[4][1]));
                   }});
  cases.push_back({"bilinear_sample",
                   [](Rng& rng) {
                     const Index h = pick(rng, 2, 6), w = pick(rng, 2, 6);
                     Tensor yx({2}, 0.0);
                     yx.mutable_values() << fractional(rng, -0.9, static_cast<double>(h) - 0.1),
                         fractional(rng, -0.9, static_cast<double>(w) - 0.1);
                     return std::vector<Tensor>{random_tensor(rng, {pick(rng, 1, 4), h, w}), yx};
                   },
                   [](auto in) { return bilinear_sample(in[0], in[1][0], in[1][1]); }});
  cases.push_back({"roi_align",
                   [](Rng& rng) {
                     const Index h = pick(rng, 3, 6), w = pick(rng, 3, 6);
                     const Box b = random_box(rng, 2.0 * static_cast<double>(std::min(h, w)));
                     Tensor box({4}, 0.0);
                     box.mutable_values() << b.x1, b.y1, b.x2, b.y2;
                     return std::vector<Tensor>{random_tensor(rng, {pick(rng, 1, 3), h, w}), box};
                   },
                   [](auto in) { return roi_align(in[0], box_row(in[1], 0), 3, 0.5); }});
  cases.push_back({"multiscale_roi_align",
                   [](Rng& rng) {
                     const Index c = pick(rng, 1, 3);
                     Tensor boxes({3, 4}, 0.0);
                     for (Index r = 0; r < 3; ++r) {
                       const Box b = random_box(rng, 16.0);
                       boxes.mutable_values().segment(4 * r, 4) << b.x1, b.y1, b.x2, b.y2;
                     }
                     return std::vector<Tensor>{random_tensor(rng, {2, c, 4, 4}), random_tensor(rng, {2, c, 2, 2}), boxes};
                   },
                   [](auto in) {
                     const std::vector<Tensor> levels = {in[0], in[1]};
                     const std::vector<double> scales = {0.25, 0.125};
                     const std::vector<RoiRequest> rois = {{0, 0, box_row(in[2], 0)}, {1, 1, box_row(in[2], 1)},
                                                           {1, 0, box_row(in[2], 2)}};
                     return multiscale_roi_align(levels, scales, rois, 2);
                   }});
  cases.push_back({"linear",
                   [](Rng& rng) {
                     const Index n = pick(rng, 1, 6), d = pick(rng, 1, 6), k = pick(rng, 1, 6);
                     return std::vector<Tensor>{random_tensor(rng, {n, d}), random_tensor(rng, {k, d}), random_tensor(rng, {k})};
                   },
                   [](auto in) { return linear(in[0], in[1], in[2]); }});
  cases.push_back({"maxpool2d",
                   [](Rng& rng) {
                     return std::vector<Tensor>{distinct_values(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 6), pick(rng, 2, 6)})};
                   },
                   [](auto in) { return maxpool2d(in[0], 2, 2); }});
  cases.push_back({"global_maxpool",
                   [](Rng& rng) {
                     return std::vector<Tensor>{distinct_values(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 6), pick(rng, 1, 6)})};
                   },
                   [](auto in) { return global_maxpool(in[0]); }});
  cases.push_back({"softmax",
                   [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, {pick(rng, 1, 6), pick(rng, 2, 6)}, true, -3.0, 3.0)}; },
                   [](auto in) { return softmax(in[0]); }});
  cases.push_back({"bce_with_logits",
                   [](Rng& rng) {
                     const Index k = pick(rng, 1, 6);
                     Tensor targets({k}, 0.0);
                     for (Index i = 0; i < k; ++i) targets.mutable_values()[i] = static_cast<double>(pick(rng, 0, 1));
                     return std::vector<Tensor>{random_tensor(rng, {k}, true, -4.0, 4.0), targets};
                   },
                   [](auto in) {
                     std::vector<double> t(in[1].values().data(), in[1].values().data() + in[1].numel());
                     return bce_with_logits(in[0], t);
                   }});
  cases.push_back({"softmax_cross_entropy",
                   [](Rng& rng) {
                     const Index n = pick(rng, 1, 6), c = pick(rng, 2, 4);
                     Tensor labels({n}, 0.0);
                     for (Index i = 0; i < n; ++i) labels.mutable_values()[i] = static_cast<double>(pick(rng, 0, c - 1));
                     return std::vector<Tensor>{random_tensor(rng, {n, c}, true, -3.0, 3.0), labels};
                   },
                   [](auto in) {
                     std::vector<int> l;
                     for (Index i = 0; i < in[1].numel(); ++i) l.push_back(static_cast<int>(in[1][i]));
                     return softmax_cross_entropy(in[0], l);
                   }});
  cases.push_back({"decode_deltas",
                   [](Rng& rng) {
                     const Index k = pick(rng, 1, 6);
                     Tensor anchors({k, 4}, 0.0);
                     for (Index i = 0; i < k; ++i) {
                       const Box b = random_box(rng, 64.0);
                       anchors.mutable_values().segment(4 * i, 4) << b.x1, b.y1, b.x2, b.y2;
                     }
                     return std::vector<Tensor>{random_tensor(rng, {k, 4}, true, -0.5, 0.5), anchors};
                   },
                   [](auto in) {
                     std::vector<Box> anchors;
                     for (Index i = 0; i < in[1].dim(0); ++i) anchors.push_back(box_row(in[1], i));
                     return decode_deltas(anchors, in[0]);
                   }});
  cases.push_back({"giou_loss",
                   [](Rng& rng) {
                     const Index k = pick(rng, 1, 6);
                     Tensor pred({k, 4}, 0.0, true), target({k, 4}, 0.0);
                     for (Index i = 0; i < k; ++i) {
                       Box p, t;
                       do {
                         p = random_box(rng, 20.0);
                         t = random_box(rng, 20.0);
                       } while (std::min({std::abs(p.x1 - t.x1), std::abs(p.y1 - t.y1), std::abs(p.x2 - t.x2),
                                          std::abs(p.y2 - t.y2), std::abs(p.x1 - t.x2), std::abs(p.x2 - t.x1),
                                          std::abs(p.y1 - t.y2), std::abs(p.y2 - t.y1)}) < 1e-3);
                       pred.mutable_values().segment(4 * i, 4) << p.x1, p.y1, p.x2, p.y2;
                       target.mutable_values().segment(4 * i, 4) << t.x1, t.y1, t.x2, t.y2;
                     }
                     return std::vector<Tensor>{pred, target};
                   },
                   [](auto in) {
                     std::vector<Box> targets;
                     for (Index i = 0; i < in[1].dim(0); ++i) targets.push_back(box_row(in[1], i));
                     return giou_loss(in[0], targets);
                   }});
  return cases;
}

}  // namespace dhn
