#include "dhn/augment.hpp"

#include "kernels.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace dhn {

using kernels::BilinearStencil;
using kernels::require;

std::string_view transform_name(TransformKind kind) {
  switch (kind) {
    case TransformKind::HistEq: return "HistEq";
    case TransformKind::GaussianNoise: return "GaussianNoise";
    case TransformKind::Brightness: return "Brightness";
    case TransformKind::Contrast: return "Contrast";
    case TransformKind::Scale: return "Scale";
    case TransformKind::Translate: return "Translate";
    case TransformKind::Shear: return "Shear";
    case TransformKind::HFlip: return "HFlip";
    case TransformKind::Rotate: return "Rotate";
  }
  return "?";
}

bool is_geometric(TransformKind kind) {
  switch (kind) {
    case TransformKind::Scale:
    case TransformKind::Translate:
    case TransformKind::Shear:
    case TransformKind::HFlip:
    case TransformKind::Rotate:
      return true;
    default:
      return false;
  }
}

bool SamplePlan::contains(TransformKind kind) const {
  return std::any_of(transforms.begin(), transforms.end(), [&](const auto& t) { return t.kind == kind; });
}

namespace {

Eigen::Matrix3d translation(double tx, double ty) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 2) = tx;
  m(1, 2) = ty;
  return m;
}

/// `linear` applied about the point (cx, cy).
Eigen::Matrix3d about(const Eigen::Matrix2d& linear, double cx, double cy) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m.topLeftCorner<2, 2>() = linear;
  return translation(cx, cy) * m * translation(-cx, -cy);
}

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace

Eigen::Matrix3d SamplePlan::affine(Index width, Index height) const {
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const double cx = 0.5 * w, cy = 0.5 * h;
  Eigen::Matrix3d total = Eigen::Matrix3d::Identity();
  for (const auto& t : transforms) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    Eigen::Matrix2d lin;
    switch (t.kind) {
      case TransformKind::Scale:
        m = about(Eigen::Matrix2d::Identity() * (1.0 + t.a), cx, cy);
        break;
      case TransformKind::Translate:
        m = translation(t.a * w, t.b * h);
        break;
      case TransformKind::Shear:
        lin << 1.0, std::tan(radians(t.a)), 0.0, 1.0;
        m = about(lin, cx, cy);
        break;
      case TransformKind::HFlip:
        m(0, 0) = -1.0;
        m(0, 2) = w;
        break;
      case TransformKind::Rotate: {
        const double c = std::cos(radians(t.a)), s = std::sin(radians(t.a));
        lin << c, -s, s, c;
        m = about(lin, cx, cy);
        break;
      }
      default:
        continue;
    }
    total = m * total;
  }
  return total;
}

AugStrategy AugStrategy::binomial(double p) {
  require(p >= 0.0 && p <= 1.0, "binomial strategy needs p in [0,1], got " + std::to_string(p));
  return {Mode::binomial, p};
}

AugStrategy AugStrategy::parse(std::string_view text) {
  if (text == "id") return identity();
  if (text == "uni") return uniform();
  if (text.starts_with("bin:")) {
    const std::string_view num = text.substr(4);
    double p = 0.0;
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), p);
    if (ec == std::errc() && ptr == num.data() + num.size()) return binomial(p);
  }
  throw std::invalid_argument("unknown augmentation strategy '" + std::string(text) +
                              "' (expected id, bin:<p> or uni)");
}

std::string AugStrategy::str() const {
  switch (mode) {
    case Mode::identity: return "id";
    case Mode::uniform: return "uni";
    case Mode::binomial: {
      std::ostringstream os;
      os << "bin:" << p;
      return os.str();
    }
  }
  return "?";
}

namespace {

SampledTransform draw_parameters(TransformKind kind, std::mt19937_64& g) {
  auto sym = [&](double r) { return std::uniform_real_distribution<double>(-r, r)(g); };
  SampledTransform t{kind};
  switch (kind) {
    case TransformKind::GaussianNoise: t.noise_seed = g(); break;
    case TransformKind::Brightness: t.a = sym(kBrightnessRange); break;
    case TransformKind::Contrast: t.a = sym(kContrastRange); break;
    case TransformKind::Scale: t.a = sym(kScaleRange); break;
    case TransformKind::Translate:
      t.a = sym(kTranslateRange);
      t.b = sym(kTranslateRange);
      break;
    case TransformKind::Shear: t.a = sym(kShearRangeDeg); break;
    case TransformKind::Rotate: t.a = sym(kRotateRangeDeg); break;
    case TransformKind::HistEq:
    case TransformKind::HFlip:
      break;
  }
  return t;
}

}  // namespace

SamplePlan binomial_plan_from_seed(double p, std::uint64_t seed) {
  require(p >= 0.0 && p <= 1.0, "sample_binomial: p must lie in [0,1], got " + std::to_string(p));
  std::mt19937_64 g(seed);
  SamplePlan plan;
  plan.seed = seed;
  for (TransformKind kind : kTransformTable) {
    const double rate = kind == TransformKind::HFlip ? 0.5 : p;
    if (std::bernoulli_distribution(rate)(g)) plan.transforms.push_back(draw_parameters(kind, g));
  }
  return plan;
}

SamplePlan uniform_plan_from_seed(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  SamplePlan plan;
  plan.seed = seed;
  const auto pick = std::uniform_int_distribution<std::size_t>(0, kTransformTable.size() - 1)(g);
  plan.transforms.push_back(draw_parameters(kTransformTable[pick], g));
  return plan;
}

SamplePlan sample_binomial(double p, std::mt19937_64& rng) { return binomial_plan_from_seed(p, rng()); }
SamplePlan sample_uniform(std::mt19937_64& rng) { return uniform_plan_from_seed(rng()); }

SamplePlan sample_plan(const AugStrategy& strategy, std::mt19937_64& rng) {
  switch (strategy.mode) {
    case AugStrategy::Mode::binomial: return sample_binomial(strategy.p, rng);
    case AugStrategy::Mode::uniform: return sample_uniform(rng);
    case AugStrategy::Mode::identity: break;
  }
  SamplePlan plan;
  plan.seed = rng();
  return plan;
}

Tensor hist_eq(const Tensor& image) {
  const Buffer& v = image.values();
  auto bin = [](double x) { return static_cast<int>(std::clamp(std::lround(x), 0L, 255L)); };
  std::array<Index, 256> cdf{};
  for (Index i = 0; i < v.size(); ++i) ++cdf[static_cast<std::size_t>(bin(v[i]))];
  for (std::size_t k = 1; k < cdf.size(); ++k) cdf[k] += cdf[k - 1];
  const Index total = v.size();
  Index cdf_min = 0;
  for (Index c : cdf) {
    if (c > 0) {
      cdf_min = c;
      break;
    }
  }
  if (total == cdf_min) return image.detach();  // a single occupied bin
  Buffer out(v.size());
  const double denom = static_cast<double>(total - cdf_min);
  for (Index i = 0; i < v.size(); ++i) {
    const Index c = cdf[static_cast<std::size_t>(bin(v[i]))];
    out[i] = std::round(static_cast<double>(c - cdf_min) / denom * 255.0);
  }
  return Tensor(image.shape(), std::move(out));
}

Augmented apply(const SamplePlan& plan, const Tensor& image, const std::vector<Box>& boxes) {
  require(image.rank() == 3 && image.dim(0) == 1, "apply: image must be [1,H,W], got " + shape_str(image.shape()));
  const Index h = image.dim(1), w = image.dim(2);
  Tensor current = image.detach();
  bool geometric = false;
  for (const auto& t : plan.transforms) {
    Buffer& v = current.mutable_values();
    switch (t.kind) {
      case TransformKind::HistEq:
        current = hist_eq(current);
        break;
      case TransformKind::GaussianNoise: {
        std::mt19937_64 g(t.noise_seed);
        std::normal_distribution<double> noise(0.0, kNoiseSigma);
        for (Index i = 0; i < v.size(); ++i) v[i] += noise(g);
        break;
      }
      case TransformKind::Brightness:
        v *= 1.0 + t.a;
        break;
      case TransformKind::Contrast: {
        const double m = v.mean();
        v = (v - m) * (1.0 + t.a) + m;
        break;
      }
      default:
        geometric = true;
    }
  }

  Augmented out;
  const Eigen::Matrix3d a = plan.affine(w, h);
  if (geometric && !a.isIdentity(0.0)) {
    const Eigen::Matrix3d inv = a.inverse();
    Buffer resampled(h * w);
    const double* src = current.values().data();
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const Eigen::Vector3d q = inv * Eigen::Vector3d(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5, 1.0);
        resampled[i * w + j] = BilinearStencil(q.y() - 0.5, q.x() - 0.5).read(src, h, w);
      }
    }
    current = Tensor({1, h, w}, std::move(resampled));
  }
  current.mutable_values() = current.values().cwiseMax(0.0).cwiseMin(255.0);
  out.image = current;

  const double wd = static_cast<double>(w), hd = static_cast<double>(h);
  for (const Box& b : boxes) {
    Box mapped = b;
    if (geometric) {
      double x1 = INFINITY, y1 = INFINITY, x2 = -INFINITY, y2 = -INFINITY;
      for (const auto& [x, y] : {std::pair{b.x1, b.y1}, {b.x2, b.y1}, {b.x1, b.y2}, {b.x2, b.y2}}) {
        const Eigen::Vector3d p = a * Eigen::Vector3d(x, y, 1.0);
        x1 = std::min(x1, p.x());
        y1 = std::min(y1, p.y());
        x2 = std::max(x2, p.x());
        y2 = std::max(y2, p.y());
      }
      mapped = Box{x1, y1, x2, y2};
    }
    mapped = mapped.clipped(wd, hd);
    if (mapped.area() >= kMinBoxArea) out.boxes.push_back(mapped);
  }
  return out;
}

std::array<View, 2> dha_pair(const Scan& scan, const AugStrategy& phi_g, const AugStrategy& phi_l,
                             std::mt19937_64& rng) {
  std::array<View, 2> views;
  View& g = views[0];
  g.route = Route::global;
  g.global_label = scan.global_label;
  g.plan = sample_plan(phi_g, rng);
  g.image = apply(g.plan, scan.image, {}).image;

  View& l = views[1];
  l.route = Route::local;
  l.global_label = scan.global_label;
  const bool needs_boxes = !scan.gt_boxes.empty();
  for (int attempt = 0; attempt <= kMaxResample; ++attempt) {
    l.plan = sample_plan(phi_l, rng);
    Augmented aug = apply(l.plan, scan.image, scan.gt_boxes);
    if (!needs_boxes || !aug.boxes.empty()) {
      l.image = std::move(aug.image);
      l.boxes = std::move(aug.boxes);
      return views;
    }
  }
  l.plan = SamplePlan{};
  Augmented aug = apply(l.plan, scan.image, scan.gt_boxes);
  l.image = std::move(aug.image);
  l.boxes = std::move(aug.boxes);
  return views;
}

}  // namespace dhn
