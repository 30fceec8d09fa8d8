#include "dhn/augment.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace {

using namespace dhn;

Tensor gradient_image(Index h, Index w) {
  Buffer v(h * w);
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) v[i * w + j] = static_cast<double>((3 * i + 5 * j) % 256);
  return Tensor({1, h, w}, std::move(v));
}

SamplePlan plan_of(std::vector<SampledTransform> t) {
  SamplePlan p;
  p.transforms = std::move(t);
  return p;
}

TEST(Strategy, ParseRoundTrip) {
  for (const char* s : {"id", "bin:0.9", "uni", "bin:0"}) {
    EXPECT_EQ(AugStrategy::parse(AugStrategy::parse(s).str()), AugStrategy::parse(s)) << s;
  }
  EXPECT_EQ(AugStrategy::parse("bin:0.9").p, 0.9);
  EXPECT_THROW(AugStrategy::parse("bin:1.5"), std::invalid_argument);
  EXPECT_THROW(AugStrategy::parse("heavy"), std::invalid_argument);
}

TEST(Binomial, DegenerateProbabilities) {
  std::mt19937_64 g(1);
  int flips = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const SamplePlan zero = sample_binomial(0.0, g);
    for (const auto& t : zero.transforms) {
      EXPECT_EQ(t.kind, TransformKind::HFlip);
    }
    flips += zero.contains(TransformKind::HFlip);
    const SamplePlan one = sample_binomial(1.0, g);
    for (TransformKind k : kTransformTable) {
      if (k != TransformKind::HFlip) {
        EXPECT_TRUE(one.contains(k));
      }
    }
  }
  EXPECT_NEAR(flips / static_cast<double>(n), 0.5, 0.02);
}

TEST(Binomial, PlansFollowTableOrder) {
  std::mt19937_64 g(2);
  for (int i = 0; i < 1000; ++i) {
    const SamplePlan p = sample_binomial(0.6, g);
    for (std::size_t k = 1; k < p.transforms.size(); ++k) {
      EXPECT_LT(static_cast<int>(p.transforms[k - 1].kind), static_cast<int>(p.transforms[k].kind));
    }
  }
}

TEST(Binomial, RatesAndMeanLength) {
  std::mt19937_64 g(3);
  const int n = 100000;
  std::map<TransformKind, int> seen;
  double length = 0;
  for (int i = 0; i < n; ++i) {
    const SamplePlan p = sample_binomial(0.9, g);
    length += static_cast<double>(p.transforms.size());
    for (const auto& t : p.transforms) ++seen[t.kind];
  }
  for (TransformKind k : kTransformTable) {
    const double expected = k == TransformKind::HFlip ? 0.5 : 0.9;
    EXPECT_NEAR(seen[k] / static_cast<double>(n), expected, 0.01) << transform_name(k);
  }
  EXPECT_NEAR(length / n, 7.7, 0.03);
}

TEST(Uniform, SingleTransformAtOneNinth) {
  std::mt19937_64 g(4);
  const int n = 90000;
  std::map<TransformKind, int> seen;
  for (int i = 0; i < n; ++i) {
    const SamplePlan p = sample_uniform(g);
    ASSERT_EQ(p.transforms.size(), 1u);
    ++seen[p.transforms[0].kind];
  }
  for (TransformKind k : kTransformTable) EXPECT_NEAR(seen[k] / static_cast<double>(n), 1.0 / 9.0, 0.005);
}

TEST(Plans, ReplayFromSeed) {
  std::mt19937_64 g(5);
  for (int i = 0; i < 200; ++i) {
    const SamplePlan p = sample_binomial(0.7, g);
    const SamplePlan q = binomial_plan_from_seed(0.7, p.seed);
    ASSERT_EQ(p.transforms.size(), q.transforms.size());
    for (std::size_t k = 0; k < p.transforms.size(); ++k) {
      EXPECT_EQ(p.transforms[k].kind, q.transforms[k].kind);
      EXPECT_EQ(p.transforms[k].a, q.transforms[k].a);
      EXPECT_EQ(p.transforms[k].b, q.transforms[k].b);
      EXPECT_EQ(p.transforms[k].noise_seed, q.transforms[k].noise_seed);
    }
    const SamplePlan u = sample_uniform(g);
    EXPECT_EQ(u.transforms[0].kind, uniform_plan_from_seed(u.seed).transforms[0].kind);
  }
}

TEST(Plans, ParametersStayInRange) {
  std::mt19937_64 g(6);
  for (int i = 0; i < 5000; ++i) {
    for (const auto& t : sample_binomial(1.0, g).transforms) {
      switch (t.kind) {
        case TransformKind::Brightness: EXPECT_LE(std::abs(t.a), kBrightnessRange); break;
        case TransformKind::Contrast: EXPECT_LE(std::abs(t.a), kContrastRange); break;
        case TransformKind::Scale: EXPECT_LE(std::abs(t.a), kScaleRange); break;
        case TransformKind::Translate:
          EXPECT_LE(std::abs(t.a), kTranslateRange);
          EXPECT_LE(std::abs(t.b), kTranslateRange);
          break;
        case TransformKind::Shear: EXPECT_LE(std::abs(t.a), kShearRangeDeg); break;
        case TransformKind::Rotate: EXPECT_LE(std::abs(t.a), kRotateRangeDeg); break;
        default: break;
      }
    }
  }
}

TEST(Apply, EmptyPlanIsIdentity) {
  const Tensor img = gradient_image(12, 10);
  const std::vector<Box> boxes = {{1, 2, 5, 7}};
  const Augmented a = apply(SamplePlan{}, img, boxes);
  for (Index i = 0; i < img.numel(); ++i) EXPECT_EQ(a.image[i], img[i]);
  EXPECT_EQ(a.boxes, boxes);
  EXPECT_FALSE(a.image.same_storage(img));
}

TEST(Apply, HorizontalFlip) {
  const Tensor img = gradient_image(50, 100);
  const Augmented a = apply(plan_of({{TransformKind::HFlip}}), img, {{10, 20, 30, 40}});
  ASSERT_EQ(a.boxes.size(), 1u);
  EXPECT_NEAR(a.boxes[0].x1, 70, 1e-12);
  EXPECT_NEAR(a.boxes[0].y1, 20, 1e-12);
  EXPECT_NEAR(a.boxes[0].x2, 90, 1e-12);
  EXPECT_NEAR(a.boxes[0].y2, 40, 1e-12);
  for (Index i = 0; i < 50; ++i)
    for (Index j = 0; j < 100; ++j) EXPECT_NEAR(a.image[i * 100 + j], img[i * 100 + (99 - j)], 1e-9);
}

TEST(Apply, DoubleFlipRestores) {
  const Tensor img = gradient_image(16, 24);
  const Augmented a = apply(plan_of({{TransformKind::HFlip}, {TransformKind::HFlip}}), img, {{3, 4, 9, 11}});
  for (Index i = 0; i < img.numel(); ++i) EXPECT_NEAR(a.image[i], img[i], 1e-9);
  EXPECT_NEAR(a.boxes[0].x1, 3, 1e-12);
  EXPECT_NEAR(a.boxes[0].x2, 9, 1e-12);
}

TEST(Apply, RotatedBrightPixelFollowsBoxCentre) {
  const Index h = 64, w = 64;
  const Box box{36, 20, 44, 28};  // centre (40, 24)
  Tensor img({1, h, w}, 0.0);
  img.mutable_values()[24 * w + 40] = 255.0;  // pixel whose centre is (40.5, 24.5)
  for (double deg : {45.0, -45.0, 30.0}) {
    const SamplePlan p = plan_of({{TransformKind::Rotate, deg}});
    const Augmented a = apply(p, img, {box});
    Index best = 0;
    a.image.values().maxCoeff(&best);
    const double px = static_cast<double>(best % w) + 0.5, py = static_cast<double>(best / w) + 0.5;
    const Eigen::Vector3d c = p.affine(w, h) * Eigen::Vector3d(40.5, 24.5, 1.0);
    EXPECT_LE(std::hypot(px - c.x(), py - c.y()), 1.0) << deg;
    ASSERT_EQ(a.boxes.size(), 1u);
    const Box& r = a.boxes[0];
    const Eigen::Vector3d bc = p.affine(w, h) * Eigen::Vector3d(40, 24, 1);
    EXPECT_NEAR(0.5 * (r.x1 + r.x2), bc.x(), 1e-9);
    EXPECT_NEAR(0.5 * (r.y1 + r.y2), bc.y(), 1e-9);
  }
}

TEST(Apply, BoxesAreClippedAndSmallOnesDropped) {
  const Tensor img = gradient_image(32, 32);
  const SamplePlan shift = plan_of({{TransformKind::Translate, -0.1, 0.0}});  // x -= 3.2
  const Augmented a = apply(shift, img, {{0, 0, 8, 8}, {2, 0, 4, 1.5}, {0, 10, 2, 20}});
  ASSERT_EQ(a.boxes.size(), 1u);
  EXPECT_NEAR(a.boxes[0].x1, 0.0, 1e-12);
  EXPECT_NEAR(a.boxes[0].x2, 4.8, 1e-12);
  EXPECT_NEAR(a.boxes[0].y2, 8.0, 1e-12);
}

TEST(Apply, IlluminationKeepsBoxesAndClamps) {
  const Tensor img = gradient_image(20, 20);
  const std::vector<Box> boxes = {{2, 2, 9, 9}};
  const Augmented a = apply(plan_of({{TransformKind::Brightness, 0.15}, {TransformKind::GaussianNoise, 0, 0, 7}}),
                            img, boxes);
  EXPECT_EQ(a.boxes, boxes);
  EXPECT_GE(a.image.values().minCoeff(), 0.0);
  EXPECT_LE(a.image.values().maxCoeff(), 255.0);
  const Augmented b = apply(plan_of({{TransformKind::GaussianNoise, 0, 0, 7}}), img, boxes);
  const Augmented c = apply(plan_of({{TransformKind::GaussianNoise, 0, 0, 7}}), img, boxes);
  for (Index i = 0; i < img.numel(); ++i) EXPECT_EQ(b.image[i], c.image[i]);
}

TEST(Apply, ContrastPreservesMeanAwayFromClamp) {
  Tensor img({1, 8, 8}, 100.0);
  for (Index i = 0; i < 32; ++i) img.mutable_values()[i] = 140.0;
  const Augmented a = apply(plan_of({{TransformKind::Contrast, 0.1}}), img, {});
  EXPECT_NEAR(a.image.values().mean(), img.values().mean(), 1e-12);
  EXPECT_NEAR(a.image[0] - a.image[63], 44.0, 1e-12);
}

TEST(HistEq, ConstantTwoLevelAndPermutation) {
  const Tensor flat({1, 6, 6}, 77.0);
  const Tensor f = hist_eq(flat);
  for (Index i = 0; i < f.numel(); ++i) EXPECT_EQ(f[i], 77.0);

  Tensor two({1, 4, 4}, 0.0);
  for (Index i = 8; i < 16; ++i) two.mutable_values()[i] = 255.0;
  const Tensor t = hist_eq(two);
  for (Index i = 0; i < 8; ++i) EXPECT_EQ(t[i], 0.0);
  for (Index i = 8; i < 16; ++i) EXPECT_EQ(t[i], 255.0);

  const Tensor img = gradient_image(9, 7);
  std::vector<Index> perm(static_cast<std::size_t>(img.numel()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  Buffer shuffled(img.numel());
  for (Index i = 0; i < img.numel(); ++i) shuffled[i] = img[perm[static_cast<std::size_t>(i)]];
  const Tensor a = hist_eq(img), b = hist_eq(Tensor({1, 9, 7}, shuffled));
  for (Index i = 0; i < img.numel(); ++i) EXPECT_EQ(b[i], a[perm[static_cast<std::size_t>(i)]]);
}

Scan make_scan(int label) {
  Scan s;
  s.image = gradient_image(48, 48);
  s.global_label = label;
  if (label) s.gt_boxes = {{20, 20, 28, 28}};
  s.scan_id = "p0_s0";
  return s;
}

TEST(DhaPair, IdentityViewsEqualInput) {
  std::mt19937_64 g(7);
  const Scan s = make_scan(1);
  const auto views = dha_pair(s, AugStrategy::identity(), AugStrategy::identity(), g);
  EXPECT_EQ(views[0].route, Route::global);
  EXPECT_EQ(views[1].route, Route::local);
  for (const View& v : views)
    for (Index i = 0; i < s.image.numel(); ++i) EXPECT_EQ(v.image[i], s.image[i]);
  EXPECT_TRUE(views[0].boxes.empty());
  EXPECT_EQ(views[1].boxes, s.gt_boxes);
  EXPECT_EQ(views[0].global_label, 1);
}

TEST(DhaPair, RoutingAndBoxesUnderHeavyAugmentation) {
  std::mt19937_64 g(8);
  for (int i = 0; i < 300; ++i) {
    const Scan s = make_scan(i % 2);
    const auto views = dha_pair(s, AugStrategy::binomial(0.9), AugStrategy::binomial(0.9), g);
    EXPECT_TRUE(views[0].boxes.empty());
    EXPECT_EQ(views[1].global_label, s.global_label);
    if (s.global_label) {
      EXPECT_FALSE(views[1].boxes.empty());
    }
    // Boxes of the local view are the affine image of the originals.
    if (!views[1].boxes.empty() && views[1].boxes.size() == s.gt_boxes.size()) {
      const Eigen::Matrix3d a = views[1].plan.affine(48, 48);
      const Box& b = s.gt_boxes[0];
      double x1 = 1e9, x2 = -1e9;
      for (double x : {b.x1, b.x2})
        for (double y : {b.y1, b.y2}) {
          const Eigen::Vector3d p = a * Eigen::Vector3d(x, y, 1);
          x1 = std::min(x1, p.x());
          x2 = std::max(x2, p.x());
        }
      EXPECT_NEAR(views[1].boxes[0].x1, std::clamp(x1, 0.0, 48.0), 1e-9);
      EXPECT_NEAR(views[1].boxes[0].x2, std::clamp(x2, 0.0, 48.0), 1e-9);
    }
  }
}

TEST(DhaPair, SameSeedSameViews) {
  const Scan s = make_scan(1);
  std::mt19937_64 a(9), b(9);
  const auto va = dha_pair(s, AugStrategy::binomial(0.9), AugStrategy::uniform(), a);
  const auto vb = dha_pair(s, AugStrategy::binomial(0.9), AugStrategy::uniform(), b);
  for (int k = 0; k < 2; ++k)
    for (Index i = 0; i < s.image.numel(); ++i) EXPECT_EQ(va[k].image[i], vb[k].image[i]);
}

}  // namespace
