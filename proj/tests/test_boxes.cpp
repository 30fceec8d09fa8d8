#include "dhn/boxes.hpp"
#include "dhn/gradcheck.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using namespace dhn;

TEST(Iou, HandValues) {
  const Box a{0, 0, 2, 2}, b{1, 1, 3, 3};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 7.0);
  EXPECT_EQ(giou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(giou(a, b), -5.0 / 63.0);
  EXPECT_EQ(giou_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(giou_loss(a, b), 68.0 / 63.0);
}

TEST(Iou, MatchesAreaOracle) {
  std::mt19937_64 g(1);
  for (int i = 0; i < 10000; ++i) {
    const Box a = oracle::random_box(g), b = oracle::random_box(g);
    EXPECT_NEAR(iou(a, b), oracle::iou(a, b), 1e-12);
    EXPECT_NEAR(giou(a, b), oracle::giou(a, b), 1e-12);
    EXPECT_NEAR(giou_loss(a, b), 1.0 - oracle::giou(a, b), 1e-12);
  }
}

TEST(Iou, SimilarityInvariance) {
  std::mt19937_64 g(2);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int i = 0; i < 1000; ++i) {
    const Box a = oracle::random_box(g), b = oracle::random_box(g);
    const double v = giou(a, b);
    EXPECT_NEAR(giou(a.scaled(3.0), b.scaled(3.0)), v, 1e-12);
    const double dx = shift(g), dy = shift(g);
    const Box ta{a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy}, tb{b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy};
    EXPECT_NEAR(giou(ta, tb), v, 1e-12);
  }
}

TEST(Iou, Bounds) {
  std::mt19937_64 g(3);
  for (int i = 0; i < 2000; ++i) {
    const Box a = oracle::random_box(g), b = oracle::random_box(g);
    const double v = iou(a, b), gv = giou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_GT(gv, -1.0);
    EXPECT_LE(gv, v + 1e-15);
    EXPECT_NEAR(v, iou(b, a), 1e-15);
  }
}

TEST(Deltas, HandValuesAndInverse) {
  const BoxDeltas zero = encode_deltas({1, 2, 5, 9}, {1, 2, 5, 9});
  EXPECT_EQ(zero.dx, 0.0);
  EXPECT_EQ(zero.dy, 0.0);
  EXPECT_EQ(zero.dw, 0.0);
  EXPECT_EQ(zero.dh, 0.0);
  const BoxDeltas d = encode_deltas({0, 0, 10, 10}, {0, 0, 20, 20});
  EXPECT_DOUBLE_EQ(d.dw, std::log(2.0));
  EXPECT_DOUBLE_EQ(d.dh, std::log(2.0));
  std::mt19937_64 g(4);
  for (int i = 0; i < 1000; ++i) {
    const Box a = oracle::random_box(g), t = oracle::random_box(g);
    const Box r = decode_deltas(a, encode_deltas(a, t));
    EXPECT_NEAR(r.x1, t.x1, 1e-10);
    EXPECT_NEAR(r.y1, t.y1, 1e-10);
    EXPECT_NEAR(r.x2, t.x2, 1e-10);
    EXPECT_NEAR(r.y2, t.y2, 1e-10);
  }
  EXPECT_THROW(encode_deltas({0, 0, 0, 5}, {0, 0, 1, 1}), std::invalid_argument);
}

TEST(Deltas, DecodeClampsHugeScales) {
  const Box b = decode_deltas({0, 0, 16, 16}, {0, 0, 100, 100});
  EXPECT_TRUE(std::isfinite(b.x2));
  EXPECT_NEAR(b.width(), 1000.0, 1e-9);
}

TEST(Nms, HandCases) {
  const std::vector<Box> one = {{0, 0, 1, 1}};
  const std::vector<double> s1 = {0.3};
  EXPECT_EQ(nms(one, s1, 0.5), (std::vector<std::size_t>{0}));
  const std::vector<Box> two = {{0, 0, 4, 4}, {0, 0, 4, 4}};
  const std::vector<double> s2 = {0.8, 0.9};
  EXPECT_EQ(nms(two, s2, 0.5), (std::vector<std::size_t>{1}));
  EXPECT_TRUE(nms({}, {}, 0.5).empty());
}

TEST(Nms, MatchesBruteForce) {
  std::mt19937_64 g(5);
  std::uniform_int_distribution<int> count(0, 64), grid(0, 7);
  std::uniform_real_distribution<double> thr(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    const int n = count(g);
    for (int i = 0; i < n; ++i) {
      boxes.push_back(oracle::random_box(g, 40.0, 2.0));
      scores.push_back(grid(g) / 8.0);
    }
    const double t = thr(g);
    EXPECT_EQ(nms(boxes, scores, t), oracle::nms(boxes, scores, t)) << "trial " << trial;
  }
}

TEST(Anchors, CenterAndCount) {
  const std::vector<LevelShape> one = {{1, 1}};
  const std::vector<double> stride = {8.0};
  const std::vector<std::vector<double>> size = {{16.0}};
  const std::vector<double> ratio = {1.0};
  const AnchorSet a = generate_anchors(one, stride, size, ratio);
  ASSERT_EQ(a.total(), 1u);
  EXPECT_EQ(a.levels[0][0], (Box{-4, -4, 12, 12}));

  const std::vector<LevelShape> shapes = {{8, 8}, {4, 4}, {2, 2}};
  const std::vector<double> strides = {4, 8, 16};
  const std::vector<std::vector<double>> sizes = {{6, 8}, {10, 13}, {17, 24}};
  const std::vector<double> ratios = {0.5, 1.0, 2.0};
  const AnchorSet set = generate_anchors(shapes, strides, sizes, ratios);
  EXPECT_EQ(set.total(), (64 + 16 + 4) * 2u * 3u);
  for (const Box& b : set.flat()) {
    const double area = b.area();
    EXPECT_TRUE(std::abs(area - 36) < 1e-9 || std::abs(area - 64) < 1e-9 || std::abs(area - 100) < 1e-9 ||
                std::abs(area - 169) < 1e-9 || std::abs(area - 289) < 1e-9 || std::abs(area - 576) < 1e-9);
  }
  const AnchorSet square = generate_anchors(shapes, strides, sizes, ratio);
  for (const Box& b : square.flat()) EXPECT_NEAR(b.width(), b.height(), 1e-12);
}

TEST(MatchAnchors, HandCases) {
  const std::vector<Box> anchors = {{0, 0, 4, 4}, {10, 10, 14, 14}, {0, 0, 3, 4}};
  const MatchResult none = match_anchors(anchors, {}, 0.7, 0.3);
  for (auto l : none.labels) EXPECT_EQ(l, MatchLabel::negative);
  const std::vector<Box> gt = {{10, 10, 14, 14}};
  const MatchResult m = match_anchors(anchors, gt, 0.7, 0.3);
  EXPECT_EQ(m.labels[1], MatchLabel::positive);
  EXPECT_EQ(m.matched_gt[1], 0);
  EXPECT_EQ(m.labels[0], MatchLabel::negative);
  EXPECT_THROW(match_anchors(anchors, gt, 0.3, 0.7), std::invalid_argument);
}

TEST(MatchAnchors, MatchesBruteForce) {
  std::mt19937_64 g(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> anchors, gt;
    for (int i = 0; i < 200; ++i) anchors.push_back(oracle::random_box(g, 60.0, 3.0));
    for (int i = 0; i < 5; ++i) gt.push_back(oracle::random_box(g, 60.0, 3.0));
    const MatchResult m = match_anchors(anchors, gt, 0.5, 0.3);
    const oracle::AnchorMatch ref = oracle::match_anchors(anchors, gt, 0.5, 0.3);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      EXPECT_EQ(static_cast<int>(m.labels[a]), ref.labels[a]);
      EXPECT_EQ(m.matched_gt[a], ref.matched[a]);
    }
  }
}

TEST(FpnLevel, ClampsAndIsMonotone) {
  EXPECT_EQ(assign_fpn_level({0, 0, 1, 1}, 2, 4), 2);
  EXPECT_EQ(assign_fpn_level({0, 0, 224, 224}, 2, 4), 4);
  EXPECT_EQ(assign_fpn_level({0, 0, 2000, 2000}, 2, 4), 4);
  int prev = 2;
  for (double side = 1; side < 1000; side *= 1.05) {
    const int k = assign_fpn_level({0, 0, side, side}, 2, 4);
    EXPECT_GE(k, prev);
    prev = k;
  }
}

TEST(GiouLoss, DifferentiableFormMatchesScalar) {
  const std::vector<Box> targets = {{1, 1, 3, 3}, {0, 0, 5, 2}};
  const Tensor pred = Tensor::from({2, 4}, {0, 0, 2, 2, 0.5, 0.5, 4, 3});
  const Tensor l = giou_loss(pred, targets);
  EXPECT_DOUBLE_EQ(l[0], 68.0 / 63.0);
  EXPECT_NEAR(l[1], giou_loss(Box{0.5, 0.5, 4, 3}, targets[1]), 1e-15);

  std::mt19937_64 g(7);
  std::vector<Tensor> in = {Tensor::from({2, 4}, {0.2, 0.1, 2.3, 2.1, 0.5, 0.5, 4, 3}, true)};
  const GraphFn graph = [&](std::span<const Tensor> t) { return giou_loss(t[0], targets); };
  EXPECT_LT(gradient_relative_error(graph, in, 1e-6, g), 1e-4);
}

}  // namespace
