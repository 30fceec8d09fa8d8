#include "dhn/config.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace {

using namespace dhn;

TEST(Config, DefaultsFollowTrainingProtocol) {
  const RunConfig c;
  EXPECT_EQ(c.train.lr, 5e-5);
  EXPECT_EQ(c.train.momentum, 0.975);
  EXPECT_EQ(c.train.batch_size, 2);
  EXPECT_EQ(c.train.weights.alpha1, 0.69);
  EXPECT_EQ(c.train.weights.alpha2, 1.76);
  EXPECT_EQ(c.train.weights.lambda1, 0.35);
  EXPECT_EQ(c.train.weights.lambda2, 2.5);
  EXPECT_EQ(c.eval.topk, 8u);
  EXPECT_EQ(c.eval.iou_threshold, 0.4);
  EXPECT_EQ(c.train.clip_norm, 0.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ParsesSectionsAndOverrides) {
  const RunConfig c = parse_config(R"(
[data]
dir = /tmp/somewhere
seed = 11
image_size = 64
[model]
anchor_sizes = 6,8;10,13;17,24
stage_widths = 8,16,32
[train]
lr = 7e-4
clip_norm = 10
phi_g = bin:0.9
phi_l = uni
[ablation]
cells = id/id;bin:0.9/uni;uni/bin:0.5
seeds = 4,5
)");
  EXPECT_EQ(c.data.dir, "/tmp/somewhere");
  EXPECT_EQ(c.data.seed, 11u);
  EXPECT_EQ(c.model.image_size, 64);
  EXPECT_EQ(c.data.synth.height, 64);
  EXPECT_EQ(c.model.anchor_sizes, (std::vector<std::vector<double>>{{6, 8}, {10, 13}, {17, 24}}));
  EXPECT_EQ(c.model.stage_widths, (std::array<Index, 3>{8, 16, 32}));
  EXPECT_EQ(c.train.lr, 7e-4);
  EXPECT_EQ(c.train.clip_norm, 10.0);
  EXPECT_EQ(c.train.phi_g, AugStrategy::binomial(0.9));
  EXPECT_EQ(c.train.phi_l, AugStrategy::uniform());
  ASSERT_EQ(c.ablation.cells.size(), 3u);
  EXPECT_EQ(c.ablation.cells[2].second, AugStrategy::binomial(0.5));
  EXPECT_EQ(c.ablation.seeds, (std::vector<std::uint64_t>{4, 5}));
}

TEST(Config, RoundTripThroughIni) {
  RunConfig c = parse_config("[train]\nlr = 3e-4\nclip_norm = 2.5\nphi_l = bin:0.25\n[eval]\ntopk = 3\n");
  c.model.anchor_ratios = {0.5, 1.0, 2.0};
  c.data.synth.contrast_min = 12.125;
  const RunConfig r = parse_config(to_ini(c));
  EXPECT_EQ(to_ini(r), to_ini(c));
  EXPECT_EQ(r.train.lr, 3e-4);
  EXPECT_EQ(r.train.clip_norm, 2.5);
  EXPECT_EQ(r.model.anchor_ratios, c.model.anchor_ratios);
  EXPECT_EQ(r.data.synth.contrast_min, 12.125);
  EXPECT_EQ(r.eval.topk, 3u);
}

TEST(Config, ErrorsNameTheField) {
  const auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("[train]\nlearning_rate = 1\n").find("learning_rate"), std::string::npos);
  EXPECT_NE(message("[train]\nlr = fast\n").find("train.lr"), std::string::npos);
  EXPECT_NE(message("[train]\nclip_norm = -1\n").find("clip_norm"), std::string::npos);
  EXPECT_NE(message("[train]\nbatch_size = 3\n").find("batch_size"), std::string::npos);
  EXPECT_NE(message("[train]\nphi_g = sometimes\n").find("sometimes"), std::string::npos);
  EXPECT_NE(message("[ablation]\ncells = id\n").find("ablation.cells"), std::string::npos);
  EXPECT_FALSE(message("[gpu]\ncount = 1\n").empty());
}

TEST(Config, LoadReportsPath) {
  const auto path = std::filesystem::temp_directory_path() / "dhn_bad_config.ini";
  std::ofstream(path) << "[eval]\nfppi_max = 0\n";
  try {
    load_config(path);
    FAIL() << "expected a validation error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path), std::runtime_error);
}

}  // namespace
