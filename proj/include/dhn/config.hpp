#pragma once

#include "dhn/augment.hpp"
#include "dhn/losses.hpp"
#include "dhn/model.hpp"
#include "dhn/synthdata.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dhn {

struct DataSection {
  std::filesystem::path dir = "data";
  std::uint64_t seed = 1;
  int n_patients = 250;
  int scans_per_patient = 1;
  SynthConfig synth;
};

struct TrainSection {
  double lr = 5e-5;
  double momentum = 0.975;
  double clip_norm = 0.0;  // global gradient norm cap, 0 = off
  int epochs = 10;
  int batch_size = 2;  // views per step; each scan contributes one routed pair
  int checkpoint_every = 1;  // epochs
  std::uint64_t seed = 1;
  AugStrategy phi_g = AugStrategy::binomial(0.9);
  AugStrategy phi_l = AugStrategy::uniform();
  LossWeights weights;
};

struct EvalSection {
  double iou_threshold = 0.4;
  double fppi_max = 1.0;
  std::size_t topk = 8;
  std::string selection_metric = "roc_auc";
};

struct AblationSection {
  std::vector<std::pair<AugStrategy, AugStrategy>> cells = {
      {AugStrategy::identity(), AugStrategy::identity()},
      {AugStrategy::binomial(0.9), AugStrategy::uniform()}};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

/// Everything a run needs. Files are INI: [data], [model], [train], [eval],
/// [ablation] sections of key = value lines; unknown keys are errors.
struct RunConfig {
  DataSection data;
  DhnConfig model;
  TrainSection train;
  EvalSection eval;
  AblationSection ablation;

  void validate() const;
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text);
/// Complete INI rendering of `config`; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& config);

}  // namespace dhn
