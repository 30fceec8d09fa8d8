#pragma once

#include "dhn/scan.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace dhn {

struct SynthConfig {
  Index height = 128;
  Index width = 128;
  double nodule_prob = 0.5;
  int max_nodules = 2;
  double contrast_min = 35.0;  // blob peak above background, 0-255 scale
  double contrast_max = 70.0;
  int occluder_count = 6;      // rib-like bands
  double rib_amplitude = 30.0;
  double noise_sigma = 4.0;
  double radius_min = 3.0;
  double radius_max = 12.0;
  /// Fraction of blobs centred on a rib band.
  double occluded_fraction = 0.3;

  void validate() const;
};

/// Smooth background, rib bands and sensor noise, plus with probability
/// nodule_prob between 1 and max_nodules Gaussian blobs. A blob of radius r has
/// sigma r / 2 and ground-truth box centre +- 2 sigma. Quantised to 8 bits.
Scan generate_scan(std::mt19937_64& rng, const SynthConfig& cfg);

/// splitmix64 finaliser, used to derive per-scan seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

inline const std::vector<std::string> kSplits = {"train", "val", "test"};

struct DatasetManifest {
  std::uint64_t seed = 0;
  SynthConfig config;
  int n_patients = 0;
  int scans_per_patient = 0;
  std::map<std::string, std::vector<int>> patients;      // split -> patient ids
  std::map<std::string, std::vector<std::string>> scans; // split -> scan ids
};

/// Patients are shuffled with the seed and split 80:10:10 (floor for train and
/// val, the rest to test). Writes <dir>/<split>/<scan_id>.pgm,
/// <dir>/<split>/annotations.json and <dir>/manifest.json.
DatasetManifest generate_dataset(std::uint64_t seed, int n_patients, int scans_per_patient, const SynthConfig& cfg,
                                 const std::filesystem::path& dir);

DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<Scan> load_split(const std::filesystem::path& dir, const std::string& split);

/// Binary (P5) 8-bit portable graymap. Values are rounded and clamped.
void write_pgm(const Tensor& image, const std::filesystem::path& path);
Tensor read_pgm(const std::filesystem::path& path);

}  // namespace dhn
