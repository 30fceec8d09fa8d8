#include "dhn/synthdata.hpp"

#include "kernels.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dhn {

using json = nlohmann::json;
using kernels::require;

void SynthConfig::validate() const {
  require(height >= 64 && width >= 64, "synth: image must be at least 64x64");
  require(nodule_prob >= 0.0 && nodule_prob <= 1.0, "synth: nodule_prob must lie in [0,1]");
  require(max_nodules >= 1, "synth: max_nodules must be at least 1");
  require(contrast_min > 0.0 && contrast_min <= contrast_max, "synth: need 0 < contrast_min <= contrast_max");
  require(radius_min >= 2.0 && radius_min <= radius_max, "synth: need 2 <= radius_min <= radius_max");
  require(2.0 * radius_max + 4.0 < static_cast<double>(std::min(height, width)), "synth: radius_max too large");
  require(occluder_count >= 0 && noise_sigma >= 0.0, "synth: occluder_count and noise_sigma must be non-negative");
  require(occluded_fraction >= 0.0 && occluded_fraction <= 1.0, "synth: occluded_fraction must lie in [0,1]");
}

namespace {

struct Rib {
  double y0, amplitude, frequency, phase, half_width;
  double centre(double x) const { return y0 + amplitude * std::sin(frequency * x + phase); }
};

}  // namespace

Scan generate_scan(std::mt19937_64& rng, const SynthConfig& cfg) {
  cfg.validate();
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const Index h = cfg.height, w = cfg.width;
  const double wd = static_cast<double>(w), hd = static_cast<double>(h);
  const double two_pi = 2.0 * std::numbers::pi;

  Buffer img = Buffer::Constant(h * w, u(80.0, 120.0));
  for (int k = 0; k < 3; ++k) {
    const double amp = u(5.0, 15.0), fx = u(0.3, 1.5) * two_pi / wd, fy = u(0.3, 1.5) * two_pi / hd, ph = u(0.0, two_pi);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) img[i * w + j] += amp * std::cos(fx * static_cast<double>(j) + fy * static_cast<double>(i) + ph);
    }
  }

  std::vector<Rib> ribs;
  const double spacing = hd / static_cast<double>(cfg.occluder_count + 1);
  for (int k = 0; k < cfg.occluder_count; ++k) {
    ribs.push_back({spacing * (k + 1) + u(-0.2, 0.2) * spacing, u(2.0, 6.0), u(0.5, 1.5) * two_pi / wd, u(0.0, two_pi),
                    u(2.5, 5.0)});
  }
  for (const Rib& r : ribs) {
    for (Index j = 0; j < w; ++j) {
      const double c = r.centre(static_cast<double>(j));
      for (Index i = std::max<Index>(0, static_cast<Index>(c - 4 * r.half_width));
           i < std::min<Index>(h, static_cast<Index>(c + 4 * r.half_width) + 1); ++i) {
        const double d = (static_cast<double>(i) - c) / r.half_width;
        img[i * w + j] += cfg.rib_amplitude * std::exp(-d * d);
      }
    }
  }

  Scan scan;
  if (std::bernoulli_distribution(cfg.nodule_prob)(rng)) {
    const int count = std::uniform_int_distribution<int>(1, cfg.max_nodules)(rng);
    struct Blob {
      double cx, cy, r;
    };
    std::vector<Blob> blobs;
    for (int n = 0; n < count; ++n) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        const double r = u(cfg.radius_min, cfg.radius_max);
        const double margin = r + 1.0;
        double cx = u(margin, wd - margin), cy = u(margin, hd - margin);
        if (!ribs.empty() && std::bernoulli_distribution(cfg.occluded_fraction)(rng)) {
          const Rib& rib = ribs[std::uniform_int_distribution<std::size_t>(0, ribs.size() - 1)(rng)];
          cy = std::clamp(rib.centre(cx), margin, hd - margin);
        }
        const bool clear = std::none_of(blobs.begin(), blobs.end(), [&](const Blob& b) {
          return std::hypot(b.cx - cx, b.cy - cy) < b.r + r;
        });
        if (clear) {
          blobs.push_back({cx, cy, r});
          break;
        }
      }
    }
    for (const Blob& b : blobs) {
      const double sigma = 0.5 * b.r, amp = u(cfg.contrast_min, cfg.contrast_max);
      const Index i0 = std::max<Index>(0, static_cast<Index>(b.cy - 3 * sigma));
      const Index i1 = std::min<Index>(h - 1, static_cast<Index>(b.cy + 3 * sigma) + 1);
      const Index j0 = std::max<Index>(0, static_cast<Index>(b.cx - 3 * sigma));
      const Index j1 = std::min<Index>(w - 1, static_cast<Index>(b.cx + 3 * sigma) + 1);
      for (Index i = i0; i <= i1; ++i) {
        for (Index j = j0; j <= j1; ++j) {
          // Pixel (i, j) covers [j, j+1) x [i, i+1); evaluate at its centre.
          const double dx = static_cast<double>(j) + 0.5 - b.cx, dy = static_cast<double>(i) + 0.5 - b.cy;
          img[i * w + j] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
      }
      scan.gt_boxes.push_back({b.cx - 2 * sigma, b.cy - 2 * sigma, b.cx + 2 * sigma, b.cy + 2 * sigma});
    }
  }

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (Index i = 0; i < img.size(); ++i) img[i] = std::clamp(std::round(img[i] + noise(rng)), 0.0, 255.0);
  scan.image = Tensor({1, h, w}, std::move(img));
  scan.global_label = scan.gt_boxes.empty() ? 0 : 1;
  return scan;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void write_pgm(const Tensor& image, const std::filesystem::path& path) {
  require(image.rank() == 3 && image.dim(0) == 1, "write_pgm: image must be [1,H,W]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
  std::string bytes(static_cast<std::size_t>(image.numel()), '\0');
  for (Index i = 0; i < image.numel(); ++i) {
    bytes[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<unsigned char>(std::clamp(std::round(image[i]), 0.0, 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  Index w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) {
    throw std::runtime_error(path.string() + ": not an 8-bit binary PGM");
  }
  in.get();
  std::string bytes(static_cast<std::size_t>(w * h), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
  Buffer v(w * h);
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
  return Tensor({1, h, w}, std::move(v));
}

namespace {

json config_json(const SynthConfig& c) {
  return {{"height", c.height},           {"width", c.width},
          {"nodule_prob", c.nodule_prob}, {"max_nodules", c.max_nodules},
          {"contrast_min", c.contrast_min}, {"contrast_max", c.contrast_max},
          {"occluder_count", c.occluder_count}, {"rib_amplitude", c.rib_amplitude},
          {"noise_sigma", c.noise_sigma}, {"radius_min", c.radius_min},
          {"radius_max", c.radius_max},   {"occluded_fraction", c.occluded_fraction}};
}

SynthConfig config_from_json(const json& j) {
  SynthConfig c;
  c.height = j.at("height").get<Index>();
  c.width = j.at("width").get<Index>();
  c.nodule_prob = j.at("nodule_prob").get<double>();
  c.max_nodules = j.at("max_nodules").get<int>();
  c.contrast_min = j.at("contrast_min").get<double>();
  c.contrast_max = j.at("contrast_max").get<double>();
  c.occluder_count = j.at("occluder_count").get<int>();
  c.rib_amplitude = j.at("rib_amplitude").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.radius_min = j.at("radius_min").get<double>();
  c.radius_max = j.at("radius_max").get<double>();
  c.occluded_fraction = j.at("occluded_fraction").get<double>();
  return c;
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string scan_name(int patient, int index) {
  std::ostringstream os;
  os << 'p' << patient << "_s" << index;
  return os.str();
}

}  // namespace

DatasetManifest generate_dataset(std::uint64_t seed, int n_patients, int scans_per_patient, const SynthConfig& cfg,
                                 const std::filesystem::path& dir) {
  require(n_patients >= 10, "generate_dataset: need at least 10 patients, got " + std::to_string(n_patients));
  require(scans_per_patient >= 1, "generate_dataset: scans_per_patient must be at least 1");
  cfg.validate();

  DatasetManifest m;
  m.seed = seed;
  m.config = cfg;
  m.n_patients = n_patients;
  m.scans_per_patient = scans_per_patient;
  std::vector<int> order(static_cast<std::size_t>(n_patients));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(seed);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const auto n_train = static_cast<std::size_t>(n_patients * 8 / 10);
  const auto n_val = static_cast<std::size_t>(n_patients / 10);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::string& split = i < n_train ? kSplits[0] : i < n_train + n_val ? kSplits[1] : kSplits[2];
    m.patients[split].push_back(order[i]);
  }

  std::filesystem::create_directories(dir);
  for (const auto& split : kSplits) {
    std::filesystem::create_directories(dir / split);
    json annotations = json::object();
    auto& ids = m.patients[split];
    std::sort(ids.begin(), ids.end());
    for (int patient : ids) {
      for (int s = 0; s < scans_per_patient; ++s) {
        const auto index = static_cast<std::uint64_t>(patient) * static_cast<std::uint64_t>(scans_per_patient) +
                           static_cast<std::uint64_t>(s);
        std::mt19937_64 rng(mix_seed(seed, index));
        Scan scan = generate_scan(rng, cfg);
        const std::string name = scan_name(patient, s);
        write_pgm(scan.image, dir / split / (name + ".pgm"));
        json boxes = json::array();
        for (const Box& b : scan.gt_boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
        annotations[name] = {{"patient_id", patient}, {"global_label", scan.global_label}, {"boxes", boxes}};
        m.scans[split].push_back(name);
      }
    }
    write_json(annotations, dir / split / "annotations.json");
  }

  json manifest = {{"seed", seed},
                   {"version", DHN_VERSION},
                   {"n_patients", n_patients},
                   {"scans_per_patient", scans_per_patient},
                   {"config", config_json(cfg)},
                   {"patients", m.patients},
                   {"scans", m.scans}};
  json counts = json::object();
  for (const auto& split : kSplits) counts[split] = m.scans[split].size();
  manifest["counts"] = counts;
  write_json(manifest, dir / "manifest.json");
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const json j = read_json(dir / "manifest.json");
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = config_from_json(j.at("config"));
    m.n_patients = j.at("n_patients").get<int>();
    m.scans_per_patient = j.at("scans_per_patient").get<int>();
    m.patients = j.at("patients").get<std::map<std::string, std::vector<int>>>();
    m.scans = j.at("scans").get<std::map<std::string, std::vector<std::string>>>();
  } catch (const json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  return m;
}

std::vector<Scan> load_split(const std::filesystem::path& dir, const std::string& split) {
  if (std::find(kSplits.begin(), kSplits.end(), split) == kSplits.end()) {
    throw std::invalid_argument("unknown split '" + split + "' (expected train, val or test)");
  }
  const DatasetManifest m = read_manifest(dir);
  const json annotations = read_json(dir / split / "annotations.json");
  std::vector<Scan> scans;
  const auto it = m.scans.find(split);
  if (it == m.scans.end()) return scans;
  for (const auto& name : it->second) {
    const auto entry = annotations.find(name);
    if (entry == annotations.end()) throw std::runtime_error("annotations for split " + split + " lack scan " + name);
    Scan s;
    s.scan_id = name;
    s.image = read_pgm(dir / split / (name + ".pgm"));
    s.patient_id = entry->at("patient_id").get<int>();
    s.global_label = entry->at("global_label").get<int>();
    for (const auto& b : entry->at("boxes")) {
      s.gt_boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()});
    }
    scans.push_back(std::move(s));
  }
  return scans;
}

}  // namespace dhn
