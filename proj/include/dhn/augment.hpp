#pragma once

#include "dhn/box.hpp"
#include "dhn/scan.hpp"
#include "dhn/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dhn {

enum class TransformKind { HistEq, GaussianNoise, Brightness, Contrast, Scale, Translate, Shear, HFlip, Rotate };

/// The transform set in application order.
inline constexpr std::array<TransformKind, 9> kTransformTable = {
    TransformKind::HistEq, TransformKind::GaussianNoise, TransformKind::Brightness,
    TransformKind::Contrast, TransformKind::Scale, TransformKind::Translate,
    TransformKind::Shear, TransformKind::HFlip, TransformKind::Rotate};

std::string_view transform_name(TransformKind kind);
bool is_geometric(TransformKind kind);

inline constexpr double kNoiseSigma = 10.0;
inline constexpr double kBrightnessRange = 0.15;  // multiplicative gain 1 + b
inline constexpr double kContrastRange = 0.15;    // gain 1 + c about the image mean
inline constexpr double kScaleRange = 0.20;       // zoom 1 + s about the centre
inline constexpr double kTranslateRange = 0.10;   // fraction of width / height
inline constexpr double kShearRangeDeg = 10.0;
inline constexpr double kRotateRangeDeg = 45.0;

/// One transform with its drawn parameters. Translate uses (a, b) = (tx, ty) as
/// fractions of the image size; GaussianNoise carries its noise stream seed;
/// HistEq and HFlip take no parameters.
struct SampledTransform {
  TransformKind kind = TransformKind::HistEq;
  double a = 0.0, b = 0.0;
  std::uint64_t noise_seed = 0;
};

struct SamplePlan {
  std::vector<SampledTransform> transforms;
  std::uint64_t seed = 0;

  bool empty() const { return transforms.empty(); }
  bool contains(TransformKind kind) const;
  /// Composite map from input to output pixel coordinates (x, y, 1) for an
  /// image of the given size. Identity when the plan has no geometric entries.
  Eigen::Matrix3d affine(Index width, Index height) const;
};

struct AugStrategy {
  enum class Mode { identity, binomial, uniform };
  Mode mode = Mode::identity;
  double p = 0.0;

  static AugStrategy identity() { return {}; }
  static AugStrategy binomial(double p);
  static AugStrategy uniform() { return {Mode::uniform, 0.0}; }

  /// Parses "id", "bin:<p>" or "uni".
  static AugStrategy parse(std::string_view text);
  std::string str() const;
  friend bool operator==(const AugStrategy&, const AugStrategy&) = default;
};

/// Plans are fully determined by their seed: the sample_* functions draw one
/// seed from `rng` and delegate to the *_from_seed forms.
SamplePlan sample_binomial(double p, std::mt19937_64& rng);
SamplePlan sample_uniform(std::mt19937_64& rng);
SamplePlan sample_plan(const AugStrategy& strategy, std::mt19937_64& rng);
SamplePlan binomial_plan_from_seed(double p, std::uint64_t seed);
SamplePlan uniform_plan_from_seed(std::uint64_t seed);

/// 256-bin histogram equalisation with the CDF_min normalisation.
Tensor hist_eq(const Tensor& image);

inline constexpr double kMinBoxArea = 4.0;

struct Augmented {
  Tensor image;
  std::vector<Box> boxes;
};

/// Applies illumination transforms, then one resampling pass for the composed
/// geometric map (bilinear, zero fill), then clamps to [0,255]. Boxes map
/// through their corner envelope, are clipped, and dropped below kMinBoxArea.
Augmented apply(const SamplePlan& plan, const Tensor& image, const std::vector<Box>& boxes);

enum class Route { global, local };

struct View {
  Route route = Route::global;
  Tensor image;
  int global_label = 0;
  std::vector<Box> boxes;  // always empty on the global route
  SamplePlan plan;
};

/// Two independently augmented views of one scan, routed to the global and
/// local heads. A positive scan whose local view loses every box is resampled
/// up to kMaxResample times and then left unaugmented.
inline constexpr int kMaxResample = 5;
std::array<View, 2> dha_pair(const Scan& scan, const AugStrategy& phi_g, const AugStrategy& phi_l,
                             std::mt19937_64& rng);

}  // namespace dhn
