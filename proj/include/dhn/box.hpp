#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>

namespace dhn {

/// Axis-aligned half-open rectangle in pixel coordinates. Area is
/// (x2 - x1) * (y2 - y1); there is no +1 pixel convention.
template <typename Scalar>
struct BasicBox {
  Scalar x1{0}, y1{0}, x2{0}, y2{0};

  Scalar width() const { return x2 - x1; }
  Scalar height() const { return y2 - y1; }
  Scalar area() const { return width() * height(); }
  Scalar center_x() const { return x1 + Scalar(0.5) * width(); }
  Scalar center_y() const { return y1 + Scalar(0.5) * height(); }

  /// Same rectangle with corners reordered so that x1 <= x2 and y1 <= y2.
  BasicBox canonical() const {
    return {std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
  }
  bool is_canonical() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 && y1 < y2;
  }
  BasicBox clipped(Scalar width_bound, Scalar height_bound) const {
    return {std::clamp(x1, Scalar(0), width_bound), std::clamp(y1, Scalar(0), height_bound),
            std::clamp(x2, Scalar(0), width_bound), std::clamp(y2, Scalar(0), height_bound)};
  }
  BasicBox scaled(Scalar s) const { return {x1 * s, y1 * s, x2 * s, y2 * s}; }

  friend bool operator==(const BasicBox&, const BasicBox&) = default;
  friend std::ostream& operator<<(std::ostream& os, const BasicBox& b) {
    return os << '[' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ']';
  }
};

using Box = BasicBox<double>;

}  // namespace dhn
