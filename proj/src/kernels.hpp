#pragma once

// Internal helpers shared by the op implementations.

#include "dhn/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>

namespace dhn::kernels {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

/// Four-neighbour bilinear stencil around a lattice position. Neighbours
/// outside the plane carry weight but read as zero.
struct BilinearStencil {
  Index y0 = 0, x0 = 0;
  double ly = 0.0, lx = 0.0;

  BilinearStencil() = default;
  BilinearStencil(double y, double x) {
    const double fy = std::floor(y);
    const double fx = std::floor(x);
    y0 = static_cast<Index>(fy);
    x0 = static_cast<Index>(fx);
    ly = y - fy;
    lx = x - fx;
  }

  static bool inside(Index y, Index x, Index height, Index width) {
    return y >= 0 && y < height && x >= 0 && x < width;
  }

  double read(const double* plane, Index height, Index width) const {
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    double v = 0.0;
    if (inside(y0, x0, height, width)) v += hy * hx * plane[y0 * width + x0];
    if (inside(y0, x0 + 1, height, width)) v += hy * lx * plane[y0 * width + x0 + 1];
    if (inside(y0 + 1, x0, height, width)) v += ly * hx * plane[(y0 + 1) * width + x0];
    if (inside(y0 + 1, x0 + 1, height, width)) v += ly * lx * plane[(y0 + 1) * width + x0 + 1];
    return v;
  }

  void scatter(double* plane, Index height, Index width, double g) const {
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    if (inside(y0, x0, height, width)) plane[y0 * width + x0] += hy * hx * g;
    if (inside(y0, x0 + 1, height, width)) plane[y0 * width + x0 + 1] += hy * lx * g;
    if (inside(y0 + 1, x0, height, width)) plane[(y0 + 1) * width + x0] += ly * hx * g;
    if (inside(y0 + 1, x0 + 1, height, width)) plane[(y0 + 1) * width + x0 + 1] += ly * lx * g;
  }

  /// Partial derivatives of read() with respect to y and x.
  void position_gradient(const double* plane, Index height, Index width, double& dy, double& dx) const {
    auto at = [&](Index yy, Index xx) { return inside(yy, xx, height, width) ? plane[yy * width + xx] : 0.0; };
    const double v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    dy = hx * (v10 - v00) + lx * (v11 - v01);
    dx = hy * (v01 - v00) + ly * (v11 - v10);
  }
};

}  // namespace dhn::kernels
