#pragma once

#include "dhn/box.hpp"
#include "dhn/tensor.hpp"

#include <string>
#include <vector>

namespace dhn {

/// One labelled grayscale scan. `image` is [1,H,W] with intensities in [0,255].
struct Scan {
  Tensor image;
  int global_label = 0;
  std::vector<Box> gt_boxes;
  int patient_id = 0;
  std::string scan_id;

  Index height() const { return image.dim(1); }
  Index width() const { return image.dim(2); }
};

}  // namespace dhn
