// volume.hpp - volumetric intensity grids and per-voxel class maps.
#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>

#include "privseg/tensor.hpp"

namespace privseg {

struct Volume {
  Tensor<float> voxels;  // (H,W,D), intensities normalized to [0,1] at generation
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};

  void validate() const {
    if (voxels.ndim() != 3) throw std::invalid_argument("Volume: rank-3 voxel grid expected");
    for (double s : spacing_mm)
      if (!(s > 0.0)) throw std::invalid_argument("Volume: spacing must be positive");
    if (!voxels.all_finite()) throw std::invalid_argument("Volume: non-finite intensity");
  }
};

struct LabelMap {
  Tensor<uint8_t> labels;  // (H,W,D), values in {0..num_classes-1}
  int num_classes = 0;

  void validate() const {
    if (labels.ndim() != 3) throw std::invalid_argument("LabelMap: rank-3 grid expected");
    if (num_classes < 2) throw std::invalid_argument("LabelMap: need at least 2 classes");
    for (int64_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= num_classes)
        throw std::invalid_argument("LabelMap: label exceeds class count");
  }

  void validate_against(const Volume& v) const {
    validate();
    if (labels.shape() != v.voxels.shape())
      throw std::invalid_argument("LabelMap: shape differs from paired Volume");
  }
};

}  // namespace privseg
