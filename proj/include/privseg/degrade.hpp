// degrade.hpp - controlled image degradations for robustness evaluation.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "privseg/rng.hpp"
#include "privseg/volume.hpp"

namespace privseg {

inline double volume_rms(const Volume& v) {
  double acc = 0.0;
  for (int64_t i = 0; i < v.voxels.size(); ++i)
    acc += double(v.voxels[i]) * double(v.voxels[i]);
  return std::sqrt(acc / double(v.voxels.size()));
}

// Rician magnitude noise: sqrt((x+n1)^2 + n2^2) with sigma set from the SNR
// in dB relative to the volume RMS. snr_db = +inf degenerates to |x|.
inline Volume add_rician_noise(const Volume& v, double snr_db, uint64_t seed) {
  if (std::isnan(snr_db)) throw std::invalid_argument("add_rician_noise: snr_db is NaN");
  if (v.voxels.empty()) throw std::invalid_argument("add_rician_noise: empty volume");
  const double sigma =
      std::isinf(snr_db) ? 0.0 : volume_rms(v) * std::pow(10.0, -snr_db / 20.0);
  Volume out = v;
  if (sigma == 0.0) {
    for (int64_t i = 0; i < out.voxels.size(); ++i)
      out.voxels[i] = std::abs(out.voxels[i]);
    return out;
  }
  Rng rng(mix_seeds(seed, 0xA1C1A7));
  for (int64_t i = 0; i < out.voxels.size(); ++i) {
    const double n1 = rng.normal(0.0, sigma);
    const double n2 = rng.normal(0.0, sigma);
    const double x = double(v.voxels[i]);
    out.voxels[i] = static_cast<float>(std::sqrt((x + n1) * (x + n1) + n2 * n2));
  }
  return out;
}

// Block-mean downsampling followed by nearest-neighbor upsampling back to the
// original shape; trailing partial blocks are averaged over their actual size.
inline Volume downsample(const Volume& v, std::array<int64_t, 3> factor) {
  for (int64_t f : factor)
    if (f < 1) throw std::invalid_argument("downsample: factor must be >= 1");
  const int64_t H = v.voxels.dim(0), W = v.voxels.dim(1), D = v.voxels.dim(2);
  const int64_t bh = (H + factor[0] - 1) / factor[0];
  const int64_t bw = (W + factor[1] - 1) / factor[1];
  const int64_t bd = (D + factor[2] - 1) / factor[2];

  Tensor<float> blocks({bh, bw, bd});
  for (int64_t i = 0; i < bh; ++i)
    for (int64_t j = 0; j < bw; ++j)
      for (int64_t k = 0; k < bd; ++k) {
        double acc = 0.0;
        int64_t cnt = 0;
        for (int64_t a = i * factor[0]; a < std::min(H, (i + 1) * factor[0]); ++a)
          for (int64_t b = j * factor[1]; b < std::min(W, (j + 1) * factor[1]); ++b)
            for (int64_t c = k * factor[2]; c < std::min(D, (k + 1) * factor[2]); ++c) {
              acc += v.voxels.at(a, b, c);
              ++cnt;
            }
        blocks.at(i, j, k) = static_cast<float>(acc / double(cnt));
      }

  Volume out = v;
  for (int64_t a = 0; a < H; ++a)
    for (int64_t b = 0; b < W; ++b)
      for (int64_t c = 0; c < D; ++c)
        out.voxels.at(a, b, c) = blocks.at(a / factor[0], b / factor[1], c / factor[2]);
  return out;
}

}  // namespace privseg
