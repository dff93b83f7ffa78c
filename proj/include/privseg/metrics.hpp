// metrics.hpp - segmentation Dice scores, 3-d MS-SSIM and distribution
// comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "privseg/volume.hpp"

namespace privseg {

struct DiceScores {
  std::vector<double> per_class;  // index = class id
  double overall = 0.0;           // foreground classes weighted by target size
};

// Hard per-class Dice 2|P^T| / (|P|+|T|), defined as 1 when both sets are
// empty. Overall is the foreground mean weighted by each class's target size.
inline DiceScores dice_scores(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                              int num_classes) {
  if (pred.shape() != gt.shape())
    throw std::invalid_argument("dice_scores: shape mismatch");
  std::vector<int64_t> np(num_classes, 0), nt(num_classes, 0), ni(num_classes, 0);
  for (int64_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], t = gt[i];
    if (p >= num_classes || t >= num_classes)
      throw std::invalid_argument("dice_scores: label out of range");
    ++np[static_cast<size_t>(p)];
    ++nt[static_cast<size_t>(t)];
    if (p == t) ++ni[static_cast<size_t>(p)];
  }
  DiceScores out;
  out.per_class.resize(static_cast<size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    const auto ku = static_cast<size_t>(k);
    out.per_class[ku] = (np[ku] + nt[ku] == 0)
                            ? 1.0
                            : 2.0 * double(ni[ku]) / double(np[ku] + nt[ku]);
  }
  int64_t fg = 0;
  for (int k = 1; k < num_classes; ++k) fg += nt[static_cast<size_t>(k)];
  if (fg == 0) {
    int64_t fg_pred = 0;
    for (int k = 1; k < num_classes; ++k) fg_pred += np[static_cast<size_t>(k)];
    out.overall = fg_pred == 0 ? 1.0 : 0.0;
    return out;
  }
  for (int k = 1; k < num_classes; ++k)
    out.overall += double(nt[static_cast<size_t>(k)]) / double(fg) *
                   out.per_class[static_cast<size_t>(k)];
  return out;
}

namespace msd {

inline std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(static_cast<size_t>(window));
  const double c = (window - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Valid-mode separable filtering along one axis of (H,W,D).
inline Tensor<double> filter_axis(const Tensor<double>& x, const std::vector<double>& k,
                                  int axis) {
  const int64_t n = static_cast<int64_t>(k.size());
  Shape s = x.shape();
  Shape so = s;
  so[static_cast<size_t>(axis)] -= n - 1;
  Tensor<double> out(so);
  for (int64_t h = 0; h < so[0]; ++h)
    for (int64_t w = 0; w < so[1]; ++w)
      for (int64_t d = 0; d < so[2]; ++d) {
        double acc = 0.0;
        for (int64_t t = 0; t < n; ++t) {
          const int64_t hh = h + (axis == 0 ? t : 0);
          const int64_t ww = w + (axis == 1 ? t : 0);
          const int64_t dd = d + (axis == 2 ? t : 0);
          acc += k[static_cast<size_t>(t)] * x.at(hh, ww, dd);
        }
        out.at(h, w, d) = acc;
      }
  return out;
}

inline Tensor<double> filter3(const Tensor<double>& x, const std::vector<double>& k) {
  return filter_axis(filter_axis(filter_axis(x, k, 0), k, 1), k, 2);
}

// 2x block-mean decimation (trailing odd voxels dropped).
inline Tensor<double> half(const Tensor<double>& x) {
  Shape s{x.dim(0) / 2, x.dim(1) / 2, x.dim(2) / 2};
  Tensor<double> out(s);
  for (int64_t h = 0; h < s[0]; ++h)
    for (int64_t w = 0; w < s[1]; ++w)
      for (int64_t d = 0; d < s[2]; ++d) {
        double acc = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) acc += x.at(2 * h + a, 2 * w + b, 2 * d + c);
        out.at(h, w, d) = acc / 8.0;
      }
  return out;
}

struct ScaleTerms {
  double cs = 0.0;
  double luminance = 0.0;
};

inline ScaleTerms ssim_terms(const Tensor<double>& a, const Tensor<double>& b,
                             const std::vector<double>& k, double c1, double c2) {
  const auto mu_a = filter3(a, k);
  const auto mu_b = filter3(b, k);
  Tensor<double> aa(a.shape()), bb(a.shape()), ab(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto m_aa = filter3(aa, k);
  const auto m_bb = filter3(bb, k);
  const auto m_ab = filter3(ab, k);
  double cs_sum = 0.0, lum_sum = 0.0;
  for (int64_t i = 0; i < mu_a.size(); ++i) {
    const double va = m_aa[i] - mu_a[i] * mu_a[i];
    const double vb = m_bb[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    lum_sum += (2.0 * mu_a[i] * mu_b[i] + c1) /
               (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
  }
  ScaleTerms t;
  t.cs = cs_sum / double(mu_a.size());
  t.luminance = lum_sum / double(mu_a.size());
  return t;
}

}  // namespace msd

// Multiscale SSIM with 3-d Gaussian windows (11^3, sigma 1.5 by default).
// Contrast/structure terms enter at every scale, luminance at the coarsest;
// canonical scale weights are truncated to `scales` and renormalized.
// Stabilizers use the joint dynamic range of the two inputs.
inline double ms_ssim(const Volume& a, const Volume& b, int scales = 3, int window = 11,
                      double sigma = 1.5) {
  if (a.voxels.shape() != b.voxels.shape())
    throw std::invalid_argument("ms_ssim: shape mismatch");
  if (scales < 1 || scales > 5) throw std::invalid_argument("ms_ssim: scales in [1,5]");
  const int64_t need = int64_t(window) << (scales - 1);
  for (int axis = 0; axis < 3; ++axis)
    if (a.voxels.dim(axis) < need)
      throw std::invalid_argument(
          "ms_ssim: volume extent " + std::to_string(a.voxels.dim(axis)) +
          " too small for " + std::to_string(scales) +
          " scales with window " + std::to_string(window) +
          "; use fewer scales");

  double lo = a.voxels[0], hi = a.voxels[0];
  for (int64_t i = 0; i < a.voxels.size(); ++i) {
    lo = std::min({lo, double(a.voxels[i]), double(b.voxels[i])});
    hi = std::max({hi, double(a.voxels[i]), double(b.voxels[i])});
  }
  const double range = std::max(hi - lo, 1e-6);
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  static const double canonical[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  std::vector<double> w(canonical, canonical + scales);
  double wsum = 0.0;
  for (double v : w) wsum += v;
  for (double& v : w) v /= wsum;

  const auto kern = msd::gaussian_kernel(window, sigma);
  Tensor<double> xa = a.voxels.cast<double>();
  Tensor<double> xb = b.voxels.cast<double>();
  double result = 1.0;
  for (int s = 0; s < scales; ++s) {
    const auto t = msd::ssim_terms(xa, xb, kern, c1, c2);
    const double cs = std::max(t.cs, 0.0);
    const double lum = std::max(t.luminance, 0.0);
    if (s + 1 == scales)
      result *= std::pow(lum, w[static_cast<size_t>(s)]) *
                std::pow(cs, w[static_cast<size_t>(s)]);
    else
      result *= std::pow(cs, w[static_cast<size_t>(s)]);
    if (s + 1 < scales) {
      xa = msd::half(xa);
      xb = msd::half(xb);
    }
  }
  return std::min(1.0, std::max(0.0, result));
}

// Two-sample Kolmogorov-Smirnov statistic (max ECDF gap).
inline double ks_statistic(std::vector<double> x, std::vector<double> y) {
  if (x.empty() || y.empty()) throw std::invalid_argument("ks_statistic: empty sample");
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  size_t i = 0, j = 0;
  double ks = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] <= v) ++i;
    while (j < y.size() && y[j] <= v) ++j;
    ks = std::max(ks, std::abs(double(i) / double(x.size()) - double(j) / double(y.size())));
  }
  return ks;
}

struct DistributionReport {
  double intra_mean = 0.0;
  double inter_mean = 0.0;
  double ks = 0.0;
  std::vector<double> bin_edges;
  std::vector<int64_t> intra_hist;
  std::vector<int64_t> inter_hist;
};

inline DistributionReport distribution_report(const std::vector<double>& intra,
                                              const std::vector<double>& inter,
                                              int bins = 20) {
  if (intra.empty() || inter.empty())
    throw std::invalid_argument("distribution_report: empty sample");
  DistributionReport r;
  for (double v : intra) r.intra_mean += v;
  r.intra_mean /= double(intra.size());
  for (double v : inter) r.inter_mean += v;
  r.inter_mean /= double(inter.size());
  r.ks = ks_statistic(intra, inter);

  double lo = intra[0], hi = intra[0];
  for (double v : intra) lo = std::min(lo, v), hi = std::max(hi, v);
  for (double v : inter) lo = std::min(lo, v), hi = std::max(hi, v);
  if (hi <= lo) hi = lo + 1e-9;
  r.bin_edges.resize(static_cast<size_t>(bins) + 1);
  for (int i = 0; i <= bins; ++i)
    r.bin_edges[static_cast<size_t>(i)] = lo + (hi - lo) * double(i) / double(bins);
  r.intra_hist.assign(static_cast<size_t>(bins), 0);
  r.inter_hist.assign(static_cast<size_t>(bins), 0);
  auto drop = [&](const std::vector<double>& xs, std::vector<int64_t>& h) {
    for (double v : xs) {
      auto b = static_cast<int64_t>((v - lo) / (hi - lo) * bins);
      b = std::min<int64_t>(bins - 1, std::max<int64_t>(0, b));
      ++h[static_cast<size_t>(b)];
    }
  };
  drop(intra, r.intra_hist);
  drop(inter, r.inter_hist);
  return r;
}

}  // namespace privseg
