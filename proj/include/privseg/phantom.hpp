// phantom.hpp - procedural volumetric phantom with a subject/session latent
// hierarchy.
//
// A subject is K-1 nested ellipsoidal tissue surfaces with a subject-specific
// low-frequency radial deformation and per-tissue mean intensities. A session
// applies a small extra deformation, a multiplicative low-frequency bias
// field and additive Gaussian noise, so repeated sessions of one subject look
// alike without being identical.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "privseg/rng.hpp"
#include "privseg/volume.hpp"

namespace privseg {

struct PhantomConfig {
  Shape shape{32, 32, 32};
  int num_classes = 4;  // background + 3 tissues
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  int deform_terms = 6;
  double subject_deform_amp = 0.08;
  double session_deform_amp = 0.02;
  double bias_amp = 0.05;
  double noise_sigma = 0.02;
  double intensity_jitter = 0.08;

  void validate() const {
    if (shape.size() != 3 || shape[0] < 4 || shape[1] < 4 || shape[2] < 4)
      throw std::invalid_argument("PhantomConfig: shape must be 3-d, each extent >= 4");
    if (num_classes < 2) throw std::invalid_argument("PhantomConfig: K must be >= 2");
    if (deform_terms < 1) throw std::invalid_argument("PhantomConfig: deform_terms >= 1");
  }
};

namespace detail {

// Low-frequency field over unit directions / positions: sum of random-plane
// cosines scaled so the total perturbation magnitude stays within amp.
struct CosField {
  struct Term {
    std::array<double, 3> k;
    double phase;
    double weight;
  };
  std::vector<Term> terms;
  double scale = 0.0;

  static CosField draw(Rng& rng, int n, double amp, double freq_lo, double freq_hi) {
    CosField f;
    double wsum = 0.0;
    for (int i = 0; i < n; ++i) {
      Term t;
      double norm = 0.0;
      for (auto& c : t.k) {
        c = rng.normal();
        norm += c * c;
      }
      norm = std::sqrt(std::max(norm, 1e-12));
      const double freq = rng.uniform(freq_lo, freq_hi);
      for (auto& c : t.k) c *= freq / norm;
      t.phase = rng.uniform(0.0, 2.0 * M_PI);
      t.weight = rng.uniform(-1.0, 1.0);
      wsum += std::abs(t.weight);
      f.terms.push_back(t);
    }
    f.scale = wsum > 0.0 ? amp / wsum : 0.0;
    return f;
  }

  double eval(const std::array<double, 3>& p) const {
    double acc = 0.0;
    for (const auto& t : terms)
      acc += t.weight * std::cos(t.k[0] * p[0] + t.k[1] * p[1] + t.k[2] * p[2] + t.phase);
    return scale * acc;
  }
};

}  // namespace detail

// Deterministic given (subject_seed, session_seed): the subject stream fixes
// geometry and tissue intensities, the session stream only perturbs them.
inline std::pair<Volume, LabelMap> generate_phantom(uint64_t subject_seed,
                                                    uint64_t session_seed,
                                                    const PhantomConfig& cfg) {
  cfg.validate();
  const int K = cfg.num_classes;

  Rng subj(mix_seeds(subject_seed, 0x500B7EC7));
  const auto subj_deform = detail::CosField::draw(subj, cfg.deform_terms,
                                                  cfg.subject_deform_amp, 1.0, 2.5);
  // nested radii (fractions of the inscribed ellipsoid), outermost first
  std::vector<double> radii(K - 1);
  for (int k = 1; k <= K - 1; ++k)
    radii[k - 1] = (K == 2) ? 0.60 : 0.85 - 0.55 * double(k - 1) / double(K - 2);
  std::vector<double> tissue_mean(K);
  tissue_mean[0] = 0.05;  // background
  for (int k = 1; k <= K - 1; ++k) {
    const double base =
        (K == 2) ? 0.65 : 0.30 + 0.50 * double(k - 1) / double(K - 2);
    tissue_mean[k] = base + cfg.intensity_jitter * subj.uniform(-1.0, 1.0);
  }

  // Session stream depends on both seeds so different subjects never share a
  // noise or bias realization.
  Rng sess(mix_seeds(mix_seeds(subject_seed, 0x5E5510u), session_seed));
  const auto sess_deform = detail::CosField::draw(sess, cfg.deform_terms,
                                                  cfg.session_deform_amp, 1.0, 2.5);
  const auto bias = detail::CosField::draw(sess, 3, cfg.bias_amp, 1.0, 3.0);

  const int64_t H = cfg.shape[0], W = cfg.shape[1], D = cfg.shape[2];
  Volume vol;
  vol.voxels = Tensor<float>({H, W, D});
  vol.spacing_mm = cfg.spacing_mm;
  LabelMap lab;
  lab.labels = Tensor<uint8_t>({H, W, D});
  lab.num_classes = K;

  const double ch = (double(H) - 1.0) / 2.0;
  const double cw = (double(W) - 1.0) / 2.0;
  const double cd = (double(D) - 1.0) / 2.0;
  int64_t idx = 0;
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t w = 0; w < W; ++w) {
      for (int64_t d = 0; d < D; ++d, ++idx) {
        const std::array<double, 3> p{(double(h) - ch) / std::max(ch, 0.5),
                                      (double(w) - cw) / std::max(cw, 0.5),
                                      (double(d) - cd) / std::max(cd, 0.5)};
        const double rho = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        std::array<double, 3> u{1.0, 0.0, 0.0};
        if (rho > 1e-9) u = {p[0] / rho, p[1] / rho, p[2] / rho};
        double mod = 1.0 + subj_deform.eval(u) + sess_deform.eval(u);
        mod = std::min(1.3, std::max(0.7, mod));
        const double reff = rho / mod;

        int label = 0;
        for (int k = 0; k < K - 1; ++k)
          if (reff < radii[static_cast<size_t>(k)]) label = k + 1;
        lab.labels[idx] = static_cast<uint8_t>(label);

        double val = tissue_mean[static_cast<size_t>(label)] * (1.0 + bias.eval(p));
        val += cfg.noise_sigma == 0.0 ? 0.0 : sess.normal(0.0, cfg.noise_sigma);
        vol.voxels[idx] = static_cast<float>(std::min(1.0, std::max(0.0, val)));
      }
    }
  }
  return {std::move(vol), std::move(lab)};
}

}  // namespace privseg
