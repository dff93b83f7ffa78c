// losses.hpp - segmentation loss, discriminator loss and the combined
// adversarial objective.
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "privseg/nets.hpp"
#include "privseg/tape.hpp"
#include "privseg/volume.hpp"

namespace privseg {

struct LossValue {
  double value = 0.0;
  std::map<std::string, double> terms;  // per-term breakdown for logging
};

// Generalized soft Dice loss: per class 1 - 2*sum(y*p) / (sum(y)+sum(p)+eps),
// averaged over the classes present in the target or prediction support.
template <typename T>
LossValue dice_loss(const Tensor<T>& probs, const LabelMap& target, T eps = T(1e-6)) {
  if (probs.ndim() != 4) throw std::invalid_argument("dice_loss: (K,H,W,D) prediction");
  const int64_t K = probs.dim(0);
  if (target.labels.size() != probs.size() / K)
    throw std::invalid_argument("dice_loss: prediction/target shape mismatch");
  Tape<T> tp;
  auto pv = tp.input(probs);
  auto loss = tp.dice_loss(pv, target.labels, eps);
  LossValue out;
  out.value = double(tp.value(loss)[0]);
  out.terms["dice"] = out.value;
  return out;
}

// Binary cross-entropy on a probability, clamped to [1e-7, 1-1e-7].
inline LossValue bce_loss(double s_hat, double s) {
  const double c = std::min(1.0 - 1e-7, std::max(1e-7, s_hat));
  LossValue out;
  out.value = -s * std::log(c) - (1.0 - s) * std::log(1.0 - c);
  out.terms["bce"] = out.value;
  return out;
}

// One aligned crop pair plus its labels and the same-subject indicator.
template <typename T>
struct PairCrops {
  Tensor<T> xi, xj;            // (H,W,D) intensity crops
  Tensor<uint8_t> yi, yj;      // label crops, flat over the same voxels
  bool same_subject = false;
};

struct ObjectiveValue {
  double seg_enc_loss = 0.0;  // quantity descended by (theta_S, theta_G)
  double disc_loss = 0.0;     // quantity descended by theta_D
  double mean_seg = 0.0;      // mean Dice term per image
  double mean_disc_bce = 0.0; // mean discriminator BCE per pair
};

// Forward evaluation of the combined objective on a batch of aligned pair
// crops: seg_enc = mean_i [ lS(i) + lS(j) - lambda*lD ]; disc = lambda*mean lD.
template <typename T>
ObjectiveValue combined_objective(const SegSystem<T>& sys,
                                  const std::vector<PairCrops<T>>& batch,
                                  double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("combined_objective: lambda must be >= 0");
  if (batch.empty()) throw std::invalid_argument("combined_objective: empty batch");
  ObjectiveValue out;
  for (const auto& pc : batch) {
    Tape<T> tp;
    auto lift = [&](const Tensor<T>& v) {
      return tp.input(Tensor<T>({1, v.dim(0), v.dim(1), v.dim(2)}, v.vec()));
    };
    auto ei = sys.G.forward(tp, lift(pc.xi));
    auto ej = sys.G.forward(tp, lift(pc.xj));
    auto pi = tp.softmax_channels(sys.S.forward(tp, ei));
    auto pj = tp.softmax_channels(sys.S.forward(tp, ej));
    const double lsi = double(tp.value(tp.dice_loss(pi, pc.yi, T(1e-6)))[0]);
    const double lsj = double(tp.value(tp.dice_loss(pj, pc.yj, T(1e-6)))[0]);
    auto shat = sys.D.pair_prob(tp, ei, ej);
    const double ld = bce_loss(double(tp.value(shat)[0]), pc.same_subject ? 1.0 : 0.0).value;
    out.mean_seg += 0.5 * (lsi + lsj);
    out.mean_disc_bce += ld;
    out.seg_enc_loss += lsi + lsj - lambda * ld;
  }
  const double n = double(batch.size());
  out.seg_enc_loss /= n;
  out.mean_seg /= n;
  out.mean_disc_bce /= n;
  out.disc_loss = lambda * out.mean_disc_bce;
  return out;
}

}  // namespace privseg
