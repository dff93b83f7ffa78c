#include "doctest.h"

#include <privseg/losses.hpp>
#include <privseg/rng.hpp>

using namespace privseg;

namespace {

// Independent scalar re-implementation of the generalized Dice loss used as
// the oracle: plain summation over every voxel, no shared code with the tape.
double dice_oracle(const Tensor<double>& probs, const Tensor<uint8_t>& target,
                   double eps) {
  const int64_t K = probs.dim(0), nvox = probs.size() / K;
  double total = 0.0;
  int64_t m = 0;
  for (int64_t k = 0; k < K; ++k) {
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (int64_t v = 0; v < nvox; ++v) {
      const double y = target[v] == k ? 1.0 : 0.0;
      inter += y * probs[k * nvox + v];
      psum += probs[k * nvox + v];
      tsum += y;
    }
    if (psum == 0.0 && tsum == 0.0) continue;
    total += 1.0 - 2.0 * inter / (tsum + psum + eps);
    ++m;
  }
  return total / double(m);
}

Tensor<double> random_softmax(Shape s, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(s);
  const int64_t K = s[0], nvox = t.size() / K;
  for (int64_t v = 0; v < nvox; ++v) {
    double sum = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      t[k * nvox + v] = rng.uniform(0.01, 1.0);
      sum += t[k * nvox + v];
    }
    for (int64_t k = 0; k < K; ++k) t[k * nvox + v] /= sum;
  }
  return t;
}

}  // namespace

TEST_CASE("dice loss on an exact one-hot prediction is ~0") {
  const int64_t K = 3;
  Tensor<uint8_t> target({4, 4, 4});
  Rng rng(1);
  for (int64_t i = 0; i < target.size(); ++i)
    target[i] = static_cast<uint8_t>(rng.below(K));
  Tensor<double> probs({K, 4, 4, 4});
  for (int64_t i = 0; i < target.size(); ++i) probs[target[i] * 64 + i] = 1.0;
  LabelMap lm{Tensor<uint8_t>({4, 4, 4}, target.vec()), int(K)};
  CHECK(dice_loss(probs, lm).value < 1e-5);
}

TEST_CASE("dice loss binary analytic case: overlap 2 of 4/4 -> 0.5") {
  // a single-foreground patch: 8 voxels, target marks 4, prediction marks 4
  // hard voxels with overlap 2
  Tensor<uint8_t> target({2, 2, 2});
  for (int64_t i = 0; i < 4; ++i) target[i] = 1;
  Tensor<double> probs({2, 2, 2, 2});
  // prediction: voxels 2..5 are class 1 (overlap with {0..3} is {2,3})
  for (int64_t v = 0; v < 8; ++v) {
    const bool pred1 = v >= 2 && v < 6;
    probs[0 * 8 + v] = pred1 ? 0.0 : 1.0;
    probs[1 * 8 + v] = pred1 ? 1.0 : 0.0;
  }
  LabelMap lm{Tensor<uint8_t>({2, 2, 2}, target.vec()), 2};
  const auto lv = dice_loss(probs, lm, 0.0);
  // per-class: background overlap 2 of 4/4 -> 0.5; class1 the same
  CHECK(lv.value == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("dice loss equals the brute-force summation oracle") {
  for (uint64_t seed : {10u, 11u, 12u}) {
    const auto probs = random_softmax({3, 4, 4, 4}, seed);
    Tensor<uint8_t> target({4, 4, 4});
    Rng rng(seed + 100);
    for (int64_t i = 0; i < target.size(); ++i)
      target[i] = static_cast<uint8_t>(rng.below(3));
    LabelMap lm{Tensor<uint8_t>({4, 4, 4}, target.vec()), 3};
    const double mine = dice_loss(probs, lm).value;
    const double oracle = dice_oracle(probs, target, 1e-6);
    CHECK(mine == doctest::Approx(oracle).epsilon(1e-9));
  }
}

TEST_CASE("dice loss stays within [0, 1] up to smoothing slack") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    const auto probs = random_softmax({4, 2, 2, 2}, 50 + seed);
    Tensor<uint8_t> target({2, 2, 2});
    Rng rng(90 + seed);
    for (int64_t i = 0; i < target.size(); ++i)
      target[i] = static_cast<uint8_t>(rng.below(4));
    LabelMap lm{Tensor<uint8_t>({2, 2, 2}, target.vec()), 4};
    const double v = dice_loss(probs, lm).value;
    CHECK(v >= 0.0);
    CHECK(v <= 1.0 + 1e-6);
  }
}

TEST_CASE("bce analytic values and gradient") {
  CHECK(bce_loss(0.5, 1.0).value == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(bce_loss(1.0 - 1e-9, 1.0).value < 1e-6);
  CHECK(bce_loss(0.2, 0.0).value >= 0.0);

  // d/ds_hat at (0.3, 0) = 1/(1-0.3)
  Tape<double> tp;
  auto p = tp.input(Tensor<double>({1}, 0.3), /*needs_grad=*/true);
  tp.backward(tp.bce_loss(p, 0.0));
  const double analytic = tp.grad(p)[0];
  CHECK(analytic == doctest::Approx(1.0 / 0.7).epsilon(1e-9));

  const double eps = 1e-6;
  const double num =
      (bce_loss(0.3 + eps, 0.0).value - bce_loss(0.3 - eps, 0.0).value) / (2 * eps);
  CHECK(analytic == doctest::Approx(num).epsilon(1e-6));
}

TEST_CASE("bce is convex in s_hat (midpoint inequality on sampled triples)") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = rng.uniform(0.01, 0.99);
    const double b = rng.uniform(0.01, 0.99);
    const double s = rng.below(2) ? 1.0 : 0.0;
    const double mid = bce_loss(0.5 * (a + b), s).value;
    const double avg = 0.5 * (bce_loss(a, s).value + bce_loss(b, s).value);
    CHECK(mid <= avg + 1e-12);
  }
}

namespace {

SegSystem<double> toy_system(uint64_t seed) {
  NetworkConfig c;
  c.unet_depth = 1;
  c.base_width = 2;
  c.dense_blocks = 1;
  c.growth = 2;
  c.embed_dim = 4;
  c.head_hidden = 4;
  c.num_classes = 2;
  return SegSystem<double>(c, seed);
}

std::vector<PairCrops<double>> toy_batch(uint64_t seed, size_t n) {
  Rng rng(seed);
  std::vector<PairCrops<double>> batch(n);
  for (auto& pc : batch) {
    pc.xi = Tensor<double>({2, 2, 2});
    pc.xj = Tensor<double>({2, 2, 2});
    pc.yi = Tensor<uint8_t>({2, 2, 2});
    pc.yj = Tensor<uint8_t>({2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) {
      pc.xi[i] = rng.unit();
      pc.xj[i] = rng.unit();
      pc.yi[i] = static_cast<uint8_t>(rng.below(2));
      pc.yj[i] = static_cast<uint8_t>(rng.below(2));
    }
    pc.same_subject = rng.below(2) == 0;
  }
  return batch;
}

}  // namespace

TEST_CASE("combined objective matches the hand formula on a toy batch") {
  auto sys = toy_system(3);
  const auto batch = toy_batch(4, 1);
  const auto& pc = batch[0];

  // independent scalar recomputation from the spec formula
  const auto ei = forward_encoder(sys.G, pc.xi);
  const auto ej = forward_encoder(sys.G, pc.xj);
  const auto pi = forward_segmenter(sys.S, ei);
  const auto pj = forward_segmenter(sys.S, ej);
  LabelMap li{Tensor<uint8_t>({2, 2, 2}, pc.yi.vec()), 2};
  LabelMap lj{Tensor<uint8_t>({2, 2, 2}, pc.yj.vec()), 2};
  const double lsi = dice_loss(pi, li).value;
  const double lsj = dice_loss(pj, lj).value;
  const double ld =
      bce_loss(forward_discriminator(sys.D, ei, ej), pc.same_subject ? 1.0 : 0.0).value;

  const double lambda = 2.5;
  const auto obj = combined_objective(sys, batch, lambda);
  CHECK(obj.seg_enc_loss == doctest::Approx(lsi + lsj - lambda * ld).epsilon(1e-9));
  CHECK(obj.disc_loss == doctest::Approx(lambda * ld).epsilon(1e-9));
}

TEST_CASE("lambda = 0 reduces seg_enc to the pure Dice terms") {
  auto sys = toy_system(5);
  const auto batch = toy_batch(6, 3);
  const auto obj = combined_objective(sys, batch, 0.0);
  CHECK(obj.seg_enc_loss == doctest::Approx(2.0 * obj.mean_seg).epsilon(1e-12));
  CHECK(obj.disc_loss == 0.0);
}

TEST_CASE("disc_loss scales linearly in lambda and the sign contract holds") {
  auto sys = toy_system(7);
  const auto batch = toy_batch(8, 2);
  const auto o1 = combined_objective(sys, batch, 1.0);
  const auto o2 = combined_objective(sys, batch, 2.0);
  CHECK(o2.disc_loss == doctest::Approx(2.0 * o1.disc_loss).epsilon(1e-12));
  // seg_enc = seg_terms - lambda * mean_lD exactly: lowering lD raises seg_enc
  CHECK(o1.seg_enc_loss ==
        doctest::Approx(2.0 * o1.mean_seg - 1.0 * o1.mean_disc_bce).epsilon(1e-9));
  CHECK_THROWS_AS(combined_objective(sys, batch, -1.0), std::invalid_argument);
}
