#include "doctest.h"

#include <privseg/metrics.hpp>
#include <privseg/rng.hpp>

using namespace privseg;

namespace {

Volume random_vol(Shape s, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Volume v;
  v.voxels = Tensor<float>(std::move(s));
  for (int64_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = float(rng.uniform(lo, hi));
  return v;
}

}  // namespace

TEST_CASE("dice scores: identical maps score 1 everywhere") {
  Tensor<uint8_t> m({4, 4, 4});
  Rng rng(1);
  for (int64_t i = 0; i < m.size(); ++i) m[i] = static_cast<uint8_t>(rng.below(3));
  const auto ds = dice_scores(m, m, 3);
  for (double v : ds.per_class) CHECK(v == doctest::Approx(1.0));
  CHECK(ds.overall == doctest::Approx(1.0));
}

TEST_CASE("dice scores: binary toy 4/4 with overlap 2 gives 0.5") {
  Tensor<uint8_t> gt({2, 2, 2}), pred({2, 2, 2});
  for (int64_t i = 0; i < 4; ++i) gt[i] = 1;
  for (int64_t i = 2; i < 6; ++i) pred[i] = 1;
  const auto ds = dice_scores(pred, gt, 2);
  CHECK(ds.per_class[1] == doctest::Approx(0.5));
  CHECK(ds.overall == doctest::Approx(0.5));  // single foreground class
}

TEST_CASE("dice scores equal brute-force set-cardinality computation") {
  Rng rng(7);
  Tensor<uint8_t> gt({8, 8, 8}), pred({8, 8, 8});
  for (int64_t i = 0; i < gt.size(); ++i) {
    gt[i] = static_cast<uint8_t>(rng.below(3));
    pred[i] = static_cast<uint8_t>(rng.below(3));
  }
  const auto ds = dice_scores(pred, gt, 3);
  double fg_total = 0.0, weighted = 0.0;
  for (int k = 0; k < 3; ++k) {
    int64_t np = 0, nt = 0, ni = 0;
    for (int64_t i = 0; i < gt.size(); ++i) {
      if (pred[i] == k) ++np;
      if (gt[i] == k) ++nt;
      if (pred[i] == k && gt[i] == k) ++ni;
    }
    const double d = (np + nt == 0) ? 1.0 : 2.0 * double(ni) / double(np + nt);
    CHECK(ds.per_class[static_cast<size_t>(k)] == doctest::Approx(d).epsilon(1e-12));
    if (k > 0) {
      fg_total += double(nt);
      weighted += double(nt) * d;
    }
  }
  CHECK(ds.overall == doctest::Approx(weighted / fg_total).epsilon(1e-12));
}

TEST_CASE("dice per-class values are symmetric in (pred, gt)") {
  Rng rng(8);
  Tensor<uint8_t> a({6, 6, 6}), b({6, 6, 6});
  for (int64_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<uint8_t>(rng.below(4));
    b[i] = static_cast<uint8_t>(rng.below(4));
  }
  const auto ab = dice_scores(a, b, 4);
  const auto ba = dice_scores(b, a, 4);
  for (size_t k = 0; k < 4; ++k)
    CHECK(ab.per_class[k] == doctest::Approx(ba.per_class[k]).epsilon(1e-12));
}

TEST_CASE("ms-ssim self similarity and symmetry") {
  const auto a = random_vol({32, 32, 32}, 2);
  const auto b = random_vol({32, 32, 32}, 3);
  CHECK(ms_ssim(a, a, 2) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ms_ssim(a, b, 2) == doctest::Approx(ms_ssim(b, a, 2)).epsilon(1e-9));
}

TEST_CASE("single-scale constant-vs-shifted matches the closed form") {
  Volume a, b;
  a.voxels = Tensor<float>({16, 16, 16}, 0.4f);
  b.voxels = Tensor<float>({16, 16, 16}, 0.5f);
  // sigma terms vanish; range L = 0.1:
  // ssim = lum * cs; cs = C2/C2 = 1; lum = (2 ab + C1)/(a^2 + b^2 + C1)
  const double L = 0.5 - 0.4;
  const double c1 = (0.01 * L) * (0.01 * L);
  const double expect = (2.0 * 0.4 * 0.5 + c1) / (0.4 * 0.4 + 0.5 * 0.5 + c1);
  CHECK(ms_ssim(a, b, 1) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("ms-ssim errors on too-small volumes, suggesting fewer scales") {
  const auto a = random_vol({16, 16, 16}, 4);
  const auto b = random_vol({16, 16, 16}, 5);
  try {
    ms_ssim(a, b, 3);  // needs 11*4 = 44 per axis
    FAIL("expected error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("fewer scales") != std::string::npos);
  }
  CHECK_NOTHROW(ms_ssim(a, b, 1));
}

TEST_CASE("ms-ssim invariant under joint affine intensity change") {
  const auto a = random_vol({24, 24, 24}, 6);
  const auto b = random_vol({24, 24, 24}, 7);
  Volume a2 = a, b2 = b;
  for (int64_t i = 0; i < a.voxels.size(); ++i) {
    a2.voxels[i] = 3.0f * a.voxels[i] + 0.7f;
    b2.voxels[i] = 3.0f * b.voxels[i] + 0.7f;
  }
  CHECK(ms_ssim(a, b, 2) == doctest::Approx(ms_ssim(a2, b2, 2)).epsilon(1e-4));
}

TEST_CASE("ks statistic: identical, disjoint and random-vs-oracle") {
  std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(ks_statistic(x, x) == doctest::Approx(0.0));
  std::vector<double> y{10, 11, 12};
  CHECK(ks_statistic(x, y) == doctest::Approx(1.0));

  Rng rng(9);
  std::vector<double> a(50), b(50);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal(0.5, 1.3);
  // brute-force oracle: evaluate the ECDF gap at every sample point
  double oracle = 0.0;
  auto ecdf = [](const std::vector<double>& s, double t) {
    size_t c = 0;
    for (double v : s)
      if (v <= t) ++c;
    return double(c) / double(s.size());
  };
  for (double t : a) oracle = std::max(oracle, std::abs(ecdf(a, t) - ecdf(b, t)));
  for (double t : b) oracle = std::max(oracle, std::abs(ecdf(a, t) - ecdf(b, t)));
  CHECK(ks_statistic(a, b) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("distribution report carries means, ks and histograms") {
  std::vector<double> intra{0.9, 0.92, 0.95}, inter{0.5, 0.55, 0.6};
  const auto r = distribution_report(intra, inter, 10);
  CHECK(r.intra_mean == doctest::Approx((0.9 + 0.92 + 0.95) / 3));
  CHECK(r.inter_mean == doctest::Approx((0.5 + 0.55 + 0.6) / 3));
  CHECK(r.ks == doctest::Approx(1.0));
  CHECK(r.bin_edges.size() == 11);
  int64_t tot = 0;
  for (int64_t c : r.intra_hist) tot += c;
  CHECK(tot == 3);
}
