#include "doctest.h"

#include <privseg/degrade.hpp>
#include <privseg/phantom.hpp>

#include <cmath>

using namespace privseg;

namespace {

// Numeric-integration oracle for the Rician mean: E[R] with
// pdf(x) = (x/sigma^2) exp(-(x^2+nu^2)/(2 sigma^2)) I0(x nu / sigma^2).
double rician_mean_oracle(double nu, double sigma) {
  const double hi = nu + 12.0 * sigma;
  const int n = 20000;  // Simpson rule, even count
  const double h = hi / n;
  auto f = [&](double x) {
    if (x <= 0.0) return 0.0;
    const double z = x * nu / (sigma * sigma);
    const double pdf = (x / (sigma * sigma)) *
                       std::exp(-(x * x + nu * nu) / (2.0 * sigma * sigma)) *
                       std::cyl_bessel_i(0.0, z);
    return x * pdf;
  };
  double acc = f(0.0) + f(hi);
  for (int i = 1; i < n; ++i) acc += f(i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

Volume constant_volume(double c, int64_t n) {
  Volume v;
  v.voxels = Tensor<float>({n, n, n}, float(c));
  return v;
}

}  // namespace

TEST_CASE("infinite SNR degenerates to the magnitude image") {
  auto [v, l] = generate_phantom(3, 1, PhantomConfig{});
  (void)l;
  const auto out = add_rician_noise(v, std::numeric_limits<double>::infinity(), 99);
  for (int64_t i = 0; i < v.voxels.size(); ++i)
    CHECK(out.voxels[i] == std::abs(v.voxels[i]));
}

TEST_CASE("rician noise is deterministic under a seed") {
  auto [v, l] = generate_phantom(4, 2, PhantomConfig{});
  (void)l;
  const auto a = add_rician_noise(v, 10.0, 5);
  const auto b = add_rician_noise(v, 10.0, 5);
  const auto c = add_rician_noise(v, 10.0, 6);
  CHECK(max_abs_diff(a.voxels, b.voxels) == 0.0);
  CHECK(max_abs_diff(a.voxels, c.voxels) > 0.0);
}

TEST_CASE("sample mean at 10 dB matches the analytic Rician mean within 2%") {
  const double c = 0.5;
  const Volume v = constant_volume(c, 50);  // 125k voxels
  const double sigma = c * std::pow(10.0, -10.0 / 20.0);  // rms of a constant is c
  const auto noisy = add_rician_noise(v, 10.0, 42);
  double mean = 0.0;
  for (int64_t i = 0; i < noisy.voxels.size(); ++i) mean += noisy.voxels[i];
  mean /= double(noisy.voxels.size());
  const double expect = rician_mean_oracle(c, sigma);
  INFO("sample ", mean, " analytic ", expect);
  CHECK(std::abs(mean - expect) / expect < 0.02);
}

TEST_CASE("rician rejects NaN snr") {
  const Volume v = constant_volume(0.5, 4);
  CHECK_THROWS_AS(add_rician_noise(v, std::nan(""), 1), std::invalid_argument);
}

TEST_CASE("downsample identity and constants") {
  auto [v, l] = generate_phantom(5, 3, PhantomConfig{});
  (void)l;
  const auto same = downsample(v, {1, 1, 1});
  CHECK(max_abs_diff(same.voxels, v.voxels) == 0.0);

  const Volume c = constant_volume(0.37, 8);
  const auto dc = downsample(c, {2, 4, 3});
  for (int64_t i = 0; i < dc.voxels.size(); ++i)
    CHECK(dc.voxels[i] == doctest::Approx(0.37f));
}

TEST_CASE("downsample factor 2 equals brute-force block means, shape preserved") {
  Volume v;
  v.voxels = Tensor<float>({4, 4, 4});
  for (int64_t i = 0; i < 64; ++i) v.voxels[i] = float(i);
  const auto out = downsample(v, {2, 2, 2});
  CHECK(out.voxels.shape() == v.voxels.shape());
  for (int64_t h = 0; h < 4; ++h)
    for (int64_t w = 0; w < 4; ++w)
      for (int64_t d = 0; d < 4; ++d) {
        double acc = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c2 = 0; c2 < 2; ++c2)
              acc += v.voxels.at((h / 2) * 2 + a, (w / 2) * 2 + b, (d / 2) * 2 + c2);
        CHECK(out.voxels.at(h, w, d) == doctest::Approx(acc / 8.0));
      }
}

TEST_CASE("downsample rejects factor < 1") {
  const Volume v = constant_volume(0.5, 4);
  CHECK_THROWS_AS(downsample(v, {0, 1, 1}), std::invalid_argument);
}
