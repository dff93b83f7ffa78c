#include "doctest.h"

#include <privseg/metrics.hpp>
#include <privseg/phantom.hpp>

using namespace privseg;

namespace {

PhantomConfig desk_cfg() {
  PhantomConfig c;
  c.shape = {32, 32, 32};
  return c;
}

}  // namespace

TEST_CASE("phantom generation is bit-deterministic under seeds") {
  const auto cfg = desk_cfg();
  const auto [v1, l1] = generate_phantom(7, 3, cfg);
  const auto [v2, l2] = generate_phantom(7, 3, cfg);
  CHECK(max_abs_diff(v1.voxels, v2.voxels) == 0.0);
  CHECK(l1.labels.vec() == l2.labels.vec());
  v1.validate();
  l1.validate_against(v1);
}

TEST_CASE("intensities normalized and labels in range") {
  const auto [v, l] = generate_phantom(11, 0, desk_cfg());
  for (int64_t i = 0; i < v.voxels.size(); ++i) {
    CHECK(v.voxels[i] >= 0.0f);
    CHECK(v.voxels[i] <= 1.0f);
    CHECK(l.labels[i] < 4);
  }
  // all K classes appear at desk scale
  std::array<int64_t, 4> counts{};
  for (int64_t i = 0; i < l.labels.size(); ++i) ++counts[l.labels[i]];
  for (int64_t c : counts) CHECK(c > 0);
}

TEST_CASE("same subject over sessions overlaps more than different subjects") {
  const auto cfg = desk_cfg();
  std::vector<double> intra, inter;
  std::vector<LabelMap> first_sessions;
  for (uint64_t s = 0; s < 20; ++s) {
    const auto [va, la] = generate_phantom(s, 0, cfg);
    const auto [vb, lb] = generate_phantom(s, 1, cfg);
    (void)va;
    (void)vb;
    int64_t inter_cnt = 0, a_cnt = 0, b_cnt = 0;
    for (int64_t i = 0; i < la.labels.size(); ++i) {
      const bool fa = la.labels[i] > 0, fb = lb.labels[i] > 0;
      if (fa && fb && la.labels[i] == lb.labels[i]) ++inter_cnt;
      if (fa) ++a_cnt;
      if (fb) ++b_cnt;
    }
    intra.push_back(2.0 * double(inter_cnt) / double(a_cnt + b_cnt));
    first_sessions.push_back(la);
  }
  for (size_t a = 0; a < first_sessions.size(); ++a) {
    const auto& la = first_sessions[a];
    const auto& lb = first_sessions[(a + 1) % first_sessions.size()];
    int64_t inter_cnt = 0, a_cnt = 0, b_cnt = 0;
    for (int64_t i = 0; i < la.labels.size(); ++i) {
      const bool fa = la.labels[i] > 0, fb = lb.labels[i] > 0;
      if (fa && fb && la.labels[i] == lb.labels[i]) ++inter_cnt;
      if (fa) ++a_cnt;
      if (fb) ++b_cnt;
    }
    inter.push_back(2.0 * double(inter_cnt) / double(a_cnt + b_cnt));
  }
  double mi = 0, me = 0;
  for (double v : intra) mi += v;
  for (double v : inter) me += v;
  mi /= double(intra.size());
  me /= double(inter.size());
  INFO("intra dice ", mi, " inter dice ", me);
  CHECK(mi > me);
}

TEST_CASE("zero session perturbation reproduces the volume exactly") {
  auto cfg = desk_cfg();
  cfg.session_deform_amp = 0.0;
  cfg.bias_amp = 0.0;
  cfg.noise_sigma = 0.0;
  const auto [v1, l1] = generate_phantom(5, 100, cfg);
  const auto [v2, l2] = generate_phantom(5, 200, cfg);
  CHECK(max_abs_diff(v1.voxels, v2.voxels) == 0.0);
  CHECK(l1.labels.vec() == l2.labels.vec());
  CHECK(ms_ssim(v1, v2, /*scales=*/2) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("phantom identity signal: intra MS-SSIM beats inter by > 0.05") {
  const auto cfg = desk_cfg();
  std::vector<Volume> s0, s1;
  for (uint64_t s = 0; s < 20; ++s) {
    s0.push_back(generate_phantom(s, 0, cfg).first);
    s1.push_back(generate_phantom(s, 1, cfg).first);
  }
  double intra = 0.0, inter = 0.0;
  for (size_t i = 0; i < s0.size(); ++i) intra += ms_ssim(s0[i], s1[i], 2);
  for (size_t i = 0; i < s0.size(); ++i)
    inter += ms_ssim(s0[i], s1[(i + 1) % s1.size()], 2);
  intra /= double(s0.size());
  inter /= double(s0.size());
  INFO("intra ", intra, " inter ", inter);
  CHECK(intra - inter > 0.05);
}

TEST_CASE("configuration errors") {
  auto cfg = desk_cfg();
  cfg.num_classes = 1;
  CHECK_THROWS_AS(generate_phantom(1, 1, cfg), std::invalid_argument);
  cfg = desk_cfg();
  cfg.shape = {2, 32, 32};
  CHECK_THROWS_AS(generate_phantom(1, 1, cfg), std::invalid_argument);
}

TEST_CASE("paper-scale layout configuration generates consistent shapes") {
  PhantomConfig cfg;
  cfg.shape = {144, 192, 160};
  cfg.num_classes = 6;
  const auto [v, l] = generate_phantom(1, 1, cfg);
  CHECK(v.voxels.shape() == Shape{144, 192, 160});
  CHECK(l.labels.shape() == v.voxels.shape());
  l.validate_against(v);
}
