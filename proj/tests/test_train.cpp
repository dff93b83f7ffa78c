#include "doctest.h"

#include <privseg/attacks.hpp>
#include <privseg/phantom.hpp>
#include <privseg/train.hpp>

using namespace privseg;

namespace {

Dataset<float> tiny_dataset(int subjects, int sessions, int64_t extent, int K,
                            std::array<double, 3> fractions, uint64_t seed) {
  PhantomConfig pc;
  pc.shape = {extent, extent, extent};
  pc.num_classes = K;
  std::vector<SubjectRecord> records;
  std::vector<Tensor<float>> vols;
  std::vector<Tensor<uint8_t>> labs;
  for (int s = 0; s < subjects; ++s)
    for (int t = 0; t < sessions; ++t) {
      auto [v, l] = generate_phantom(seed * 1000 + s, t, pc);
      records.push_back({"subj" + std::to_string(s), "sess" + std::to_string(t), "", ""});
      vols.push_back(std::move(v.voxels));
      labs.push_back(std::move(l.labels));
    }
  Dataset<float> d;
  d.manifest = split_stratified(records, fractions, seed);
  d.volumes = std::move(vols);
  d.labels = std::move(labs);
  d.num_classes = K;
  return d;
}

NetworkConfig tiny_net() {
  NetworkConfig c;
  c.unet_depth = 1;
  c.base_width = 2;
  c.dense_blocks = 2;
  c.growth = 2;
  c.embed_dim = 8;
  c.head_hidden = 8;
  c.num_classes = 3;
  return c;
}

TrainConfig tiny_train(uint64_t seed) {
  TrainConfig c;
  c.lambda = 1.0;
  c.lr = 1e-3;
  c.batch_pairs = 2;
  c.epochs = 2;
  c.iters_per_epoch = 3;
  c.patch_size = {8, 8, 8};
  c.seed = seed;
  c.eval_pairs = 16;
  return c;
}

std::vector<Tensor<float>> snapshot(std::vector<Param<float>*> params) {
  std::vector<Tensor<float>> out;
  for (auto* p : params) out.push_back(p->value);
  return out;
}

double total_diff(std::vector<Param<float>*> params, const std::vector<Tensor<float>>& snap) {
  double d = 0.0;
  for (size_t i = 0; i < params.size(); ++i) d += max_abs_diff(params[i]->value, snap[i]);
  return d;
}

// reference Adam used by the single-step oracle
void reference_adam(std::vector<Tensor<float>>& params,
                    const std::vector<Tensor<float>>& grads,
                    std::vector<Tensor<float>>& m, std::vector<Tensor<float>>& v,
                    int64_t t, double lr) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (size_t i = 0; i < params.size(); ++i)
    for (int64_t k = 0; k < params[i].size(); ++k) {
      const double g = grads[i][k];
      const double mn = b1 * double(m[i][k]) + (1 - b1) * g;
      const double vn = b2 * double(v[i][k]) + (1 - b2) * g * g;
      m[i][k] = float(mn);
      v[i][k] = float(vn);
      params[i][k] -= float(lr * (mn / (1 - std::pow(b1, double(t)))) /
                            (std::sqrt(vn / (1 - std::pow(b2, double(t)))) + eps));
    }
}

}  // namespace

TEST_CASE("zero pretraining epochs leave parameters untouched") {
  const auto data = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 1);
  TrainState<float> st(tiny_train(3), tiny_net());
  const auto g0 = snapshot(st.sys.group("G"));
  const auto s0 = snapshot(st.sys.group("S"));
  const auto d0 = snapshot(st.sys.group("D"));
  pretrain_encoder(st, data, 0);
  pretrain_task_networks(st, data, 0);
  CHECK(total_diff(st.sys.group("G"), g0) == 0.0);
  CHECK(total_diff(st.sys.group("S"), s0) == 0.0);
  CHECK(total_diff(st.sys.group("D"), d0) == 0.0);
}

TEST_CASE("pretraining moves the right groups and lowers the recon loss") {
  const auto data = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 2);
  auto cfg = tiny_train(4);
  cfg.iters_per_epoch = 6;
  TrainState<float> st(cfg, tiny_net());
  const auto s0 = snapshot(st.sys.group("S"));
  const auto d0 = snapshot(st.sys.group("D"));

  // reconstruction loss under the fresh encoder
  const size_t rec = data.manifest.indices_of(Split::kTrain)[0];
  auto recon_mse = [&]() {
    const auto enc = forward_encoder(st.sys.G, data.volumes[rec]);
    double acc = 0.0;
    for (int64_t i = 0; i < enc.size(); ++i) {
      const double d = double(enc[i]) - double(data.volumes[rec][i]);
      acc += d * d;
    }
    return acc / double(enc.size());
  };
  const double before = recon_mse();
  pretrain_encoder(st, data, 3);
  CHECK(recon_mse() < before);
  CHECK(total_diff(st.sys.group("S"), s0) == 0.0);  // encoder pretraining only
  CHECK(total_diff(st.sys.group("D"), d0) == 0.0);

  pretrain_task_networks(st, data, 1);
  CHECK(total_diff(st.sys.group("S"), s0) > 0.0);
  CHECK(total_diff(st.sys.group("D"), d0) > 0.0);
}

TEST_CASE("adversarial iteration: lambda=0 decouples the discriminator") {
  const auto data = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 5);
  auto cfg = tiny_train(6);
  cfg.lambda = 0.0;
  cfg.patch_size = {16, 16, 16};  // crop == volume, no positional randomness
  TrainState<float> st(cfg, tiny_net());
  const auto d0 = snapshot(st.sys.group("D"));
  const auto batch = sample_pairs(data.manifest, Split::kTrain, 2, 9);

  // encoder gradient under lambda=0 equals the pure segmentation gradient
  TrainState<float> ref(cfg, tiny_net());
  zero_grads(ref.sys.group("G"));
  for (const auto& pr : batch) {
    Tape<float> tp;
    const auto& vi = data.volumes[pr.i];
    auto xi = tp.input(Tensor<float>({1, 16, 16, 16}, vi.vec()));
    auto ei = ref.sys.G.forward(tp, xi, true);
    auto pi = tp.softmax_channels(ref.sys.S.forward(tp, ei, true));
    auto lsi = tp.dice_loss(pi, data.labels[pr.i], 1e-6f);
    const auto& vj = data.volumes[pr.j];
    auto xj = tp.input(Tensor<float>({1, 16, 16, 16}, vj.vec()));
    auto ej = ref.sys.G.forward(tp, xj, true);
    auto pj = tp.softmax_channels(ref.sys.S.forward(tp, ej, true));
    auto lsj = tp.dice_loss(pj, data.labels[pr.j], 1e-6f);
    tp.backward(tp.wsum({lsi, lsj}, {0.5f, 0.5f}));
  }
  std::vector<Tensor<float>> seg_only_grads;
  for (auto* p : ref.sys.group("G")) seg_only_grads.push_back(p->grad);

  adversarial_iteration(st, data, batch);
  CHECK(total_diff(st.sys.group("D"), d0) == 0.0);  // D step skipped entirely

  // grads captured inside the iteration match: rerun capture via a fresh state
  TrainState<float> st2(cfg, tiny_net());
  zero_grads(st2.sys.group("G"));
  zero_grads(st2.sys.group("S"));
  for (const auto& pr : batch) {
    Tape<float> tp;
    auto lift = [&](const Tensor<float>& v) {
      return tp.input(Tensor<float>({1, 16, 16, 16}, v.vec()));
    };
    auto ei = st2.sys.G.forward(tp, lift(data.volumes[pr.i]), true);
    auto ej = st2.sys.G.forward(tp, lift(data.volumes[pr.j]), true);
    auto pi = tp.softmax_channels(st2.sys.S.forward(tp, ei, true));
    auto pj = tp.softmax_channels(st2.sys.S.forward(tp, ej, true));
    auto lsi = tp.dice_loss(pi, data.labels[pr.i], 1e-6f);
    auto lsj = tp.dice_loss(pj, data.labels[pr.j], 1e-6f);
    auto shat = std::as_const(st2.sys.D).pair_prob(tp, ei, ej);
    auto ld = tp.bce_loss(shat, pr.same_subject ? 1.0f : 0.0f);
    tp.backward(tp.wsum({lsi, lsj, ld}, {0.5f, 0.5f, 0.0f}));
  }
  auto g2 = st2.sys.group("G");
  for (size_t i = 0; i < g2.size(); ++i)
    CHECK(max_abs_diff(g2[i]->grad, seg_only_grads[i]) <= 1e-7);
}

TEST_CASE("single-step oracle: one iteration equals the hand-stepped reference") {
  const auto data = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 7);
  auto cfg = tiny_train(8);
  cfg.lambda = 1.5;
  cfg.clip_norm = 0.0;            // oracle replicates the raw adaptive step
  cfg.patch_size = {16, 16, 16};  // no crop randomness
  const auto batch = sample_pairs(data.manifest, Split::kTrain, 2, 10);

  TrainState<float> st(cfg, tiny_net());
  TrainState<float> ref(cfg, tiny_net());

  // --- reference: record step-1 gradients, hand-apply Adam ---
  auto gp = ref.sys.group("G");
  auto sp = ref.sys.group("S");
  auto dp = ref.sys.group("D");
  zero_grads(gp);
  zero_grads(sp);
  const float B = float(batch.size());
  for (const auto& pr : batch) {
    Tape<float> tp;
    auto lift = [&](const Tensor<float>& v) {
      return tp.input(Tensor<float>({1, 16, 16, 16}, v.vec()));
    };
    auto ei = ref.sys.G.forward(tp, lift(data.volumes[pr.i]), true);
    auto ej = ref.sys.G.forward(tp, lift(data.volumes[pr.j]), true);
    auto pi = tp.softmax_channels(ref.sys.S.forward(tp, ei, true));
    auto pj = tp.softmax_channels(ref.sys.S.forward(tp, ej, true));
    auto lsi = tp.dice_loss(pi, data.labels[pr.i], 1e-6f);
    auto lsj = tp.dice_loss(pj, data.labels[pr.j], 1e-6f);
    auto shat = std::as_const(ref.sys.D).pair_prob(tp, ei, ej);
    auto ld = tp.bce_loss(shat, pr.same_subject ? 1.0f : 0.0f);
    tp.backward(tp.wsum({lsi, lsj, ld}, {1 / B, 1 / B, -float(cfg.lambda) / B}));
  }
  auto hand_step = [&](std::vector<Param<float>*> ps, double lr) {
    std::vector<Tensor<float>> vals, grads, m, v;
    for (auto* p : ps) {
      vals.push_back(p->value);
      grads.push_back(p->grad);
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
    reference_adam(vals, grads, m, v, 1, lr);
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = vals[i];
  };
  hand_step(gp, cfg.lr);
  hand_step(sp, cfg.lr);

  // step-2 gradients at the updated encoder
  zero_grads(dp);
  for (const auto& pr : batch) {
    Tape<float> tp;
    auto lift = [&](const Tensor<float>& v) {
      return tp.input(Tensor<float>({1, 16, 16, 16}, v.vec()));
    };
    auto ei = std::as_const(ref.sys.G).forward(tp, lift(data.volumes[pr.i]));
    auto ej = std::as_const(ref.sys.G).forward(tp, lift(data.volumes[pr.j]));
    auto shat = ref.sys.D.pair_prob(tp, ei, ej, true);
    auto ld = tp.bce_loss(shat, pr.same_subject ? 1.0f : 0.0f);
    tp.backward(tp.wsum({ld}, {float(cfg.lambda) / B}));
  }
  hand_step(dp, cfg.lr);

  // --- implementation ---
  adversarial_iteration(st, data, batch);

  for (const char* g : {"G", "S", "D"}) {
    auto pa = st.sys.group(g);
    auto pb = ref.sys.group(g);
    double worst = 0.0;
    for (size_t i = 0; i < pa.size(); ++i)
      worst = std::max(worst, max_abs_diff(pa[i]->value, pb[i]->value));
    INFO("group ", g, " worst delta ", worst);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("deterministic replay: identical histories from the same seed") {
  const auto data = tiny_dataset(6, 2, 16, 3, {0.7, 0.3, 0.0}, 11);
  TrainState<float> a(tiny_train(12), tiny_net());
  TrainState<float> b(tiny_train(12), tiny_net());
  train_adversarial(a, data);
  train_adversarial(b, data);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].mean_seg_loss == b.history[i].mean_seg_loss);
    CHECK(a.history[i].mean_disc_loss == b.history[i].mean_disc_loss);
    CHECK(a.history[i].disc_train_accuracy == b.history[i].disc_train_accuracy);
    CHECK(a.history[i].val_dice_overall == b.history[i].val_dice_overall);
  }
}

TEST_CASE("checkpoint round trip: save/load then one step is bitwise equal") {
  const auto data = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 13);
  auto cfg = tiny_train(14);
  TrainState<float> st(cfg, tiny_net());
  // a couple of warm-up iterations so optimizer moments are nontrivial
  const auto warm = sample_pairs(data.manifest, Split::kTrain, 2, 15);
  adversarial_iteration(st, data, warm);
  adversarial_iteration(st, data, warm);

  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "privseg_resume").string();
  fs::remove_all(dir);
  save_train_state(dir, st);
  auto resumed = load_train_state<float>(dir);

  const auto batch = sample_pairs(data.manifest, Split::kTrain, 2, 16);
  adversarial_iteration(st, data, batch);
  adversarial_iteration(resumed, data, batch);
  for (const char* g : {"G", "S", "D"}) {
    auto pa = st.sys.group(g);
    auto pb = resumed.sys.group(g);
    for (size_t i = 0; i < pa.size(); ++i)
      CHECK(max_abs_diff(pa[i]->value, pb[i]->value) == 0.0);
  }
  CHECK(st.rng.save_state() == resumed.rng.save_state());
  fs::remove_all(dir);
}

TEST_CASE("divergence aborts with a diagnostic") {
  const auto data = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 17);
  TrainState<float> st(tiny_train(18), tiny_net());
  // poison the encoder's final bias: the NaN reaches every loss term
  st.sys.group("G").back()->value[0] = std::numeric_limits<float>::quiet_NaN();
  const auto batch = sample_pairs(data.manifest, Split::kTrain, 2, 19);
  CHECK_THROWS_WITH_AS(adversarial_iteration(st, data, batch),
                       doctest::Contains("diverged"), std::runtime_error);
}

TEST_CASE("evaluate_epoch reports the full metric schema and rejects empty splits") {
  const auto data = tiny_dataset(6, 2, 16, 3, {0.5, 0.25, 0.25}, 20);
  TrainState<float> st(tiny_train(21), tiny_net());
  const auto m = evaluate_epoch(st, data, Split::kVal);
  CHECK(std::isfinite(m.val_dice_overall));
  CHECK(m.val_dice_per_class.size() == 3);
  CHECK(std::isfinite(m.val_d_adv_accuracy));
  CHECK(std::isfinite(m.val_mean_disc_bce));
  const auto j = m.to_json();
  for (const char* key : {"epoch", "val_dice_overall", "val_dice_per_class",
                          "val_d_adv_accuracy", "val_mean_disc_bce"})
    CHECK(j.contains(key));
  // untrained network: chance-level dice reported, not asserted
  INFO("untrained overall dice ", m.val_dice_overall);

  const auto no_val = tiny_dataset(4, 2, 16, 3, {1.0, 0.0, 0.0}, 22);
  CHECK_THROWS_AS(evaluate_epoch(st, no_val, Split::kVal), std::invalid_argument);
}

TEST_CASE("balanced batches: positive fraction within one pair of a half") {
  const auto data = tiny_dataset(5, 2, 16, 3, {1.0, 0.0, 0.0}, 23);
  Rng rng(24);
  for (int trial = 0; trial < 10; ++trial) {
    const size_t n = 1 + rng.below(9);
    const auto batch = sample_pairs(data.manifest, Split::kTrain, n, rng.u64());
    size_t pos = 0;
    for (const auto& p : batch)
      if (p.same_subject) ++pos;
    CHECK(std::abs(double(pos) - double(n) / 2.0) <= 1.0);
  }
}

TEST_CASE("discriminator accuracy vs shuffled labels sits at chance") {
  const auto data = tiny_dataset(8, 2, 16, 3, {1.0, 0.0, 0.0}, 25);
  TrainState<float> st(tiny_train(26), tiny_net());
  const auto pairs = sample_pairs(data.manifest, Split::kTrain, 600, 27);
  std::vector<std::pair<Tensor<float>, Tensor<float>>> vols;
  std::vector<bool> shuffled;
  Rng coin(28);
  for (const auto& pr : pairs) {
    vols.emplace_back(data.volumes[pr.i], data.volumes[pr.j]);
    shuffled.push_back(coin.below(2) == 0);  // permutation control
  }
  const double acc = adversarial_accuracy(st.sys, vols, shuffled);
  CHECK(acc == doctest::Approx(0.5).epsilon(0.1));
  CHECK(std::abs(acc - 0.5) <= 0.05);
}

TEST_CASE("monotone pressure: D accuracy trend is non-negative on a frozen encoder") {
  const auto data = tiny_dataset(6, 2, 16, 3, {1.0, 0.0, 0.0}, 29);
  auto cfg = tiny_train(30);
  cfg.lr = 3e-3;
  TrainState<float> st(cfg, tiny_net());
  auto d_params = st.sys.group("D");
  Adam<float> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<double> acc_curve;
  Rng rng(31);
  for (int it = 0; it < 100; ++it) {
    const auto batch = sample_pairs(data.manifest, Split::kTrain, 4, rng.u64());
    zero_grads(d_params);
    int ok = 0;
    for (const auto& pr : batch) {
      Tape<float> tp;
      auto lift = [&](const Tensor<float>& v) {
        return tp.input(Tensor<float>({1, 16, 16, 16}, v.vec()));
      };
      auto ei = std::as_const(st.sys.G).forward(tp, lift(data.volumes[pr.i]));
      auto ej = std::as_const(st.sys.G).forward(tp, lift(data.volumes[pr.j]));
      auto shat = st.sys.D.pair_prob(tp, ei, ej, true);
      if ((double(tp.value(shat)[0]) > 0.5) == pr.same_subject) ++ok;
      auto ld = tp.bce_loss(shat, pr.same_subject ? 1.0f : 0.0f);
      tp.backward(tp.wsum({ld}, {0.25f}));
    }
    clip_global_norm(d_params, 5.0);
    adam.step(d_params);
    acc_curve.push_back(double(ok) / 4.0);
  }
  // moving average then least-squares slope
  std::vector<double> smooth;
  const int w = 10;
  for (size_t i = 0; i + w <= acc_curve.size(); ++i) {
    double s = 0;
    for (int k = 0; k < w; ++k) s += acc_curve[i + k];
    smooth.push_back(s / w);
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(smooth.size());
  for (size_t i = 0; i < smooth.size(); ++i) {
    sx += double(i);
    sy += smooth[i];
    sxx += double(i) * double(i);
    sxy += double(i) * smooth[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  INFO("first ", smooth.front(), " last ", smooth.back(), " slope ", slope);
  CHECK(slope >= 0.0);
}

TEST_CASE("train config JSON round trip") {
  TrainConfig c = tiny_train(33);
  c.lambda = 4.5;
  c.aligned_crops = false;
  const auto j = c.to_json();
  const auto c2 = TrainConfig::from_json(j);
  CHECK(c2.lambda == 4.5);
  CHECK_FALSE(c2.aligned_crops);
  CHECK(c2.patch_size == c.patch_size);
  auto bad = j;
  bad["lambda"] = -2.0;
  CHECK_THROWS_AS(TrainConfig::from_json(bad), std::invalid_argument);
}
