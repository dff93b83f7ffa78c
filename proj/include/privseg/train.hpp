// train.hpp - pretraining stages and the alternating adversarial loop, with
// checkpointing and deterministic replay.
#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "privseg/checkpoint.hpp"
#include "privseg/dataset.hpp"
#include "privseg/losses.hpp"
#include "privseg/metrics.hpp"
#include "privseg/nets.hpp"
#include "privseg/optim.hpp"
#include "privseg/volume.hpp"
#include "privseg/volume_io.hpp"

namespace privseg {

struct TrainConfig {
  double lambda = 1.0;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int batch_pairs = 8;
  int epochs = 10;           // E_max (adversarial)
  int iters_per_epoch = 100; // T_max
  std::array<int64_t, 3> patch_size{16, 16, 16};
  uint64_t seed = 1;
  int pretrain_encoder_epochs = 5;
  int pretrain_task_epochs = 10;
  double clip_norm = 5.0;               // <= 0 disables
  bool lambda_scales_disc_step = true;  // keep the lambda factor on D's step
  bool aligned_crops = true;            // pair members share crop coordinates
  bool deterministic = true;
  size_t eval_pairs = 200;

  void validate() const {
    if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (lr <= 0.0 || batch_pairs < 1 || epochs < 0 || iters_per_epoch < 1)
      throw std::invalid_argument("TrainConfig: positive lr/batch/iters required");
    for (int64_t p : patch_size)
      if (p < 1) throw std::invalid_argument("TrainConfig: patch_size must be positive");
  }

  nlohmann::json to_json() const {
    return {{"lambda", lambda},
            {"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"batch_pairs", batch_pairs},
            {"epochs", epochs},
            {"iters_per_epoch", iters_per_epoch},
            {"patch_size", patch_size},
            {"seed", seed},
            {"pretrain_encoder_epochs", pretrain_encoder_epochs},
            {"pretrain_task_epochs", pretrain_task_epochs},
            {"clip_norm", clip_norm},
            {"lambda_scales_disc_step", lambda_scales_disc_step},
            {"aligned_crops", aligned_crops},
            {"deterministic", deterministic},
            {"eval_pairs", eval_pairs}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
    c.epochs = j.value("epochs", c.epochs);
    c.iters_per_epoch = j.value("iters_per_epoch", c.iters_per_epoch);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.seed = j.value("seed", c.seed);
    c.pretrain_encoder_epochs = j.value("pretrain_encoder_epochs", c.pretrain_encoder_epochs);
    c.pretrain_task_epochs = j.value("pretrain_task_epochs", c.pretrain_task_epochs);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.lambda_scales_disc_step = j.value("lambda_scales_disc_step", c.lambda_scales_disc_step);
    c.aligned_crops = j.value("aligned_crops", c.aligned_crops);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.eval_pairs = j.value("eval_pairs", c.eval_pairs);
    c.validate();
    return c;
  }
};

// In-memory dataset: manifest plus the referenced arrays.
template <typename T>
struct Dataset {
  Manifest manifest;
  std::vector<Tensor<T>> volumes;       // (H,W,D) each, [0,1]
  std::vector<Tensor<uint8_t>> labels;  // (H,W,D) each
  int num_classes = 0;

  void validate() const {
    manifest.validate();
    if (volumes.size() != manifest.records.size() || labels.size() != volumes.size())
      throw std::invalid_argument("Dataset: arrays do not match manifest");
  }

  static Dataset load(const std::string& manifest_path) {
    Dataset d;
    d.manifest = load_manifest(manifest_path);
    const auto base = std::filesystem::path(manifest_path).parent_path();
    for (const auto& r : d.manifest.records) {
      const Volume v = load_volume((base / r.volume_path).string());
      const LabelMap m = load_labels((base / r.labels_path).string());
      m.validate_against(v);
      d.volumes.push_back(v.voxels.template cast<T>());
      d.labels.push_back(m.labels);
      d.num_classes = m.num_classes;
    }
    d.validate();
    return d;
  }
};

struct EpochMetrics {
  int64_t epoch = 0;
  std::string phase;  // pretrain_enc | pretrain_task | adversarial
  double mean_seg_loss = std::nan("");
  double mean_disc_loss = std::nan("");       // mean BCE of D on its step
  double disc_train_accuracy = std::nan("");
  double val_dice_overall = std::nan("");
  std::vector<double> val_dice_per_class;
  double val_d_adv_accuracy = std::nan("");
  double val_mean_disc_bce = std::nan("");

  nlohmann::json to_json() const {
    auto num = [](double v) {
      return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    };
    return {{"epoch", epoch},
            {"phase", phase},
            {"mean_seg_loss", num(mean_seg_loss)},
            {"mean_disc_loss", num(mean_disc_loss)},
            {"disc_train_accuracy", num(disc_train_accuracy)},
            {"val_dice_overall", num(val_dice_overall)},
            {"val_dice_per_class", val_dice_per_class},
            {"val_d_adv_accuracy", num(val_d_adv_accuracy)},
            {"val_mean_disc_bce", num(val_mean_disc_bce)}};
  }
};

template <typename T>
struct TrainState {
  TrainConfig cfg;
  SegSystem<T> sys;
  Adam<T> adam_g, adam_s, adam_d;
  int64_t epoch = 0;      // epochs completed, across phases
  int64_t iteration = 0;  // iterations completed
  Rng rng;
  std::vector<EpochMetrics> history;

  TrainState() = default;
  TrainState(const TrainConfig& tc, const NetworkConfig& nc)
      : cfg(tc),
        sys(nc, tc.seed),
        adam_g(AdamConfig{tc.lr, tc.beta1, tc.beta2, tc.adam_eps}),
        adam_s(AdamConfig{tc.lr, tc.beta1, tc.beta2, tc.adam_eps}),
        adam_d(AdamConfig{tc.lr, tc.beta1, tc.beta2, tc.adam_eps}),
        rng(mix_seeds(tc.seed, 0x7124)) {
    tc.validate();
  }
};

namespace traind {

template <typename T>
Tensor<T> crop3(const Tensor<T>& v, std::array<int64_t, 3> pos, std::array<int64_t, 3> sz) {
  Tensor<T> out({sz[0], sz[1], sz[2]});
  for (int64_t h = 0; h < sz[0]; ++h)
    for (int64_t w = 0; w < sz[1]; ++w)
      for (int64_t d = 0; d < sz[2]; ++d)
        out.at(h, w, d) = v.at(pos[0] + h, pos[1] + w, pos[2] + d);
  return out;
}

template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& v, int c) {
  Tensor<T> out({c, v.dim(0), v.dim(1), v.dim(2)});
  for (int i = 0; i < c; ++i)
    std::copy(v.data(), v.data() + v.size(), out.data() + int64_t(i) * v.size());
  return out;
}

template <typename T>
std::array<int64_t, 3> random_crop_pos(const Tensor<T>& v, std::array<int64_t, 3> sz,
                                       Rng& rng) {
  std::array<int64_t, 3> pos{};
  for (int a = 0; a < 3; ++a) {
    const int64_t room = v.dim(a) - sz[a];
    if (room < 0)
      throw std::invalid_argument("crop larger than volume on axis " + std::to_string(a));
    pos[a] = room == 0 ? 0 : rng.below(room + 1);
  }
  return pos;
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("training diverged: non-finite ") + what);
}

}  // namespace traind

// Auto-encoder pretraining of G: minimizes MSE(G(x), x) on training crops
// (through a 1x1 reconstruction head when C_enc > 1). Zero epochs is a no-op.
template <typename T>
void pretrain_encoder(TrainState<T>& st, const Dataset<T>& data, int epochs) {
  data.validate();
  const auto train_idx = data.manifest.indices_of(Split::kTrain);
  if (train_idx.empty()) throw std::invalid_argument("pretrain_encoder: empty train split");
  auto g_params = st.sys.group("G");
  const bool use_head = st.sys.cfg.enc_channels > 1;

  for (int ep = 0; ep < epochs; ++ep) {
    double loss_sum = 0.0;
    int64_t count = 0;
    for (int it = 0; it < st.cfg.iters_per_epoch; ++it) {
      zero_grads(g_params);
      for (int b = 0; b < st.cfg.batch_pairs; ++b) {
        const size_t rec = train_idx[static_cast<size_t>(
            st.rng.below(static_cast<int64_t>(train_idx.size())))];
        const auto pos = traind::random_crop_pos(data.volumes[rec], st.cfg.patch_size, st.rng);
        Tensor<T> crop = traind::crop3(data.volumes[rec], pos, st.cfg.patch_size);
        Tape<T> tp;
        auto x = tp.input(Tensor<T>({1, crop.dim(0), crop.dim(1), crop.dim(2)}, crop.vec()));
        auto enc = st.sys.G.forward(tp, x, /*train=*/true);
        if (use_head) enc = ConvUnit<T>::apply(st.sys.recon_head, tp, enc, true);
        auto loss = tp.mse(enc, x);
        const double lv = double(tp.value(loss)[0]);
        traind::check_finite(lv, "reconstruction loss");
        loss_sum += lv;
        ++count;
        tp.backward(tp.wsum({loss}, {T(1) / T(st.cfg.batch_pairs)}));
      }
      clip_global_norm(g_params, st.cfg.clip_norm);
      st.adam_g.step(g_params);
      ++st.iteration;
    }
    EpochMetrics m;
    m.epoch = ++st.epoch;
    m.phase = "pretrain_enc";
    m.mean_seg_loss = loss_sum / double(count);
    st.history.push_back(std::move(m));
  }
}

// Task pretraining on the original images: S on raw crops with the Dice loss,
// D on raw full-volume pairs with BCE; the encoder is untouched.
template <typename T>
void pretrain_task_networks(TrainState<T>& st, const Dataset<T>& data, int epochs) {
  data.validate();
  const auto train_idx = data.manifest.indices_of(Split::kTrain);
  if (train_idx.empty())
    throw std::invalid_argument("pretrain_task_networks: empty train split");
  auto s_params = st.sys.group("S");
  auto d_params = st.sys.group("D");
  const int cenc = st.sys.cfg.enc_channels;

  for (int ep = 0; ep < epochs; ++ep) {
    double seg_sum = 0.0, disc_sum = 0.0;
    int64_t seg_n = 0, disc_n = 0, disc_ok = 0;
    for (int it = 0; it < st.cfg.iters_per_epoch; ++it) {
      zero_grads(s_params);
      for (int b = 0; b < st.cfg.batch_pairs; ++b) {
        const size_t rec = train_idx[static_cast<size_t>(
            st.rng.below(static_cast<int64_t>(train_idx.size())))];
        const auto pos = traind::random_crop_pos(data.volumes[rec], st.cfg.patch_size, st.rng);
        Tensor<T> crop = traind::crop3(data.volumes[rec], pos, st.cfg.patch_size);
        Tensor<uint8_t> lab = traind::crop3(data.labels[rec], pos, st.cfg.patch_size);
        Tape<T> tp;
        auto x = tp.input(traind::replicate_channels(crop, cenc));
        auto probs = tp.softmax_channels(st.sys.S.forward(tp, x, /*train=*/true));
        auto loss = tp.dice_loss(probs, lab, T(1e-6));
        const double lv = double(tp.value(loss)[0]);
        traind::check_finite(lv, "segmentation loss");
        seg_sum += lv;
        ++seg_n;
        tp.backward(tp.wsum({loss}, {T(1) / T(st.cfg.batch_pairs)}));
      }
      clip_global_norm(s_params, st.cfg.clip_norm);
      st.adam_s.step(s_params);
      ++st.iteration;
    }
    // one D pass per epoch over full raw volumes (cheaper iteration count:
    // full volumes carry more signal per pair than crops)
    const int d_iters = std::max(1, st.cfg.iters_per_epoch / 4);
    for (int it = 0; it < d_iters; ++it) {
      const auto pairs = sample_pairs(data.manifest, Split::kTrain,
                                      static_cast<size_t>(st.cfg.batch_pairs), st.rng.u64());
      zero_grads(d_params);
      for (const auto& pr : pairs) {
        Tape<T> tp;
        auto a = tp.input(traind::replicate_channels(data.volumes[pr.i], cenc));
        auto b = tp.input(traind::replicate_channels(data.volumes[pr.j], cenc));
        auto prob = st.sys.D.pair_prob(tp, a, b, /*train=*/true);
        auto loss = tp.bce_loss(prob, pr.same_subject ? T(1) : T(0));
        const double lv = double(tp.value(loss)[0]);
        traind::check_finite(lv, "discriminator loss");
        disc_sum += lv;
        ++disc_n;
        if ((double(tp.value(prob)[0]) > 0.5) == pr.same_subject) ++disc_ok;
        tp.backward(tp.wsum({loss}, {T(1) / T(pairs.size())}));
      }
      clip_global_norm(d_params, st.cfg.clip_norm);
      st.adam_d.step(d_params);
      ++st.iteration;
    }
    EpochMetrics m;
    m.epoch = ++st.epoch;
    m.phase = "pretrain_task";
    m.mean_seg_loss = seg_sum / double(std::max<int64_t>(1, seg_n));
    m.mean_disc_loss = disc_sum / double(std::max<int64_t>(1, disc_n));
    m.disc_train_accuracy = double(disc_ok) / double(std::max<int64_t>(1, disc_n));
    st.history.push_back(std::move(m));
  }
}

// Validation metrics: Dice (per class + weighted overall), D accuracy on
// encoded pairs, and the mean discriminator BCE.
template <typename T>
EpochMetrics evaluate_epoch(TrainState<T>& st, const Dataset<T>& data,
                            Split split = Split::kVal) {
  data.validate();
  const auto idx = data.manifest.indices_of(split);
  if (idx.empty())
    throw std::invalid_argument(std::string("evaluate_epoch: empty split ") +
                                split_name(split));
  EpochMetrics m;
  m.epoch = st.epoch;
  m.phase = "eval";

  std::vector<double> dice_acc(static_cast<size_t>(data.num_classes), 0.0);
  double overall = 0.0;
  for (size_t rec : idx) {
    const Tensor<T> enc = forward_encoder(st.sys.G, data.volumes[rec]);
    const Tensor<T> probs = forward_segmenter(st.sys.S, enc);
    Tensor<uint8_t> pred({probs.dim(1), probs.dim(2), probs.dim(3)});
    const int64_t nvox = pred.size();
    for (int64_t v = 0; v < nvox; ++v) {
      int best = 0;
      for (int k = 1; k < data.num_classes; ++k)
        if (probs[k * nvox + v] > probs[best * nvox + v]) best = k;
      pred[v] = static_cast<uint8_t>(best);
    }
    const auto ds = dice_scores(pred, data.labels[rec], data.num_classes);
    for (int k = 0; k < data.num_classes; ++k)
      dice_acc[static_cast<size_t>(k)] += ds.per_class[static_cast<size_t>(k)];
    overall += ds.overall;
  }
  m.val_dice_per_class.resize(dice_acc.size());
  for (size_t k = 0; k < dice_acc.size(); ++k)
    m.val_dice_per_class[k] = dice_acc[k] / double(idx.size());
  m.val_dice_overall = overall / double(idx.size());

  const auto pairs =
      sample_pairs(data.manifest, split, st.cfg.eval_pairs, mix_seeds(st.cfg.seed, 0xEA7));
  double bce_sum = 0.0;
  int64_t ok = 0;
  for (const auto& pr : pairs) {
    Tape<T> tp;
    auto lift = [&](const Tensor<T>& v) {
      return tp.input(Tensor<T>({1, v.dim(0), v.dim(1), v.dim(2)}, v.vec()));
    };
    auto ei = st.sys.G.forward(tp, lift(data.volumes[pr.i]));
    auto ej = st.sys.G.forward(tp, lift(data.volumes[pr.j]));
    const double prob = double(tp.value(st.sys.D.pair_prob(tp, ei, ej))[0]);
    bce_sum += bce_loss(prob, pr.same_subject ? 1.0 : 0.0).value;
    if ((prob > 0.5) == pr.same_subject) ++ok;
  }
  m.val_d_adv_accuracy = double(ok) / double(pairs.size());
  m.val_mean_disc_bce = bce_sum / double(pairs.size());
  return m;
}

// One alternating iteration on one batch: step 1 descends (theta_S, theta_G)
// on mean[lS_i + lS_j - lambda*lD]; step 2 descends theta_D on
// lambda*mean[lD], recomputing encodings with the just-updated encoder.
template <typename T>
struct IterationStats {
  double mean_seg = 0.0;
  double mean_disc_bce = 0.0;
  int64_t disc_correct = 0;
  int64_t disc_total = 0;
};

template <typename T>
IterationStats<T> adversarial_iteration(TrainState<T>& st, const Dataset<T>& data,
                                        const std::vector<PairSample>& batch) {
  IterationStats<T> stats;
  auto g_params = st.sys.group("G");
  auto s_params = st.sys.group("S");
  auto d_params = st.sys.group("D");
  const double lambda = st.cfg.lambda;
  const auto B = static_cast<T>(batch.size());

  struct CropPair {
    Tensor<T> xi, xj;
    Tensor<uint8_t> yi, yj;
    bool same;
  };
  std::vector<CropPair> crops;
  crops.reserve(batch.size());
  for (const auto& pr : batch) {
    const auto pos_i = traind::random_crop_pos(data.volumes[pr.i], st.cfg.patch_size, st.rng);
    const auto pos_j =
        st.cfg.aligned_crops
            ? pos_i
            : traind::random_crop_pos(data.volumes[pr.j], st.cfg.patch_size, st.rng);
    CropPair cp;
    cp.xi = traind::crop3(data.volumes[pr.i], pos_i, st.cfg.patch_size);
    cp.xj = traind::crop3(data.volumes[pr.j], pos_j, st.cfg.patch_size);
    cp.yi = traind::crop3(data.labels[pr.i], pos_i, st.cfg.patch_size);
    cp.yj = traind::crop3(data.labels[pr.j], pos_j, st.cfg.patch_size);
    cp.same = pr.same_subject;
    crops.push_back(std::move(cp));
  }

  // step 1: encoder + segmenter (discriminator frozen)
  zero_grads(g_params);
  zero_grads(s_params);
  for (const auto& cp : crops) {
    Tape<T> tp;
    auto lift = [&](const Tensor<T>& v) {
      return tp.input(Tensor<T>({1, v.dim(0), v.dim(1), v.dim(2)}, v.vec()));
    };
    auto ei = st.sys.G.forward(tp, lift(cp.xi), /*train=*/true);
    auto ej = st.sys.G.forward(tp, lift(cp.xj), /*train=*/true);
    auto pi = tp.softmax_channels(st.sys.S.forward(tp, ei, /*train=*/true));
    auto pj = tp.softmax_channels(st.sys.S.forward(tp, ej, /*train=*/true));
    auto lsi = tp.dice_loss(pi, cp.yi, T(1e-6));
    auto lsj = tp.dice_loss(pj, cp.yj, T(1e-6));
    auto shat = std::as_const(st.sys.D).pair_prob(tp, ei, ej);  // frozen weights
    auto ld = tp.bce_loss(shat, cp.same ? T(1) : T(0));
    const double seg = 0.5 * (double(tp.value(lsi)[0]) + double(tp.value(lsj)[0]));
    traind::check_finite(seg, "segmentation loss");
    traind::check_finite(double(tp.value(ld)[0]), "discriminator loss");
    stats.mean_seg += seg;
    tp.backward(tp.wsum({lsi, lsj, ld}, {T(1) / B, T(1) / B, static_cast<T>(-lambda) / B}));
  }
  {
    std::vector<Param<T>*> joint = g_params;
    joint.insert(joint.end(), s_params.begin(), s_params.end());
    clip_global_norm(joint, st.cfg.clip_norm);
  }
  st.adam_g.step(g_params);
  st.adam_s.step(s_params);

  // step 2: discriminator on the same batch (encoder frozen, post-update)
  const double lambda_eff = st.cfg.lambda_scales_disc_step ? lambda : 1.0;
  zero_grads(d_params);
  for (const auto& cp : crops) {
    Tape<T> tp;
    auto lift = [&](const Tensor<T>& v) {
      return tp.input(Tensor<T>({1, v.dim(0), v.dim(1), v.dim(2)}, v.vec()));
    };
    auto ei = std::as_const(st.sys.G).forward(tp, lift(cp.xi));
    auto ej = std::as_const(st.sys.G).forward(tp, lift(cp.xj));
    auto shat = st.sys.D.pair_prob(tp, ei, ej, /*train=*/true);
    auto ld = tp.bce_loss(shat, cp.same ? T(1) : T(0));
    const double lv = double(tp.value(ld)[0]);
    traind::check_finite(lv, "discriminator loss");
    stats.mean_disc_bce += lv;
    if ((double(tp.value(shat)[0]) > 0.5) == cp.same) ++stats.disc_correct;
    ++stats.disc_total;
    tp.backward(tp.wsum({ld}, {static_cast<T>(lambda_eff) / B}));
  }
  if (lambda_eff > 0.0) {
    clip_global_norm(d_params, st.cfg.clip_norm);
    st.adam_d.step(d_params);
  }
  stats.mean_seg /= double(crops.size());
  stats.mean_disc_bce /= double(crops.size());
  ++st.iteration;
  return stats;
}

// The alternating min-max loop. Checkpoints (when state_dir is non-empty) are
// written after each completed epoch, so a divergence abort leaves the last
// good state on disk.
template <typename T>
void save_train_state(const std::string& dir, TrainState<T>& st);

template <typename T>
void train_adversarial(TrainState<T>& st, const Dataset<T>& data,
                       const std::string& state_dir = "") {
  data.validate();
  st.cfg.validate();
  for (int ep = 0; ep < st.cfg.epochs; ++ep) {
    double seg_sum = 0.0, disc_sum = 0.0;
    int64_t correct = 0, total = 0;
    for (int it = 0; it < st.cfg.iters_per_epoch; ++it) {
      const auto batch = sample_pairs(data.manifest, Split::kTrain,
                                      static_cast<size_t>(st.cfg.batch_pairs), st.rng.u64());
      const auto stats = adversarial_iteration(st, data, batch);
      seg_sum += stats.mean_seg;
      disc_sum += stats.mean_disc_bce;
      correct += stats.disc_correct;
      total += stats.disc_total;
    }
    EpochMetrics m;
    m.epoch = ++st.epoch;
    m.phase = "adversarial";
    m.mean_seg_loss = seg_sum / double(st.cfg.iters_per_epoch);
    m.mean_disc_loss = disc_sum / double(st.cfg.iters_per_epoch);
    m.disc_train_accuracy = double(correct) / double(std::max<int64_t>(1, total));
    if (!data.manifest.indices_of(Split::kVal).empty()) {
      const auto ev = evaluate_epoch(st, data, Split::kVal);
      m.val_dice_overall = ev.val_dice_overall;
      m.val_dice_per_class = ev.val_dice_per_class;
      m.val_d_adv_accuracy = ev.val_d_adv_accuracy;
      m.val_mean_disc_bce = ev.val_mean_disc_bce;
    }
    st.history.push_back(std::move(m));
    if (!state_dir.empty()) save_train_state(state_dir, st);
  }
}

// --- state persistence (bitwise resume) --------------------------------

namespace traind {

template <typename T>
void save_optimizer(const std::string& dir, const std::string& tag, Adam<T>& adam,
                    const std::vector<Param<T>*>& params) {
  std::vector<Tensor<float>> casted;
  std::vector<std::pair<std::string, const Tensor<float>*>> arrays;
  auto& m = adam.moments_m();
  auto& v = adam.moments_v();
  if (m.empty()) {  // never stepped; store empty index
    save_arrays(dir + "/opt_" + tag + ".bin", dir + "/opt_" + tag + ".json", {});
    return;
  }
  casted.reserve(2 * params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    casted.push_back(m[i].template cast<float>());
    casted.push_back(v[i].template cast<float>());
  }
  for (size_t i = 0; i < params.size(); ++i) {
    arrays.emplace_back(params[i]->name + ".m", &casted[2 * i]);
    arrays.emplace_back(params[i]->name + ".v", &casted[2 * i + 1]);
  }
  save_arrays(dir + "/opt_" + tag + ".bin", dir + "/opt_" + tag + ".json", arrays);
}

template <typename T>
void load_optimizer(const std::string& dir, const std::string& tag, Adam<T>& adam,
                    const std::vector<Param<T>*>& params, int64_t steps) {
  auto arrays = load_arrays(dir + "/opt_" + tag + ".bin", dir + "/opt_" + tag + ".json");
  adam.set_steps(steps);
  if (arrays.empty()) return;
  auto& m = adam.moments_m();
  auto& v = adam.moments_v();
  m.clear();
  v.clear();
  for (auto* p : params) {
    m.push_back(arrays.at(p->name + ".m").template cast<T>());
    v.push_back(arrays.at(p->name + ".v").template cast<T>());
  }
}

}  // namespace traind

template <typename T>
void save_train_state(const std::string& dir, TrainState<T>& st) {
  std::filesystem::create_directories(dir);
  save_system(dir, st.sys);
  traind::save_optimizer(dir, "G", st.adam_g, st.sys.group("G"));
  traind::save_optimizer(dir, "S", st.adam_s, st.sys.group("S"));
  traind::save_optimizer(dir, "D", st.adam_d, st.sys.group("D"));
  nlohmann::json j;
  j["train_config"] = st.cfg.to_json();
  j["epoch"] = st.epoch;
  j["iteration"] = st.iteration;
  j["rng_state"] = st.rng.save_state();
  j["adam_steps"] = {{"G", st.adam_g.steps()}, {"S", st.adam_s.steps()},
                     {"D", st.adam_d.steps()}};
  std::ofstream f(dir + "/state.json");
  if (!f) throw std::runtime_error("cannot open for write: " + dir + "/state.json");
  f << j.dump(2) << "\n";
  std::ofstream h(dir + "/history.jsonl", std::ios::trunc);
  for (const auto& m : st.history) h << m.to_json().dump() << "\n";
}

template <typename T>
TrainState<T> load_train_state(const std::string& dir) {
  std::ifstream f(dir + "/state.json");
  if (!f) throw std::runtime_error("cannot open train state: " + dir + "/state.json");
  const auto j = nlohmann::json::parse(f);
  std::ifstream nf(dir + "/network.json");
  if (!nf) throw std::runtime_error("cannot open: " + dir + "/network.json");
  const auto nc = network_config_from_json(nlohmann::json::parse(nf));

  TrainState<T> st(TrainConfig::from_json(j.at("train_config")), nc);
  for (const char* g : {"G", "S", "D"}) load_param_group<T>(dir, g, st.sys.group(g));
  st.epoch = j.at("epoch").get<int64_t>();
  st.iteration = j.at("iteration").get<int64_t>();
  st.rng.load_state(j.at("rng_state").get<std::string>());
  traind::load_optimizer(dir, "G", st.adam_g, st.sys.group("G"),
                         j.at("adam_steps").at("G").get<int64_t>());
  traind::load_optimizer(dir, "S", st.adam_s, st.sys.group("S"),
                         j.at("adam_steps").at("S").get<int64_t>());
  traind::load_optimizer(dir, "D", st.adam_d, st.sys.group("D"),
                         j.at("adam_steps").at("D").get<int64_t>());
  return st;
}

}  // namespace privseg
