// experiment.hpp - the desk-scale end-to-end experiment: phantom dataset,
// baseline pretraining, adversarial runs over lambda, and the audit report.
// Stages cache their outputs under a work directory so separate processes
// (CLI, acceptance criteria) can share trained systems.
#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "privseg/attacks.hpp"
#include "privseg/degrade.hpp"
#include "privseg/metrics.hpp"
#include "privseg/mi.hpp"
#include "privseg/patchwork.hpp"
#include "privseg/phantom.hpp"
#include "privseg/train.hpp"

namespace privseg {

struct DeskConfig {
  // dataset
  int subjects = 40;
  int sessions = 3;
  int64_t extent = 32;
  int num_classes = 4;
  uint64_t data_seed = 1000;
  std::array<double, 3> fractions{0.7, 0.0, 0.3};
  PhantomConfig phantom;  // shape/num_classes overwritten from the fields above

  // networks
  NetworkConfig net;

  // training
  TrainConfig train;      // lambda filled per run
  double lambda_low = 1.0;
  double lambda_high = 30.0;
  std::vector<uint64_t> seeds{1, 2, 3};

  // audit
  AttackerConfig attacker;
  int msssim_scales = 2;
  size_t eval_pairs = 500;
  size_t inter_msssim_pairs = 64;

  DeskConfig() {
    train.lr = 1e-3;
    train.batch_pairs = 8;
    train.epochs = 8;
    train.iters_per_epoch = 60;
    train.patch_size = {16, 16, 16};
    train.pretrain_encoder_epochs = 4;
    train.pretrain_task_epochs = 8;
    train.eval_pairs = 200;
    attacker.epochs = 6;
    attacker.iters_per_epoch = 30;
  }

  PhantomConfig phantom_config() const {
    PhantomConfig pc = phantom;
    pc.shape = {extent, extent, extent};
    pc.num_classes = num_classes;
    return pc;
  }
};

struct BaselineReport {
  double recon_mse = 0.0;       // encoder autoencoding error on held-out crops
  double d_accuracy = 0.0;      // pretrained D, raw test pairs
  double map_cosine = 0.0;      // D embeddings of raw test volumes
  double map_euclidean = 0.0;
  double dice_overall = 0.0;    // S on raw test volumes
  std::vector<double> dice_per_class;
  double threshold_accuracy = 0.0;  // MS-SSIM threshold attack, raw
  double msssim_intra = 0.0;
  double msssim_inter = 0.0;
  double msssim_ks = 0.0;

  nlohmann::json to_json() const {
    return {{"recon_mse", recon_mse},
            {"d_accuracy", d_accuracy},
            {"map_cosine", map_cosine},
            {"map_euclidean", map_euclidean},
            {"dice_overall", dice_overall},
            {"dice_per_class", dice_per_class},
            {"threshold_accuracy", threshold_accuracy},
            {"msssim_intra", msssim_intra},
            {"msssim_inter", msssim_inter},
            {"msssim_ks", msssim_ks}};
  }
  static BaselineReport from_json(const nlohmann::json& j) {
    BaselineReport r;
    r.recon_mse = j.at("recon_mse");
    r.d_accuracy = j.at("d_accuracy");
    r.map_cosine = j.at("map_cosine");
    r.map_euclidean = j.at("map_euclidean");
    r.dice_overall = j.at("dice_overall");
    r.dice_per_class = j.at("dice_per_class").get<std::vector<double>>();
    r.threshold_accuracy = j.at("threshold_accuracy");
    r.msssim_intra = j.at("msssim_intra");
    r.msssim_inter = j.at("msssim_inter");
    r.msssim_ks = j.at("msssim_ks");
    return r;
  }
};

namespace expd {

inline Volume channel_mean_volume(const Tensor<float>& enc) {
  const int64_t C = enc.dim(0), nvox = enc.size() / C;
  Volume v;
  v.voxels = Tensor<float>({enc.dim(1), enc.dim(2), enc.dim(3)});
  for (int64_t i = 0; i < nvox; ++i) {
    float acc = 0.0f;
    for (int64_t c = 0; c < C; ++c) acc += enc[c * nvox + i];
    v.voxels[i] = acc / float(C);
  }
  return v;
}

inline Volume tensor_volume(const Tensor<float>& t) {
  Volume v;
  v.voxels = t;
  return v;
}

// all same-subject pairs plus a seeded sample of cross-subject pairs
inline std::pair<std::vector<std::pair<size_t, size_t>>,
                 std::vector<std::pair<size_t, size_t>>>
intra_inter_pairs(const Manifest& m, Split split, size_t inter_count, uint64_t seed) {
  const auto idx = m.indices_of(split);
  std::vector<std::pair<size_t, size_t>> intra, inter;
  for (size_t a = 0; a < idx.size(); ++a)
    for (size_t b = a + 1; b < idx.size(); ++b)
      if (m.records[idx[a]].subject_id == m.records[idx[b]].subject_id)
        intra.emplace_back(idx[a], idx[b]);
  Rng rng(mix_seeds(seed, 0x1217A));
  while (inter.size() < inter_count) {
    const size_t a = idx[size_t(rng.below(int64_t(idx.size())))];
    const size_t b = idx[size_t(rng.below(int64_t(idx.size())))];
    if (a == b || m.records[a].subject_id == m.records[b].subject_id) continue;
    inter.emplace_back(a, b);
  }
  return {intra, inter};
}

}  // namespace expd

class DeskExperiment {
 public:
  DeskExperiment(DeskConfig cfg, std::string cache_dir)
      : cfg_(std::move(cfg)), cache_(std::move(cache_dir)) {
    std::filesystem::create_directories(cache_);
    build_dataset();
  }

  // Wraps an externally provided dataset (CLI `eval` on arbitrary manifests).
  DeskExperiment(DeskConfig cfg, Dataset<float> data, std::string cache_dir)
      : cfg_(std::move(cfg)), cache_(std::move(cache_dir)), data_(std::move(data)) {
    std::filesystem::create_directories(cache_);
    data_.validate();
  }

  const DeskConfig& config() const { return cfg_; }
  const Dataset<float>& data() const { return data_; }

  // --- stages ------------------------------------------------------------

  // Pretrained (encoder + task networks) state for one seed.
  TrainState<float> baseline(uint64_t seed) {
    const auto dir = baseline_dir(seed);
    if (stage_done(dir)) return load_train_state<float>(dir);
    TrainConfig tc = cfg_.train;
    tc.seed = seed;
    tc.lambda = cfg_.lambda_low;
    TrainState<float> st(tc, cfg_.net);
    pretrain_encoder(st, data_, tc.pretrain_encoder_epochs);
    pretrain_task_networks(st, data_, tc.pretrain_task_epochs);
    save_train_state(dir, st);
    mark_done(dir);
    return st;
  }

  // Adversarially trained state at a given lambda, starting from baseline.
  TrainState<float> adversarial(double lambda, uint64_t seed) {
    const auto dir = adv_dir(lambda, seed);
    if (stage_done(dir)) return load_train_state<float>(dir);
    TrainState<float> st = baseline(seed);
    st.cfg.lambda = lambda;
    train_adversarial(st, data_, dir);
    save_train_state(dir, st);
    mark_done(dir);
    return st;
  }

  // --- measurements -------------------------------------------------------

  BaselineReport baseline_report(uint64_t seed) {
    const auto path = baseline_dir(seed) + "/baseline_report.json";
    if (std::filesystem::exists(path)) {
      std::ifstream f(path);
      return BaselineReport::from_json(nlohmann::json::parse(f));
    }
    auto st = baseline(seed);
    BaselineReport r;
    r.recon_mse = reconstruction_mse(st);
    r.d_accuracy = raw_pair_accuracy(st);
    const auto maps = raw_retrieval(st);
    r.map_cosine = maps.first;
    r.map_euclidean = maps.second;
    const auto dice = raw_dice(st);
    r.dice_overall = dice.overall;
    r.dice_per_class = dice.per_class;
    const auto dist = msssim_distributions(/*encoded=*/nullptr);
    r.msssim_intra = dist.intra_mean;
    r.msssim_inter = dist.inter_mean;
    r.msssim_ks = dist.ks;
    r.threshold_accuracy = raw_threshold_accuracy();
    std::ofstream f(path);
    f << r.to_json().dump(2) << "\n";
    return r;
  }

  // Full audit of a trained system (Tables II/III/VII layout).
  AuditReport audit(double lambda, uint64_t seed) {
    const auto path = adv_dir(lambda, seed) + "/audit.json";
    if (std::filesystem::exists(path)) {
      std::ifstream f(path);
      return AuditReport::from_json(nlohmann::json::parse(f));
    }
    auto st = adversarial(lambda, seed);
    AuditReport r = build_audit(st, lambda, seed);
    std::ofstream f(path);
    f << r.to_json().dump(2) << "\n";
    return r;
  }

  // --- building blocks (also used by the CLI `eval`) ----------------------

  AuditReport build_audit(TrainState<float>& st, double lambda, uint64_t seed) {
    AuditReport r;
    r.lambda = lambda;

    const auto enc_train = encode_split(st, Split::kTrain);
    const auto enc_test = encode_split(st, Split::kTest);

    // segmentation quality on encoded test volumes
    const auto ev = evaluate_epoch(st, data_, Split::kTest);
    r.dice_per_class = ev.val_dice_per_class;
    r.dice_overall = ev.val_dice_overall;
    r.d_adv_accuracy = ev.val_d_adv_accuracy;

    // MS-SSIM distributions + threshold attack on encodings
    const auto dist = msssim_distributions(&st);
    r.msssim_intra_mean = dist.intra_mean;
    r.msssim_inter_mean = dist.inter_mean;
    r.msssim_ks = dist.ks;
    r.msssim_scales = cfg_.msssim_scales;
    r.threshold_attack_accuracy = threshold_on_distributions(dist);

    // retrained independent attacker on frozen encodings
    AttackerConfig ac = cfg_.attacker;
    ac.seed = mix_seeds(seed, 0xD0E);
    const auto attack = retrain_attack(enc_train, enc_test, ac);
    r.d_new_accuracy = attack.accuracy;
    r.map_encodings_cosine = attack.map_cosine;
    r.map_encodings_euclidean = attack.map_euclidean;

    // segmentation-map retrieval at three granularities
    const auto seg_train = segment_split(st, Split::kTrain);
    const auto seg_test = segment_split(st, Split::kTest);
    AttackerConfig sc = cfg_.attacker;
    sc.seed = mix_seeds(seed, 0x5E6);
    r.map_seg_full = seg_map_retrieval(seg_train, seg_test, sc);
    r.map_seg_patch_mid =
        seg_map_retrieval(crop_items(seg_train, cfg_.extent / 2),
                          crop_items(seg_test, cfg_.extent / 2), sc);
    r.map_seg_patch_small =
        seg_map_retrieval(crop_items(seg_train, cfg_.extent / 4),
                          crop_items(seg_test, cfg_.extent / 4), sc);
    r.validate();
    return r;
  }

  // encoded-image Dice on the test split, optionally under Rician noise
  DiceScores encoded_dice(TrainState<float>& st, double snr_db = 0.0,
                          bool add_noise = false) {
    const auto idx = data_.manifest.indices_of(Split::kTest);
    DiceScores mean;
    mean.per_class.assign(size_t(data_.num_classes), 0.0);
    for (size_t rec : idx) {
      Tensor<float> vox = data_.volumes[rec];
      if (add_noise) {
        Volume v = expd::tensor_volume(vox);
        v = add_rician_noise(v, snr_db, mix_seeds(0xA015E, rec));
        vox = v.voxels;
      }
      const auto enc = forward_encoder(st.sys.G, vox);
      const auto probs = forward_segmenter(st.sys.S, enc);
      const auto pred = clientd_argmax(probs);
      const auto ds = dice_scores(pred, data_.labels[rec], data_.num_classes);
      for (size_t k = 0; k < mean.per_class.size(); ++k)
        mean.per_class[k] += ds.per_class[k];
      mean.overall += ds.overall;
    }
    for (auto& v : mean.per_class) v /= double(idx.size());
    mean.overall /= double(idx.size());
    return mean;
  }

  // raw-image Dice of the pretrained segmenter (non-encoded baseline)
  DiceScores raw_dice(TrainState<float>& st) {
    const auto idx = data_.manifest.indices_of(Split::kTest);
    DiceScores mean;
    mean.per_class.assign(size_t(data_.num_classes), 0.0);
    for (size_t rec : idx) {
      const auto x = traind::replicate_channels(data_.volumes[rec], cfg_.net.enc_channels);
      const auto probs = forward_segmenter(st.sys.S, x);
      const auto pred = clientd_argmax(probs);
      const auto ds = dice_scores(pred, data_.labels[rec], data_.num_classes);
      for (size_t k = 0; k < mean.per_class.size(); ++k)
        mean.per_class[k] += ds.per_class[k];
      mean.overall += ds.overall;
    }
    for (auto& v : mean.per_class) v /= double(idx.size());
    mean.overall /= double(idx.size());
    return mean;
  }

  double raw_pair_accuracy(TrainState<float>& st) {
    const auto pairs = sample_pairs(data_.manifest, Split::kTest, cfg_.eval_pairs,
                                    mix_seeds(cfg_.data_seed, 0xACC));
    std::vector<double> probs;
    std::vector<bool> labels;
    for (const auto& pr : pairs) {
      Tape<float> tp;
      auto a = tp.input(traind::replicate_channels(data_.volumes[pr.i], cfg_.net.enc_channels));
      auto b = tp.input(traind::replicate_channels(data_.volumes[pr.j], cfg_.net.enc_channels));
      probs.push_back(double(tp.value(std::as_const(st.sys.D).pair_prob(tp, a, b))[0]));
      labels.push_back(pr.same_subject);
    }
    return pair_accuracy(probs, labels);
  }

  std::pair<double, double> raw_retrieval(TrainState<float>& st) {
    std::vector<RetrievalItem> items;
    for (size_t rec : data_.manifest.indices_of(Split::kTest)) {
      Tape<float> tp;
      auto x = tp.input(traind::replicate_channels(data_.volumes[rec], cfg_.net.enc_channels));
      const auto& emb = tp.value(std::as_const(st.sys.D).embed(tp, x));
      RetrievalItem it;
      it.embedding.assign(emb.data(), emb.data() + emb.size());
      it.subject_id = data_.manifest.records[rec].subject_id;
      items.push_back(std::move(it));
    }
    return {retrieval_map(items, SimilarityMetric::kCosine).mean_ap,
            retrieval_map(items, SimilarityMetric::kEuclidean).mean_ap};
  }

  double reconstruction_mse(TrainState<float>& st) {
    const auto idx = data_.manifest.indices_of(Split::kTest);
    Rng rng(mix_seeds(cfg_.data_seed, 0x3EC));
    double acc = 0.0;
    int64_t count = 0;
    for (int i = 0; i < 32; ++i) {
      const size_t rec = idx[size_t(rng.below(int64_t(idx.size())))];
      const auto pos = traind::random_crop_pos(data_.volumes[rec], cfg_.train.patch_size, rng);
      const auto crop = traind::crop3(data_.volumes[rec], pos, cfg_.train.patch_size);
      Tape<float> tp;
      auto x = tp.input(Tensor<float>({1, crop.dim(0), crop.dim(1), crop.dim(2)}, crop.vec()));
      auto enc = std::as_const(st.sys.G).forward(tp, x);
      if (st.sys.cfg.enc_channels > 1)
        enc = ConvUnit<float>::apply(std::as_const(st.sys).recon_head, tp, enc, false);
      acc += double(tp.value(tp.mse(enc, x))[0]);
      ++count;
    }
    return acc / double(count);
  }

  struct MsssimDist {
    double intra_mean = 0.0, inter_mean = 0.0, ks = 0.0;
    std::vector<double> intra, inter;
  };

  // encoded = nullptr measures raw volumes; otherwise encodings (channel mean)
  MsssimDist msssim_distributions(TrainState<float>* encoded) {
    const auto [intra_idx, inter_idx] = expd::intra_inter_pairs(
        data_.manifest, Split::kTest, cfg_.inter_msssim_pairs, cfg_.data_seed);
    auto view = [&](size_t rec) {
      if (!encoded) return expd::tensor_volume(data_.volumes[rec]);
      return expd::channel_mean_volume(forward_encoder(encoded->sys.G, data_.volumes[rec]));
    };
    MsssimDist d;
    for (const auto& [a, b] : intra_idx)
      d.intra.push_back(ms_ssim(view(a), view(b), cfg_.msssim_scales));
    for (const auto& [a, b] : inter_idx)
      d.inter.push_back(ms_ssim(view(a), view(b), cfg_.msssim_scales));
    const auto rep = distribution_report(d.intra, d.inter);
    d.intra_mean = rep.intra_mean;
    d.inter_mean = rep.inter_mean;
    d.ks = rep.ks;
    return d;
  }

  double raw_threshold_accuracy() {
    const auto dist = msssim_distributions(nullptr);
    return threshold_on_distributions(dist);
  }

  static double threshold_on_distributions(const MsssimDist& d) {
    std::vector<ScorePair> scores;
    for (double v : d.intra) scores.push_back({v, true});
    for (double v : d.inter) scores.push_back({v, false});
    return threshold_attack(scores).accuracy;
  }

  LabeledItems<float> encode_split(TrainState<float>& st, Split split) {
    LabeledItems<float> items;
    for (size_t rec : data_.manifest.indices_of(split)) {
      items.data.push_back(forward_encoder(st.sys.G, data_.volumes[rec]));
      items.subject.push_back(data_.manifest.records[rec].subject_id);
    }
    return items;
  }

  LabeledItems<float> segment_split(TrainState<float>& st, Split split) {
    LabeledItems<float> items;
    for (size_t rec : data_.manifest.indices_of(split)) {
      const auto enc = forward_encoder(st.sys.G, data_.volumes[rec]);
      items.data.push_back(forward_segmenter(st.sys.S, enc));
      items.subject.push_back(data_.manifest.records[rec].subject_id);
    }
    return items;
  }

  // fixed-size patch items cut from channelled maps
  static LabeledItems<float> crop_items(const LabeledItems<float>& maps, int64_t window) {
    LabeledItems<float> out;
    for (size_t i = 0; i < maps.data.size(); ++i) {
      const auto& m = maps.data[i];
      const Shape vol_shape{m.dim(1), m.dim(2), m.dim(3)};
      const auto grid =
          compute_positions(vol_shape, {window, window, window}, {window, window, window});
      for (auto& patch : crop_patches(m, grid)) {
        out.data.push_back(std::move(patch));
        out.subject.push_back(maps.subject[i]);
      }
    }
    return out;
  }

  std::string baseline_dir(uint64_t seed) const {
    return cache_ + "/baseline_s" + std::to_string(seed);
  }
  std::string adv_dir(double lambda, uint64_t seed) const {
    std::ostringstream os;
    os << cache_ << "/adv_L" << lambda << "_s" << seed;
    return os.str();
  }

 private:
  DeskConfig cfg_;
  std::string cache_;
  Dataset<float> data_;

  static Tensor<uint8_t> clientd_argmax(const Tensor<float>& probs) {
    const int64_t K = probs.dim(0), nvox = probs.size() / K;
    Tensor<uint8_t> out({probs.dim(1), probs.dim(2), probs.dim(3)});
    for (int64_t v = 0; v < nvox; ++v) {
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (probs[k * nvox + v] > probs[best * nvox + v]) best = k;
      out[v] = uint8_t(best);
    }
    return out;
  }

  void build_dataset() {
    const auto pc = cfg_.phantom_config();
    std::vector<SubjectRecord> records;
    std::vector<Tensor<float>> vols;
    std::vector<Tensor<uint8_t>> labs;
    for (int s = 0; s < cfg_.subjects; ++s)
      for (int t = 0; t < cfg_.sessions; ++t) {
        auto [v, l] = generate_phantom(cfg_.data_seed + uint64_t(s), uint64_t(t), pc);
        records.push_back(
            {"s" + std::to_string(s), "t" + std::to_string(t), "", ""});
        vols.push_back(std::move(v.voxels));
        labs.push_back(std::move(l.labels));
      }
    data_.manifest = split_stratified(records, cfg_.fractions, cfg_.data_seed);
    data_.volumes = std::move(vols);
    data_.labels = std::move(labs);
    data_.num_classes = cfg_.num_classes;
    data_.validate();
  }

  bool stage_done(const std::string& dir) const {
    return std::filesystem::exists(dir + "/DONE");
  }
  void mark_done(const std::string& dir) const {
    std::ofstream f(dir + "/DONE");
    f << "ok\n";
  }
};

}  // namespace privseg
