// attacks.hpp - identity attacks on a frozen encoder: the retrained Siamese
// attacker, adversarial-discriminator accuracy, segmentation-map retrieval,
// and the audit report they feed.
#pragma once

#include <json.hpp>

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "privseg/losses.hpp"
#include "privseg/nets.hpp"
#include "privseg/optim.hpp"
#include "privseg/retrieval.hpp"
#include "privseg/rng.hpp"
#include "privseg/volume.hpp"

namespace privseg {

struct AttackerConfig {
  int width = 8;         // residual backbone stem width
  int blocks = 2;        // residual stages
  int embed_dim = 32;
  int head_hidden = 64;
  int epochs = 6;
  int iters_per_epoch = 30;
  int batch_pairs = 8;
  double lr = 1e-3;
  double clip_norm = 5.0;
  uint64_t seed = 7;
  size_t eval_pairs = 500;
};

template <typename T>
struct LabeledItems {
  std::vector<Tensor<T>> data;        // (C,H,W,D) items
  std::vector<std::string> subject;   // parallel subject ids

  void validate() const {
    if (data.size() != subject.size())
      throw std::invalid_argument("LabeledItems: data/subject size mismatch");
  }
};

struct IndexPair {
  size_t i = 0, j = 0;
  bool same = false;
};

// Balanced pairs over an item list: floor(n/2) positives (resampled with
// repetition when scarce) and the rest negatives.
inline std::vector<IndexPair> balanced_item_pairs(const std::vector<std::string>& subject,
                                                  size_t n, Rng& rng) {
  std::vector<std::pair<size_t, size_t>> positives;
  for (size_t a = 0; a < subject.size(); ++a)
    for (size_t b = a + 1; b < subject.size(); ++b)
      if (subject[a] == subject[b]) positives.emplace_back(a, b);
  if (positives.empty())
    throw std::invalid_argument("balanced_item_pairs: no positive pair available");

  std::vector<IndexPair> out;
  out.reserve(n);
  const size_t n_pos = n / 2;
  std::vector<size_t> order(positives.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (size_t k = 0; k < n_pos; ++k) {
    const auto& p = k < order.size()
                        ? positives[order[k]]
                        : positives[static_cast<size_t>(
                              rng.below(static_cast<int64_t>(positives.size())))];
    out.push_back({p.first, p.second, true});
  }
  while (out.size() < n) {
    const auto a = static_cast<size_t>(rng.below(static_cast<int64_t>(subject.size())));
    const auto b = static_cast<size_t>(rng.below(static_cast<int64_t>(subject.size())));
    if (a == b || subject[a] == subject[b]) continue;
    out.push_back({a, b, false});
  }
  return out;
}

template <typename T>
struct AttackOutcome {
  double accuracy = 0.0;       // held-out balanced pair accuracy
  double map_cosine = 0.0;     // retrieval mAP over held-out embeddings
  double map_euclidean = 0.0;
  Siamese<T> model;
};

// Trains a freshly initialized residual Siamese on fixed items (encodings,
// softmax maps or patches of either) and measures what identity it recovers.
template <typename T>
AttackOutcome<T> retrain_attack(const LabeledItems<T>& train, const LabeledItems<T>& test,
                                const AttackerConfig& cfg) {
  train.validate();
  test.validate();
  if (train.data.empty() || test.data.empty())
    throw std::invalid_argument("retrain_attack: empty item set");
  const auto in_ch = static_cast<int>(train.data[0].dim(0));

  AttackOutcome<T> out;
  out.model = Siamese<T>(Siamese<T>::Backbone::kResidual, in_ch, cfg.blocks, cfg.width,
                         cfg.embed_dim, cfg.head_hidden, Rng(mix_seeds(cfg.seed, 0xA77)));
  auto params = out.model.params();
  Adam<T> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng(mix_seeds(cfg.seed, 0x7EA1));

  for (int ep = 0; ep < cfg.epochs; ++ep) {
    for (int it = 0; it < cfg.iters_per_epoch; ++it) {
      const auto batch =
          balanced_item_pairs(train.subject, static_cast<size_t>(cfg.batch_pairs), rng);
      zero_grads(params);
      for (const auto& pr : batch) {
        Tape<T> tp;
        auto a = tp.input(train.data[pr.i]);
        auto b = tp.input(train.data[pr.j]);
        auto prob = out.model.pair_prob(tp, a, b, /*train=*/true);
        auto loss = tp.bce_loss(prob, pr.same ? T(1) : T(0));
        tp.backward(tp.wsum({loss}, {T(1) / T(batch.size())}));
      }
      clip_global_norm(params, cfg.clip_norm);
      adam.step(params);
    }
  }

  // held-out pair accuracy
  Rng eval_rng(mix_seeds(cfg.seed, 0xE7A1));
  const auto eval_batch = balanced_item_pairs(test.subject, cfg.eval_pairs, eval_rng);
  std::vector<double> probs;
  std::vector<bool> labels;
  for (const auto& pr : eval_batch) {
    Tape<T> tp;
    auto a = tp.input(test.data[pr.i]);
    auto b = tp.input(test.data[pr.j]);
    probs.push_back(double(tp.value(out.model.pair_prob(tp, a, b))[0]));
    labels.push_back(pr.same);
  }
  out.accuracy = pair_accuracy(probs, labels);

  // embedding retrieval over the held-out items
  std::vector<RetrievalItem> items;
  items.reserve(test.data.size());
  for (size_t i = 0; i < test.data.size(); ++i) {
    Tape<T> tp;
    auto e = tp.input(test.data[i]);
    const auto& emb = tp.value(out.model.embed(tp, e));
    RetrievalItem it;
    it.embedding.assign(emb.data(), emb.data() + emb.size());
    it.subject_id = test.subject[i];
    items.push_back(std::move(it));
  }
  out.map_cosine = retrieval_map(items, SimilarityMetric::kCosine).mean_ap;
  out.map_euclidean = retrieval_map(items, SimilarityMetric::kEuclidean).mean_ap;
  return out;
}

// Retrieval analysis on segmentation outputs (full maps or patches): trains a
// Siamese embedder on the training outputs, then reports held-out mAP.
template <typename T>
double seg_map_retrieval(const LabeledItems<T>& train, const LabeledItems<T>& test,
                         const AttackerConfig& cfg) {
  return retrain_attack(train, test, cfg).map_cosine;
}

// D_adv column: accuracy of the (trained) adversarial discriminator on
// encoded pairs.
template <typename T>
double adversarial_accuracy(const SegSystem<T>& sys,
                            const std::vector<std::pair<Tensor<T>, Tensor<T>>>& volume_pairs,
                            const std::vector<bool>& labels) {
  if (volume_pairs.size() != labels.size() || volume_pairs.empty())
    throw std::invalid_argument("adversarial_accuracy: size mismatch or empty");
  std::vector<double> probs;
  probs.reserve(volume_pairs.size());
  for (const auto& [vi, vj] : volume_pairs) {
    Tape<T> tp;
    auto lift = [&](const Tensor<T>& v) {
      return tp.input(Tensor<T>({1, v.dim(0), v.dim(1), v.dim(2)}, v.vec()));
    };
    auto ei = sys.G.forward(tp, lift(vi));
    auto ej = sys.G.forward(tp, lift(vj));
    probs.push_back(double(tp.value(sys.D.pair_prob(tp, ei, ej))[0]));
  }
  return pair_accuracy(probs, labels);
}

// Consolidated audit results mirroring the attack/Dice/retrieval tables.
struct AuditReport {
  std::vector<double> dice_per_class;
  double dice_overall = 0.0;
  double threshold_attack_accuracy = 0.0;
  double d_adv_accuracy = 0.0;
  double d_new_accuracy = 0.0;
  double map_encodings_cosine = 0.0;
  double map_encodings_euclidean = 0.0;
  double map_seg_full = 0.0;
  double map_seg_patch_mid = 0.0;    // window = half the volume extent
  double map_seg_patch_small = 0.0;  // window = quarter the volume extent
  double msssim_intra_mean = 0.0;
  double msssim_inter_mean = 0.0;
  double msssim_ks = 0.0;
  int msssim_scales = 0;
  double lambda = 0.0;

  void validate() const {
    for (double v : {threshold_attack_accuracy, d_adv_accuracy, d_new_accuracy,
                     map_encodings_cosine, map_encodings_euclidean, map_seg_full,
                     map_seg_patch_mid, map_seg_patch_small})
      if (v < 0.0 || v > 1.0)
        throw std::invalid_argument("AuditReport: accuracy/mAP outside [0,1]");
  }

  nlohmann::json to_json() const {
    return {{"lambda", lambda},
            {"dice", {{"per_class", dice_per_class}, {"overall", dice_overall}}},
            {"attacks",
             {{"threshold_accuracy", threshold_attack_accuracy},
              {"d_adv_accuracy", d_adv_accuracy},
              {"d_new_accuracy", d_new_accuracy}}},
            {"retrieval",
             {{"encodings_map_cosine", map_encodings_cosine},
              {"encodings_map_euclidean", map_encodings_euclidean},
              {"seg_full_map", map_seg_full},
              {"seg_patch_mid_map", map_seg_patch_mid},
              {"seg_patch_small_map", map_seg_patch_small}}},
            {"msssim",
             {{"intra_mean", msssim_intra_mean},
              {"inter_mean", msssim_inter_mean},
              {"ks", msssim_ks},
              {"scales", msssim_scales}}}};
  }

  static AuditReport from_json(const nlohmann::json& j) {
    AuditReport r;
    r.lambda = j.value("lambda", 0.0);
    r.dice_per_class = j.at("dice").at("per_class").get<std::vector<double>>();
    r.dice_overall = j.at("dice").at("overall").get<double>();
    r.threshold_attack_accuracy = j.at("attacks").at("threshold_accuracy").get<double>();
    r.d_adv_accuracy = j.at("attacks").at("d_adv_accuracy").get<double>();
    r.d_new_accuracy = j.at("attacks").at("d_new_accuracy").get<double>();
    r.map_encodings_cosine = j.at("retrieval").at("encodings_map_cosine").get<double>();
    r.map_encodings_euclidean = j.at("retrieval").at("encodings_map_euclidean").get<double>();
    r.map_seg_full = j.at("retrieval").at("seg_full_map").get<double>();
    r.map_seg_patch_mid = j.at("retrieval").at("seg_patch_mid_map").get<double>();
    r.map_seg_patch_small = j.at("retrieval").at("seg_patch_small_map").get<double>();
    r.msssim_intra_mean = j.at("msssim").at("intra_mean").get<double>();
    r.msssim_inter_mean = j.at("msssim").at("inter_mean").get<double>();
    r.msssim_ks = j.at("msssim").at("ks").get<double>();
    r.msssim_scales = j.at("msssim").at("scales").get<int>();
    return r;
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "identity attacks (accuracy / mAP)\n";
    os << "  MS-SSIM   D_adv     D_new     mAP(cos)  mAP(eucl)\n";
    os << "  " << std::setw(8) << threshold_attack_accuracy << "  " << std::setw(8)
       << d_adv_accuracy << "  " << std::setw(8) << d_new_accuracy << "  " << std::setw(8)
       << map_encodings_cosine << "  " << std::setw(8) << map_encodings_euclidean << "\n\n";
    os << "segmentation dice\n  ";
    for (size_t k = 0; k < dice_per_class.size(); ++k)
      os << "c" << k << "=" << dice_per_class[k] << "  ";
    os << "overall=" << dice_overall << "\n\n";
    os << "segmentation-map retrieval (mAP)\n";
    os << "  full      mid-patch small-patch\n";
    os << "  " << std::setw(8) << map_seg_full << "  " << std::setw(8) << map_seg_patch_mid
       << "  " << std::setw(8) << map_seg_patch_small << "\n\n";
    os << "ms-ssim distributions: intra_mean=" << msssim_intra_mean
       << " inter_mean=" << msssim_inter_mean << " ks=" << msssim_ks
       << " scales=" << msssim_scales << "\n";
    return os.str();
  }
};

}  // namespace privseg
