// retrieval.hpp - embedding retrieval analysis: precision@k, AP and mAP.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace privseg {

enum class SimilarityMetric { kCosine, kEuclidean };

inline const char* metric_name(SimilarityMetric m) {
  return m == SimilarityMetric::kCosine ? "cosine" : "euclidean";
}

struct RetrievalItem {
  std::vector<double> embedding;
  std::string subject_id;
};

struct RetrievalResult {
  double mean_ap = 0.0;
  std::vector<double> mean_precision_at;  // [k-1] -> mean precision@k
  size_t valid_queries = 0;
  size_t skipped_queries = 0;  // queries with no same-subject item (AP undefined)
};

inline double similarity(const std::vector<double>& a, const std::vector<double>& b,
                         SimilarityMetric metric) {
  if (a.size() != b.size())
    throw std::invalid_argument("similarity: embedding length mismatch");
  if (metric == SimilarityMetric::kCosine) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0.0 ? dot / denom : 0.0;
  }
  double sq = 0.0;
  for (size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return -std::sqrt(sq);  // larger = more similar
}

// For each query with at least one same-subject item: rank the others by
// similarity (descending, ties broken by stable index order) and accumulate
// AP_i = (1/|T_i|) * sum_k precision@k * s_ik. mAP averages over valid
// queries; queries without a positive are excluded and counted.
inline RetrievalResult retrieval_map(const std::vector<RetrievalItem>& items,
                                     SimilarityMetric metric = SimilarityMetric::kCosine,
                                     size_t k_max = 5) {
  if (items.size() < 2) throw std::invalid_argument("retrieval_map: need >= 2 items");
  RetrievalResult res;
  res.mean_precision_at.assign(k_max, 0.0);

  for (size_t q = 0; q < items.size(); ++q) {
    size_t n_pos = 0;
    for (size_t j = 0; j < items.size(); ++j)
      if (j != q && items[j].subject_id == items[q].subject_id) ++n_pos;
    if (n_pos == 0) {
      ++res.skipped_queries;
      continue;
    }
    std::vector<size_t> order;
    order.reserve(items.size() - 1);
    for (size_t j = 0; j < items.size(); ++j)
      if (j != q) order.push_back(j);
    std::vector<double> sim(items.size(), 0.0);
    for (size_t j : order) sim[j] = similarity(items[q].embedding, items[j].embedding, metric);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return sim[a] > sim[b]; });

    double ap = 0.0;
    size_t hits = 0;
    for (size_t k = 1; k <= order.size(); ++k) {
      const bool rel = items[order[k - 1]].subject_id == items[q].subject_id;
      if (rel) ++hits;
      const double prec = double(hits) / double(k);
      if (rel) ap += prec;
      if (k <= k_max) res.mean_precision_at[k - 1] += prec;
    }
    // ranks beyond the item count keep the final precision for the P@k table
    for (size_t k = order.size() + 1; k <= k_max; ++k)
      res.mean_precision_at[k - 1] += double(hits) / double(order.size());
    res.mean_ap += ap / double(n_pos);
    ++res.valid_queries;
  }
  if (res.valid_queries == 0)
    throw std::invalid_argument("retrieval_map: no query has a same-subject item");
  res.mean_ap /= double(res.valid_queries);
  for (auto& v : res.mean_precision_at) v /= double(res.valid_queries);
  return res;
}

// A similarity score with its same-subject label.
struct ScorePair {
  double value = 0.0;
  bool same_subject = false;
};

struct ThresholdAttackResult {
  double accuracy = 0.0;
  double threshold = 0.0;
  bool positive_above = true;  // predict same-subject when value > threshold
};

// Best achievable accuracy over all thresholds (midpoints of sorted unique
// values plus the two degenerate extremes) and both decision directions.
inline ThresholdAttackResult threshold_attack(const std::vector<ScorePair>& scores) {
  size_t pos = 0;
  for (const auto& s : scores)
    if (s.same_subject) ++pos;
  if (pos == 0 || pos == scores.size())
    throw std::invalid_argument("threshold_attack: need both labels present");

  std::vector<double> uniq;
  uniq.reserve(scores.size());
  for (const auto& s : scores) uniq.push_back(s.value);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  std::vector<double> cands;
  cands.push_back(uniq.front() - 1.0);
  for (size_t i = 0; i + 1 < uniq.size(); ++i)
    cands.push_back(0.5 * (uniq[i] + uniq[i + 1]));
  cands.push_back(uniq.back() + 1.0);

  ThresholdAttackResult best;
  best.accuracy = -1.0;
  for (double t : cands) {
    for (bool above : {true, false}) {
      size_t correct = 0;
      for (const auto& s : scores) {
        const bool pred = above ? (s.value > t) : (s.value <= t);
        if (pred == s.same_subject) ++correct;
      }
      const double acc = double(correct) / double(scores.size());
      if (acc > best.accuracy) {
        best.accuracy = acc;
        best.threshold = t;
        best.positive_above = above;
      }
    }
  }
  return best;
}

// Fraction of pairs where 1[s_hat > 0.5] equals the label.
inline double pair_accuracy(const std::vector<double>& probs,
                            const std::vector<bool>& labels) {
  if (probs.size() != labels.size() || probs.empty())
    throw std::invalid_argument("pair_accuracy: size mismatch or empty");
  size_t ok = 0;
  for (size_t i = 0; i < probs.size(); ++i)
    if ((probs[i] > 0.5) == labels[i]) ++ok;
  return double(ok) / double(probs.size());
}

}  // namespace privseg
