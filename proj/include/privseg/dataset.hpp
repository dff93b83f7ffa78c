// dataset.hpp - subject/session records, stratified splitting and balanced
// pair sampling.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "privseg/rng.hpp"

namespace privseg {

enum class Split { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split name: " + s);
}

struct SubjectRecord {
  std::string subject_id;
  std::string session_id;
  std::string volume_path;
  std::string labels_path;
};

struct Manifest {
  std::vector<SubjectRecord> records;
  std::vector<Split> split;  // parallel to records

  void validate() const {
    if (records.size() != split.size())
      throw std::invalid_argument("Manifest: records/split size mismatch");
    std::set<std::pair<std::string, std::string>> keys;
    std::map<std::string, Split> subject_split;
    for (size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!keys.insert({r.subject_id, r.session_id}).second)
        throw std::invalid_argument("Manifest: duplicate (subject, session): " +
                                    r.subject_id + "/" + r.session_id);
      auto it = subject_split.find(r.subject_id);
      if (it == subject_split.end()) {
        subject_split.emplace(r.subject_id, split[i]);
      } else if (it->second != split[i]) {
        throw std::invalid_argument("Manifest: subject " + r.subject_id +
                                    " appears in more than one split");
      }
    }
  }

  std::vector<size_t> indices_of(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

// An ordered pair of record indices plus the same-subject indicator.
struct PairSample {
  size_t i = 0;
  size_t j = 0;
  bool same_subject = false;
};

// Subject-level stratified split: all sessions of a subject land in one
// split, with per-split subject counts within +-1 of fractions * total.
inline Manifest split_stratified(std::vector<SubjectRecord> records,
                                 std::array<double, 3> fractions, uint64_t seed) {
  double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("split_stratified: fractions must sum to 1");
  for (double f : fractions)
    if (f < 0.0) throw std::invalid_argument("split_stratified: negative fraction");

  std::vector<std::string> subjects;
  std::map<std::string, std::vector<size_t>> by_subject;
  for (size_t i = 0; i < records.size(); ++i) {
    auto [it, fresh] = by_subject.try_emplace(records[i].subject_id);
    if (fresh) subjects.push_back(records[i].subject_id);
    it->second.push_back(i);
  }
  int nonzero = 0;
  for (double f : fractions)
    if (f > 0.0) ++nonzero;
  if (static_cast<int>(subjects.size()) < nonzero)
    throw std::invalid_argument("split_stratified: fewer subjects than nonzero splits");

  // largest-remainder apportionment of subjects to splits
  const auto n = static_cast<int64_t>(subjects.size());
  std::array<int64_t, 3> count{};
  std::array<double, 3> rem{};
  int64_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fractions[s] * double(n);
    count[s] = static_cast<int64_t>(std::floor(exact));
    rem[s] = exact - double(count[s]);
    assigned += count[s];
  }
  while (assigned < n) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (rem[s] > rem[best]) best = s;
    ++count[best];
    rem[best] = -1.0;
    ++assigned;
  }

  Rng rng(mix_seeds(seed, 0x57A7));
  rng.shuffle(subjects);
  std::map<std::string, Split> assign;
  size_t cursor = 0;
  const Split order[3] = {Split::kTrain, Split::kVal, Split::kTest};
  for (int s = 0; s < 3; ++s)
    for (int64_t c = 0; c < count[s]; ++c) assign[subjects[cursor++]] = order[s];

  Manifest m;
  m.records = std::move(records);
  m.split.resize(m.records.size());
  for (size_t i = 0; i < m.records.size(); ++i)
    m.split[i] = assign.at(m.records[i].subject_id);
  m.validate();
  return m;
}

// Balanced pair sampling: floor(n/2) positive pairs (same subject, distinct
// sessions) and ceil(n/2) negatives; positives are resampled with repetition
// when fewer distinct ones exist.
inline std::vector<PairSample> sample_pairs(const Manifest& m, Split split, size_t n,
                                            uint64_t seed) {
  const auto idx = m.indices_of(split);
  std::vector<std::pair<size_t, size_t>> positives;
  for (size_t a = 0; a < idx.size(); ++a)
    for (size_t b = a + 1; b < idx.size(); ++b)
      if (m.records[idx[a]].subject_id == m.records[idx[b]].subject_id)
        positives.emplace_back(idx[a], idx[b]);
  if (positives.empty())
    throw std::invalid_argument(std::string("sample_pairs: split '") +
                                split_name(split) + "' has no positive pair");
  std::set<std::string> subj;
  for (size_t i : idx) subj.insert(m.records[i].subject_id);
  if (subj.size() < 2)
    throw std::invalid_argument(std::string("sample_pairs: split '") +
                                split_name(split) + "' needs >= 2 subjects");

  Rng rng(mix_seeds(seed, 0xBA1A));
  const size_t n_pos = n / 2;
  const size_t n_neg = n - n_pos;
  std::vector<PairSample> out;
  out.reserve(n);

  std::vector<size_t> order(positives.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (size_t k = 0; k < n_pos; ++k) {
    const auto& p = k < order.size()
                        ? positives[order[k]]
                        : positives[static_cast<size_t>(rng.below(
                              static_cast<int64_t>(positives.size())))];
    out.push_back({p.first, p.second, true});
  }
  size_t made = 0;
  while (made < n_neg) {
    const size_t a = idx[static_cast<size_t>(rng.below(static_cast<int64_t>(idx.size())))];
    const size_t b = idx[static_cast<size_t>(rng.below(static_cast<int64_t>(idx.size())))];
    if (a == b || m.records[a].subject_id == m.records[b].subject_id) continue;
    out.push_back({a, b, false});
    ++made;
  }
  return out;
}

}  // namespace privseg
