// mi.hpp - brute-force mutual information on finite joints and the
// variational lower bound H(s) + E[log Q(s|e,e')]. Nats throughout.
#pragma once

#include <json.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "privseg/losses.hpp"
#include "privseg/nets.hpp"
#include "privseg/tensor.hpp"

namespace privseg {

// Joint distribution p(e, e', s) over finite alphabets E x E' x {0,1}.
struct DiscreteJoint {
  Tensor<double> p;  // shape (nE, nE2, 2)

  void validate() const {
    if (p.ndim() != 3 || p.dim(2) != 2)
      throw std::invalid_argument("DiscreteJoint: expected (nE, nE', 2) table");
    double sum = 0.0;
    for (int64_t i = 0; i < p.size(); ++i) {
      if (!(p[i] >= 0.0)) throw std::invalid_argument("DiscreteJoint: negative mass");
      sum += p[i];
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("DiscreteJoint: mass sums to " + std::to_string(sum));
  }

  static DiscreteJoint from_json(const nlohmann::json& j) {
    DiscreteJoint d;
    const auto shape = j.at("shape").get<Shape>();
    d.p = Tensor<double>(shape, j.at("table").get<std::vector<double>>());
    d.validate();
    return d;
  }

  nlohmann::json to_json() const {
    return {{"shape", p.shape()}, {"table", p.vec()}};
  }
};

// Conditional model q(s | e, e'), rows over s normalized.
struct ConditionalModel {
  Tensor<double> q;  // shape (nE, nE2, 2)

  void validate() const {
    if (q.ndim() != 3 || q.dim(2) != 2)
      throw std::invalid_argument("ConditionalModel: expected (nE, nE', 2) table");
    for (int64_t e = 0; e < q.dim(0); ++e)
      for (int64_t f = 0; f < q.dim(1); ++f) {
        const double a = q.at(e, f, 0), b = q.at(e, f, 1);
        if (!(a >= 0.0) || !(b >= 0.0) || std::abs(a + b - 1.0) > 1e-9)
          throw std::invalid_argument("ConditionalModel: rows must be probabilities");
      }
  }
};

namespace detail {
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }
}  // namespace detail

// Exact I((e,e'); s) = H(s) - H(s | e,e') by marginalization.
inline double brute_force_mi(const DiscreteJoint& j) {
  j.validate();
  const int64_t nE = j.p.dim(0), nF = j.p.dim(1);
  double ps[2] = {0.0, 0.0};
  for (int64_t e = 0; e < nE; ++e)
    for (int64_t f = 0; f < nF; ++f)
      for (int s = 0; s < 2; ++s) ps[s] += j.p.at(e, f, s);
  double h_s = -(detail::xlogx(ps[0]) + detail::xlogx(ps[1]));

  double h_cond = 0.0;
  for (int64_t e = 0; e < nE; ++e)
    for (int64_t f = 0; f < nF; ++f) {
      const double pef = j.p.at(e, f, 0) + j.p.at(e, f, 1);
      if (pef <= 0.0) continue;
      for (int s = 0; s < 2; ++s) {
        const double pefs = j.p.at(e, f, s);
        if (pefs > 0.0) h_cond -= pefs * std::log(pefs / pef);
      }
    }
  return h_s - h_cond;
}

struct BoundEstimate {
  double value = 0.0;       // nats; -inf when Q vanishes on the support
  double std_err = 0.0;     // Monte-Carlo standard error (0 for exact)
  int64_t samples = 0;      // 0 for exact computation
  bool minus_infinity = false;
  bool empirical_prior = false;  // H(s) taken from empirical label frequency
};

// Exact H(s) + E_{(e,e',s)~j}[log Q(s|e,e')] on a discrete joint. Lower-bounds
// brute_force_mi for every valid Q, with equality at the exact posterior.
inline BoundEstimate variational_bound(const ConditionalModel& q, const DiscreteJoint& j) {
  j.validate();
  q.validate();
  if (q.q.shape() != j.p.shape())
    throw std::invalid_argument("variational_bound: Q/joint shape mismatch");
  const int64_t nE = j.p.dim(0), nF = j.p.dim(1);
  double ps[2] = {0.0, 0.0};
  for (int64_t e = 0; e < nE; ++e)
    for (int64_t f = 0; f < nF; ++f)
      for (int s = 0; s < 2; ++s) ps[s] += j.p.at(e, f, s);
  const double h_s = -(detail::xlogx(ps[0]) + detail::xlogx(ps[1]));

  BoundEstimate out;
  double expect = 0.0;
  for (int64_t e = 0; e < nE; ++e)
    for (int64_t f = 0; f < nF; ++f)
      for (int s = 0; s < 2; ++s) {
        const double mass = j.p.at(e, f, s);
        if (mass <= 0.0) continue;
        const double qv = q.q.at(e, f, s);
        if (qv <= 0.0) {
          out.minus_infinity = true;
          out.value = -std::numeric_limits<double>::infinity();
          return out;
        }
        expect += mass * std::log(qv);
      }
  out.value = h_s + expect;
  return out;
}

// The exact posterior P(s | e, e') of a joint; where (e,e') has no mass the
// row defaults to the marginal P(s).
inline ConditionalModel exact_posterior(const DiscreteJoint& j) {
  j.validate();
  const int64_t nE = j.p.dim(0), nF = j.p.dim(1);
  double ps[2] = {0.0, 0.0};
  double total = 0.0;
  for (int64_t e = 0; e < nE; ++e)
    for (int64_t f = 0; f < nF; ++f)
      for (int s = 0; s < 2; ++s) {
        ps[s] += j.p.at(e, f, s);
        total += j.p.at(e, f, s);
      }
  ConditionalModel q;
  q.q = Tensor<double>(j.p.shape());
  for (int64_t e = 0; e < nE; ++e)
    for (int64_t f = 0; f < nF; ++f) {
      const double pef = j.p.at(e, f, 0) + j.p.at(e, f, 1);
      for (int s = 0; s < 2; ++s)
        q.q.at(e, f, s) = pef > 0.0 ? j.p.at(e, f, s) / pef : ps[s] / total;
    }
  return q;
}

// Monte-Carlo form on (log Q) samples: H(s) from the empirical label
// frequency plus the sample mean of log Q, with its standard error.
inline BoundEstimate variational_bound_mc(const std::vector<double>& log_q,
                                          const std::vector<bool>& labels) {
  if (log_q.size() != labels.size() || log_q.empty())
    throw std::invalid_argument("variational_bound_mc: size mismatch or empty");
  size_t pos = 0;
  for (bool b : labels)
    if (b) ++pos;
  const double p1 = double(pos) / double(labels.size());
  const double h_s = -(detail::xlogx(p1) + detail::xlogx(1.0 - p1));

  BoundEstimate out;
  out.samples = static_cast<int64_t>(log_q.size());
  double mean = 0.0;
  for (double v : log_q) {
    if (std::isinf(v)) {
      out.minus_infinity = true;
      out.value = -std::numeric_limits<double>::infinity();
      return out;
    }
    mean += v;
  }
  mean /= double(log_q.size());
  double var = 0.0;
  for (double v : log_q) var += (v - mean) * (v - mean);
  var /= std::max<double>(1.0, double(log_q.size()) - 1.0);
  out.value = h_s + mean;
  out.std_err = std::sqrt(var / double(log_q.size()));
  return out;
}

// Empirical lower-bound estimate of the identity information remaining in
// encodings: H(s) - mean BCE of D on encoded pairs (log Q = -l_D). H(s) is
// ln 2 for balanced pairs, otherwise the empirical entropy (flagged).
template <typename T>
BoundEstimate audit_model(const UNet3d<T>& encoder, const Siamese<T>& disc,
                          const std::vector<std::pair<Tensor<T>, Tensor<T>>>& pairs,
                          const std::vector<bool>& labels) {
  if (pairs.size() != labels.size() || pairs.empty())
    throw std::invalid_argument("audit_model: size mismatch or empty");
  std::vector<double> log_q(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    Tape<T> tp;
    auto lift = [&](const Tensor<T>& v) {
      return tp.input(Tensor<T>({1, v.dim(0), v.dim(1), v.dim(2)}, v.vec()));
    };
    auto ei = encoder.forward(tp, lift(pairs[i].first));
    auto ej = encoder.forward(tp, lift(pairs[i].second));
    const double prob = double(tp.value(disc.pair_prob(tp, ei, ej))[0]);
    log_q[i] = -bce_loss(prob, labels[i] ? 1.0 : 0.0).value;
  }
  size_t pos = 0;
  for (bool b : labels)
    if (b) ++pos;
  BoundEstimate out = variational_bound_mc(log_q, labels);
  out.empirical_prior = (2 * pos != labels.size());
  return out;
}

}  // namespace privseg
