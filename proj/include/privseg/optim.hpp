// optim.hpp - Adam with per-group moment state and global-norm clipping.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "privseg/tape.hpp"

namespace privseg {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Scales the grads of a parameter set so their joint norm is <= max_norm.
// max_norm <= 0 disables clipping. Returns the pre-clip norm.
template <typename T>
double clip_global_norm(const std::vector<Param<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    const double n = p->grad.norm2();
    sq += n * n;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params) p->grad.scale(s);
  }
  return norm;
}

template <typename T>
void zero_grads(const std::vector<Param<T>*>& params) {
  for (auto* p : params) p->grad.zero();
}

template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t steps() const { return t_; }

  void step(const std::vector<Param<T>*>& params) {
    if (m_.empty()) allocate(params);
    if (m_.size() != params.size())
      throw std::invalid_argument("Adam: parameter set changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      if (!m.same_shape(p.value))
        throw std::invalid_argument("Adam: moment/param shape mismatch for " + p.name);
      for (int64_t k = 0; k < p.value.size(); ++k) {
        const double g = double(p.grad[k]);
        const double mn = cfg_.beta1 * double(m[k]) + (1.0 - cfg_.beta1) * g;
        const double vn = cfg_.beta2 * double(v[k]) + (1.0 - cfg_.beta2) * g * g;
        m[k] = static_cast<T>(mn);
        v[k] = static_cast<T>(vn);
        p.value[k] -= static_cast<T>(cfg_.lr * (mn / bc1) /
                                     (std::sqrt(vn / bc2) + cfg_.eps));
      }
    }
  }

  // serialization hooks: moments in parameter order plus the step counter
  std::vector<Tensor<T>>& moments_m() { return m_; }
  std::vector<Tensor<T>>& moments_v() { return v_; }
  const std::vector<Tensor<T>>& moments_m() const { return m_; }
  const std::vector<Tensor<T>>& moments_v() const { return v_; }
  void set_steps(int64_t t) { t_ = t; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;

  void allocate(const std::vector<Param<T>*>& params) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
};

}  // namespace privseg
