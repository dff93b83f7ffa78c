// tape.hpp - reverse-mode autodiff on Tensor<T> for the 3-d conv networks.
//
// A Tape records the ops of one forward evaluation; backward() walks the
// record in reverse and accumulates parameter gradients into the grad sinks
// registered via param(). Frozen parameters enter the graph through
// frozen_param() and never receive gradient, which is how the alternating
// training steps keep the opposing network's weights out of each update.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "privseg/tensor.hpp"

namespace privseg {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

template <typename T>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;

  // --- leaves ---------------------------------------------------------

  Var input(Tensor<T> v, bool needs_grad = false) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  Var param(Param<T>& p) {
    Node n;
    n.pval = &p.value;
    n.gsink = &p.grad;
    n.needs_grad = true;
    return push(std::move(n));
  }

  Var frozen_param(const Param<T>& p) {
    Node n;
    n.pval = &p.value;
    n.needs_grad = false;
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_[check(v)];
    return n.pval ? *n.pval : n.val;
  }

  // Gradient of the last backward() root w.r.t. v. Zero tensor if v never
  // received a contribution.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.gsink) return *n.gsink;
    if (n.grad.empty()) return Tensor<T>(value(v).shape());
    return n.grad;
  }

  // --- ops -------------------------------------------------------------

  // x:(Cin,H,W,D) w:(Cout,Cin,k,k,k) b:(Cout) -> (Cout,H,W,D), stride 1,
  // zero padding k/2 (shape-preserving). 1x1x1 kernels go through a plain
  // channel GEMM; larger kernels use a direct shift convolution whose inner
  // loops run over contiguous depth spans.
  Var conv3d(Var xv, Var wv, Var bv) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& w = value(wv);
    const Tensor<T>& b = value(bv);
    if (x.ndim() != 4 || w.ndim() != 5) throw std::invalid_argument("conv3d: rank");
    const int64_t cin = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    const int64_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin || w.dim(3) != k || w.dim(4) != k)
      throw std::invalid_argument("conv3d: weight shape " + shape_str(w.shape()) +
                                  " vs input " + shape_str(x.shape()));
    if (b.size() != cout) throw std::invalid_argument("conv3d: bias size");
    const int64_t pad = k / 2;
    const int64_t nvox = H * W * D;

    Tensor<T> y({cout, H, W, D});
    if (k == 1) {
      CMatMap wm(w.data(), cout, cin);
      CMatMap xm(x.data(), cin, nvox);
      MatMap ym(y.data(), cout, nvox);
      ym.noalias() = wm * xm;
      for (int64_t c = 0; c < cout; ++c) {
        T* dst = y.data() + c * nvox;
        const T bias = b[c];
        for (int64_t v = 0; v < nvox; ++v) dst[v] += bias;
      }
    } else {
      for (int64_t co = 0; co < cout; ++co) {
        T* yc = y.data() + co * nvox;
        std::fill(yc, yc + nvox, b[co]);
        for (int64_t ci = 0; ci < cin; ++ci) {
          const T* xc = x.data() + ci * nvox;
          const T* wt = w.data() + (co * cin + ci) * k * k * k;
          shift_accumulate(yc, xc, wt, k, pad, H, W, D);
        }
      }
    }

    Node n;
    n.val = std::move(y);
    n.needs_grad = any_grad({xv, wv, bv});
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, xv, wv, bv, cin, cout, k, pad, H, W, D, nvox] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        const Tensor<T>& x = value(xv);
        const Tensor<T>& w = value(wv);
        const bool need_x = nodes_[xv.id].needs_grad;
        const bool need_w = nodes_[wv.id].needs_grad;
        const bool need_b = nodes_[bv.id].needs_grad;
        if (need_b) {
          Tensor<T>& gb = gbuf(bv);
          for (int64_t c = 0; c < cout; ++c) {
            T acc = T(0);
            const T* src = gy.data() + c * nvox;
            for (int64_t v = 0; v < nvox; ++v) acc += src[v];
            gb[c] += acc;
          }
        }
        if (!need_x && !need_w) return;
        if (k == 1) {
          CMatMap wm(w.data(), cout, cin);
          CMatMap gym(gy.data(), cout, nvox);
          if (need_x) {
            MatMap gxm(gbuf(xv).data(), cin, nvox);
            gxm.noalias() += wm.transpose() * gym;
          }
          if (need_w) {
            CMatMap xm(x.data(), cin, nvox);
            MatMap gwm(gbuf(wv).data(), cout, cin);
            gwm.noalias() += gym * xm.transpose();
          }
          return;
        }
        Tensor<T>* gx = need_x ? &gbuf(xv) : nullptr;
        Tensor<T>* gw = need_w ? &gbuf(wv) : nullptr;
        for (int64_t co = 0; co < cout; ++co) {
          const T* gyc = gy.data() + co * nvox;
          for (int64_t ci = 0; ci < cin; ++ci) {
            if (need_x)
              shift_scatter(gx->data() + ci * nvox, gyc,
                            w.data() + (co * cin + ci) * k * k * k, k, pad, H, W, D);
            if (need_w)
              shift_weight_grad(gw->data() + (co * cin + ci) * k * k * k,
                                x.data() + ci * nvox, gyc, k, pad, H, W, D);
          }
        }
      };
    }
    return out;
  }

  Var relu(Var xv) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return unary(xv, std::move(y), [this, xv](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      const Tensor<T>& x = value(xv);
      Tensor<T>& gx = gbuf(xv);
      for (int64_t i = 0; i < x.size(); ++i)
        if (x[i] > T(0)) gx[i] += gy[i];
    });
  }

  Var leaky_relu(Var xv, T slope) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
    return unary(xv, std::move(y), [this, xv, slope](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      const Tensor<T>& x = value(xv);
      Tensor<T>& gx = gbuf(xv);
      for (int64_t i = 0; i < x.size(); ++i)
        gx[i] += (x[i] > T(0) ? gy[i] : slope * gy[i]);
    });
  }

  Var sigmoid(Var xv) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    Var out = unary(xv, std::move(y), nullptr);
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, xv] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        const Tensor<T>& y = nodes_[out.id].val;
        Tensor<T>& gx = gbuf(xv);
        for (int64_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
      };
    }
    return out;
  }

  // (C,H,W,D) -> (C,H/2,W/2,D/2); spatial dims must be even.
  Var avg_pool2(Var xv) {
    const Tensor<T>& x = value(xv);
    require(x.ndim() == 4, "avg_pool2: rank");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0 && D % 2 == 0, "avg_pool2: odd extent");
    Tensor<T> y({C, H / 2, W / 2, D / 2});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H / 2; ++h)
        for (int64_t w = 0; w < W / 2; ++w)
          for (int64_t d = 0; d < D / 2; ++d) {
            T acc = T(0);
            for (int64_t a = 0; a < 2; ++a)
              for (int64_t b = 0; b < 2; ++b)
                for (int64_t e = 0; e < 2; ++e)
                  acc += x.at(c, 2 * h + a, 2 * w + b, 2 * d + e);
            y.at(c, h, w, d) = acc / T(8);
          }
    return unary(xv, std::move(y), [this, xv](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      Tensor<T>& gx = gbuf(xv);
      const auto& s = gy.shape();
      for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t h = 0; h < s[1]; ++h)
          for (int64_t w = 0; w < s[2]; ++w)
            for (int64_t d = 0; d < s[3]; ++d) {
              const T g = gy.at(c, h, w, d) / T(8);
              for (int64_t a = 0; a < 2; ++a)
                for (int64_t b = 0; b < 2; ++b)
                  for (int64_t e = 0; e < 2; ++e)
                    gx.at(c, 2 * h + a, 2 * w + b, 2 * d + e) += g;
            }
    });
  }

  // (C,H,W,D) -> (C,2H,2W,2D), nearest neighbor.
  Var upsample2(Var xv) {
    const Tensor<T>& x = value(xv);
    require(x.ndim() == 4, "upsample2: rank");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    Tensor<T> y({C, 2 * H, 2 * W, 2 * D});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < 2 * H; ++h)
        for (int64_t w = 0; w < 2 * W; ++w)
          for (int64_t d = 0; d < 2 * D; ++d)
            y.at(c, h, w, d) = x.at(c, h / 2, w / 2, d / 2);
    return unary(xv, std::move(y), [this, xv](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      Tensor<T>& gx = gbuf(xv);
      const auto& s = gy.shape();
      for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t h = 0; h < s[1]; ++h)
          for (int64_t w = 0; w < s[2]; ++w)
            for (int64_t d = 0; d < s[3]; ++d)
              gx.at(c, h / 2, w / 2, d / 2) += gy.at(c, h, w, d);
    });
  }

  Var concat_channels(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require(a.ndim() == 4 && b.ndim() == 4, "concat: rank");
    for (int i = 1; i < 4; ++i)
      require(a.dim(i) == b.dim(i), "concat: spatial mismatch");
    const int64_t ca = a.dim(0), cb = b.dim(0);
    Tensor<T> y({ca + cb, a.dim(1), a.dim(2), a.dim(3)});
    std::copy(a.data(), a.data() + a.size(), y.data());
    std::copy(b.data(), b.data() + b.size(), y.data() + a.size());
    Node n;
    n.val = std::move(y);
    n.needs_grad = any_grad({av, bv});
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, av, bv] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        const int64_t na = value(av).size();
        if (nodes_[av.id].needs_grad) {
          Tensor<T>& ga = gbuf(av);
          for (int64_t i = 0; i < na; ++i) ga[i] += gy[i];
        }
        if (nodes_[bv.id].needs_grad) {
          Tensor<T>& gb = gbuf(bv);
          for (int64_t i = 0; i < value(bv).size(); ++i) gb[i] += gy[na + i];
        }
      };
    }
    return out;
  }

  Var add(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require(a.same_shape(b), "add: shape mismatch");
    Tensor<T> y(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    Node n;
    n.val = std::move(y);
    n.needs_grad = any_grad({av, bv});
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, av, bv] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        for (Var v : {av, bv})
          if (nodes_[v.id].needs_grad) gbuf(v).axpy(T(1), gy);
      };
    }
    return out;
  }

  // Symmetric zero padding / center crop over the spatial axes of (C,H,W,D).
  Var pad_spatial(Var xv, std::array<int64_t, 3> lo, std::array<int64_t, 3> hi) {
    const Tensor<T>& x = value(xv);
    require(x.ndim() == 4, "pad_spatial: rank");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    Tensor<T> y({C, H + lo[0] + hi[0], W + lo[1] + hi[1], D + lo[2] + hi[2]});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t d = 0; d < D; ++d)
            y.at(c, h + lo[0], w + lo[1], d + lo[2]) = x.at(c, h, w, d);
    return unary(xv, std::move(y), [this, xv, lo](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      Tensor<T>& gx = gbuf(xv);
      const auto& s = gx.shape();
      for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t h = 0; h < s[1]; ++h)
          for (int64_t w = 0; w < s[2]; ++w)
            for (int64_t d = 0; d < s[3]; ++d)
              gx.at(c, h, w, d) += gy.at(c, h + lo[0], w + lo[1], d + lo[2]);
    });
  }

  Var crop_spatial(Var xv, std::array<int64_t, 3> lo, std::array<int64_t, 3> extent) {
    const Tensor<T>& x = value(xv);
    require(x.ndim() == 4, "crop_spatial: rank");
    const int64_t C = x.dim(0);
    Tensor<T> y({C, extent[0], extent[1], extent[2]});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < extent[0]; ++h)
        for (int64_t w = 0; w < extent[1]; ++w)
          for (int64_t d = 0; d < extent[2]; ++d)
            y.at(c, h, w, d) = x.at(c, h + lo[0], w + lo[1], d + lo[2]);
    return unary(xv, std::move(y), [this, xv, lo](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      Tensor<T>& gx = gbuf(xv);
      const auto& s = gy.shape();
      for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t h = 0; h < s[1]; ++h)
          for (int64_t w = 0; w < s[2]; ++w)
            for (int64_t d = 0; d < s[3]; ++d)
              gx.at(c, h + lo[0], w + lo[1], d + lo[2]) += gy.at(c, h, w, d);
    });
  }

  // (C,H,W,D) -> (C): spatial mean per channel.
  Var global_avg_pool(Var xv) {
    const Tensor<T>& x = value(xv);
    require(x.ndim() == 4, "global_avg_pool: rank");
    const int64_t C = x.dim(0), nvox = x.size() / C;
    Tensor<T> y({C});
    for (int64_t c = 0; c < C; ++c) {
      T acc = T(0);
      const T* src = x.data() + c * nvox;
      for (int64_t v = 0; v < nvox; ++v) acc += src[v];
      y[c] = acc / T(nvox);
    }
    return unary(xv, std::move(y), [this, xv, nvox](Var out) {
      const Tensor<T>& gy = nodes_[out.id].grad;
      Tensor<T>& gx = gbuf(xv);
      const int64_t C = gy.size();
      for (int64_t c = 0; c < C; ++c) {
        const T g = gy[c] / T(nvox);
        T* dst = gx.data() + c * nvox;
        for (int64_t v = 0; v < nvox; ++v) dst[v] += g;
      }
    });
  }

  // x:(in) w:(out,in) b:(out) -> (out)
  Var linear(Var xv, Var wv, Var bv) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& w = value(wv);
    const Tensor<T>& b = value(bv);
    require(w.ndim() == 2 && w.dim(1) == x.size() && b.size() == w.dim(0),
            "linear: shape mismatch");
    const int64_t out_n = w.dim(0), in_n = w.dim(1);
    Tensor<T> y({out_n});
    for (int64_t o = 0; o < out_n; ++o) {
      T acc = b[o];
      const T* row = w.data() + o * in_n;
      for (int64_t i = 0; i < in_n; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
    Node n;
    n.val = std::move(y);
    n.needs_grad = any_grad({xv, wv, bv});
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, xv, wv, bv, out_n, in_n] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        const Tensor<T>& x = value(xv);
        const Tensor<T>& w = value(wv);
        if (nodes_[bv.id].needs_grad) gbuf(bv).axpy(T(1), gy);
        if (nodes_[wv.id].needs_grad) {
          Tensor<T>& gw = gbuf(wv);
          for (int64_t o = 0; o < out_n; ++o)
            for (int64_t i = 0; i < in_n; ++i) gw[o * in_n + i] += gy[o] * x[i];
        }
        if (nodes_[xv.id].needs_grad) {
          Tensor<T>& gx = gbuf(xv);
          for (int64_t o = 0; o < out_n; ++o)
            for (int64_t i = 0; i < in_n; ++i) gx[i] += gy[o] * w[o * in_n + i];
        }
      };
    }
    return out;
  }

  Var abs_diff(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require(a.same_shape(b), "abs_diff: shape mismatch");
    Tensor<T> y(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) y[i] = std::abs(a[i] - b[i]);
    Node n;
    n.val = std::move(y);
    n.needs_grad = any_grad({av, bv});
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, av, bv] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        const Tensor<T>& a = value(av);
        const Tensor<T>& b = value(bv);
        const bool na = nodes_[av.id].needs_grad, nb = nodes_[bv.id].needs_grad;
        for (int64_t i = 0; i < a.size(); ++i) {
          const T s = a[i] > b[i] ? T(1) : (a[i] < b[i] ? T(-1) : T(0));
          if (na) gbuf(av)[i] += s * gy[i];
          if (nb) gbuf(bv)[i] -= s * gy[i];
        }
      };
    }
    return out;
  }

  // Channel-wise softmax over (K,H,W,D).
  Var softmax_channels(Var xv) {
    const Tensor<T>& x = value(xv);
    require(x.ndim() == 4, "softmax_channels: rank");
    const int64_t K = x.dim(0), nvox = x.size() / K;
    Tensor<T> y(x.shape());
    for (int64_t v = 0; v < nvox; ++v) {
      T mx = x[v];
      for (int64_t k = 1; k < K; ++k) mx = std::max(mx, x[k * nvox + v]);
      T z = T(0);
      for (int64_t k = 0; k < K; ++k) {
        const T e = std::exp(x[k * nvox + v] - mx);
        y[k * nvox + v] = e;
        z += e;
      }
      for (int64_t k = 0; k < K; ++k) y[k * nvox + v] /= z;
    }
    Var out = unary(xv, std::move(y), nullptr);
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, xv, K, nvox] {
        const Tensor<T>& gy = nodes_[out.id].grad;
        const Tensor<T>& p = nodes_[out.id].val;
        Tensor<T>& gx = gbuf(xv);
        for (int64_t v = 0; v < nvox; ++v) {
          T dot = T(0);
          for (int64_t k = 0; k < K; ++k) dot += gy[k * nvox + v] * p[k * nvox + v];
          for (int64_t k = 0; k < K; ++k)
            gx[k * nvox + v] += p[k * nvox + v] * (gy[k * nvox + v] - dot);
        }
      };
    }
    return out;
  }

  // Soft multi-class Dice loss against integer labels; mean over the classes
  // present in either the target or the prediction support.
  Var dice_loss(Var probs_v, const Tensor<uint8_t>& target, T eps) {
    const Tensor<T>& p = value(probs_v);
    require(p.ndim() == 4, "dice_loss: rank");
    const int64_t K = p.dim(0), nvox = p.size() / K;
    require(target.size() == nvox, "dice_loss: target size mismatch");

    std::vector<T> inter(K, T(0)), psum(K, T(0)), tsum(K, T(0));
    for (int64_t v = 0; v < nvox; ++v) {
      const int64_t t = target[v];
      require(t >= 0 && t < K, "dice_loss: label out of range");
      tsum[t] += T(1);
      inter[t] += p[t * nvox + v];
    }
    for (int64_t k = 0; k < K; ++k) {
      const T* src = p.data() + k * nvox;
      T acc = T(0);
      for (int64_t v = 0; v < nvox; ++v) acc += src[v];
      psum[k] = acc;
    }
    std::vector<char> incl(K, 0);
    int64_t m = 0;
    for (int64_t k = 0; k < K; ++k)
      if (tsum[k] > T(0) || psum[k] > T(0)) {
        incl[k] = 1;
        ++m;
      }
    require(m > 0, "dice_loss: empty class union");
    T loss = T(0);
    std::vector<T> denom(K, T(0));
    for (int64_t k = 0; k < K; ++k) {
      if (!incl[k]) continue;
      denom[k] = tsum[k] + psum[k] + eps;
      loss += T(1) - T(2) * inter[k] / denom[k];
    }
    loss /= T(m);

    Node n;
    n.val = Tensor<T>({1}, loss);
    n.needs_grad = nodes_[probs_v.id].needs_grad;
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      // capture reduction terms; target one-hot reconstructed on the fly
      auto tgt = target;
      nodes_[out.id].back = [this, out, probs_v, tgt = std::move(tgt), inter, denom,
                             incl, m, K, nvox] {
        const T g = nodes_[out.id].grad[0] / T(m);
        Tensor<T>& gp = gbuf(probs_v);
        for (int64_t k = 0; k < K; ++k) {
          if (!incl[k]) continue;
          const T d = denom[k];
          const T base = T(2) * inter[k] / (d * d);  // d(2I/d)/dp for y=0
          T* dst = gp.data() + k * nvox;
          for (int64_t v = 0; v < nvox; ++v) {
            const T y = (tgt[v] == k) ? T(1) : T(0);
            dst[v] += g * (base - T(2) * y / d);
          }
        }
      };
    }
    return out;
  }

  // Binary cross-entropy on a scalar probability, clamped to [1e-7, 1-1e-7].
  // A non-finite probability yields a non-finite loss so divergence guards
  // can see it instead of the clamp masking it.
  Var bce_loss(Var prob_v, T label) {
    const Tensor<T>& p = value(prob_v);
    require(p.size() == 1, "bce_loss: scalar expected");
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    const T c = std::isfinite(double(p[0])) ? std::min(hi, std::max(lo, p[0])) : p[0];
    const T loss = -label * std::log(c) - (T(1) - label) * std::log(T(1) - c);
    Node n;
    n.val = Tensor<T>({1}, loss);
    n.needs_grad = nodes_[prob_v.id].needs_grad;
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, prob_v, label, c] {
        const T g = nodes_[out.id].grad[0];
        gbuf(prob_v)[0] += g * (-label / c + (T(1) - label) / (T(1) - c));
      };
    }
    return out;
  }

  // Mean squared error between two same-shape tensors -> scalar.
  Var mse(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require(a.same_shape(b), "mse: shape mismatch");
    const int64_t n = a.size();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
      const T d = a[i] - b[i];
      acc += d * d;
    }
    Node nd;
    nd.val = Tensor<T>({1}, acc / T(n));
    nd.needs_grad = any_grad({av, bv});
    Var out = push_node(std::move(nd));
    if (nodes_[out.id].needs_grad) {
      nodes_[out.id].back = [this, out, av, bv, n] {
        const T g = nodes_[out.id].grad[0] * T(2) / T(n);
        const Tensor<T>& a = value(av);
        const Tensor<T>& b = value(bv);
        const bool na = nodes_[av.id].needs_grad, nb = nodes_[bv.id].needs_grad;
        for (int64_t i = 0; i < n; ++i) {
          const T d = g * (a[i] - b[i]);
          if (na) gbuf(av)[i] += d;
          if (nb) gbuf(bv)[i] -= d;
        }
      };
    }
    return out;
  }

  // Weighted sum of scalar vars -> scalar.
  Var wsum(const std::vector<Var>& vs, const std::vector<T>& ws) {
    require(vs.size() == ws.size() && !vs.empty(), "wsum: arity");
    T acc = T(0);
    bool ng = false;
    for (size_t i = 0; i < vs.size(); ++i) {
      const Tensor<T>& v = value(vs[i]);
      require(v.size() == 1, "wsum: scalar expected");
      acc += ws[i] * v[0];
      ng = ng || nodes_[vs[i].id].needs_grad;
    }
    Node n;
    n.val = Tensor<T>({1}, acc);
    n.needs_grad = ng;
    Var out = push_node(std::move(n));
    if (ng) {
      nodes_[out.id].back = [this, out, vs, ws] {
        const T g = nodes_[out.id].grad[0];
        for (size_t i = 0; i < vs.size(); ++i)
          if (nodes_[vs[i].id].needs_grad) gbuf(vs[i])[0] += g * ws[i];
      };
    }
    return out;
  }

  // --- driver ----------------------------------------------------------

  void backward(Var root) {
    require(value(root).size() == 1, "backward: root must be scalar");
    gbuf(root)[0] += T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.back) continue;
      if (n.grad.empty()) continue;  // no downstream contribution
      n.back();
    }
    // flush param-leaf gradients into their sinks
    for (Node& n : nodes_) {
      if (n.gsink && !n.grad.empty()) n.gsink->axpy(T(1), n.grad);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> val;
    const Tensor<T>* pval = nullptr;
    Tensor<T>* gsink = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;

  static void require(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  }

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("invalid tape var");
    return v.id;
  }

  Var push(Node n) { return push_node(std::move(n)); }

  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (nodes_[check(v)].needs_grad) return true;
    return false;
  }

  Tensor<T>& gbuf(Var v) {
    Node& n = nodes_[check(v)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.pval ? n.pval->shape() : n.val.shape());
    return n.grad;
  }

  Var unary(Var xv, Tensor<T> y, std::function<void(Var)> backfn) {
    Node n;
    n.val = std::move(y);
    n.needs_grad = nodes_[check(xv)].needs_grad;
    Var out = push_node(std::move(n));
    if (nodes_[out.id].needs_grad && backfn)
      nodes_[out.id].back = [fn = std::move(backfn), out] { fn(out); };
    return out;
  }

  // Valid output region for tap offset (oh, ow, od): output voxel (h,w,d)
  // reads x(h+oh, w+ow, d+od); the depth span is contiguous in memory.
  struct TapRegion {
    int64_t oh, ow, od, h0, h1, w0, w1, d0, len;
    TapRegion(int64_t i, int64_t j, int64_t l, int64_t pad, int64_t H, int64_t W,
              int64_t D)
        : oh(i - pad), ow(j - pad), od(l - pad) {
      h0 = std::max<int64_t>(0, -oh);
      h1 = std::min(H, H - oh);
      w0 = std::max<int64_t>(0, -ow);
      w1 = std::min(W, W - ow);
      d0 = std::max<int64_t>(0, -od);
      len = std::min(D, D - od) - d0;
    }
    bool empty() const { return len <= 0 || h1 <= h0 || w1 <= w0; }
  };

  // y += sum_taps w[tap] * shift(x, tap)
  static void shift_accumulate(T* y, const T* x, const T* wt, int64_t k, int64_t pad,
                               int64_t H, int64_t W, int64_t D) {
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < k; ++j)
        for (int64_t l = 0; l < k; ++l) {
          const T alpha = wt[(i * k + j) * k + l];
          const TapRegion r(i, j, l, pad, H, W, D);
          if (r.empty()) continue;
          for (int64_t h = r.h0; h < r.h1; ++h)
            for (int64_t w = r.w0; w < r.w1; ++w) {
              const T* xs = x + (((h + r.oh) * W + (w + r.ow)) * D + r.d0 + r.od);
              T* ys = y + ((h * W + w) * D + r.d0);
              for (int64_t d = 0; d < r.len; ++d) ys[d] += alpha * xs[d];
            }
        }
  }

  // gx += sum_taps w[tap] * shift^T(gy, tap)
  static void shift_scatter(T* gx, const T* gy, const T* wt, int64_t k, int64_t pad,
                            int64_t H, int64_t W, int64_t D) {
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < k; ++j)
        for (int64_t l = 0; l < k; ++l) {
          const T alpha = wt[(i * k + j) * k + l];
          const TapRegion r(i, j, l, pad, H, W, D);
          if (r.empty()) continue;
          for (int64_t h = r.h0; h < r.h1; ++h)
            for (int64_t w = r.w0; w < r.w1; ++w) {
              T* xs = gx + (((h + r.oh) * W + (w + r.ow)) * D + r.d0 + r.od);
              const T* gs = gy + ((h * W + w) * D + r.d0);
              for (int64_t d = 0; d < r.len; ++d) xs[d] += alpha * gs[d];
            }
        }
  }

  // gw[tap] += <shift(x, tap), gy>
  static void shift_weight_grad(T* gw, const T* x, const T* gy, int64_t k, int64_t pad,
                                int64_t H, int64_t W, int64_t D) {
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < k; ++j)
        for (int64_t l = 0; l < k; ++l) {
          const TapRegion r(i, j, l, pad, H, W, D);
          if (r.empty()) continue;
          T acc = T(0);
          for (int64_t h = r.h0; h < r.h1; ++h)
            for (int64_t w = r.w0; w < r.w1; ++w) {
              const T* xs = x + (((h + r.oh) * W + (w + r.ow)) * D + r.d0 + r.od);
              const T* gs = gy + ((h * W + w) * D + r.d0);
              for (int64_t d = 0; d < r.len; ++d) acc += xs[d] * gs[d];
            }
          gw[(i * k + j) * k + l] += acc;
        }
  }
};

}  // namespace privseg
