// nets.hpp - encoder/segmenter U-Nets and the Siamese discriminators.
#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "privseg/rng.hpp"
#include "privseg/tape.hpp"
#include "privseg/tensor.hpp"

namespace privseg {

struct NetworkConfig {
  int enc_channels = 1;  // encoding channels C_enc (1 default; 2,3 ablation)
  int unet_depth = 3;    // downsampling levels
  int base_width = 8;    // channels at the first U-Net level
  int dense_blocks = 3;  // discriminator backbone blocks
  int growth = 4;        // dense growth rate
  int embed_dim = 64;    // discriminator embedding length
  int head_hidden = 128; // hidden width of the two-layer head
  int num_classes = 4;   // K

  void validate() const {
    if (enc_channels < 1 || unet_depth < 1 || base_width < 1 || dense_blocks < 1 ||
        growth < 1 || embed_dim < 1 || head_hidden < 1 || num_classes < 2)
      throw std::invalid_argument("NetworkConfig: all sizes must be positive, K >= 2");
  }
};

namespace detail {

template <typename T>
Tensor<T> he_init(Rng& rng, Shape shape, int64_t fan_in) {
  Tensor<T> t(std::move(shape));
  const double sigma = std::sqrt(2.0 / double(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, sigma));
  return t;
}

// Binds a Param into the tape: trainable units accumulate gradient, frozen
// (or const) units only contribute values.
template <typename UnitT, typename T>
typename Tape<T>::Var bind(UnitT&, Tape<T>& tp, const Param<T>& p, bool train) {
  if constexpr (std::is_const_v<UnitT>) {
    (void)train;
    return tp.frozen_param(p);
  } else {
    return train ? tp.param(const_cast<Param<T>&>(p)) : tp.frozen_param(p);
  }
}

}  // namespace detail

template <typename T>
struct ConvUnit {
  Param<T> w, b;
  int64_t k = 3;

  void init(Rng& rng, const std::string& name, int64_t cin, int64_t cout, int64_t kk) {
    k = kk;
    w = Param<T>(name + ".w", detail::he_init<T>(rng, {cout, cin, k, k, k}, cin * k * k * k));
    b = Param<T>(name + ".b", Tensor<T>({cout}));
  }

  template <typename UnitT>
  static typename Tape<T>::Var apply(UnitT& u, Tape<T>& tp, typename Tape<T>::Var x,
                                     bool train) {
    auto wv = detail::bind(u, tp, u.w, train);
    auto bv = detail::bind(u, tp, u.b, train);
    return tp.conv3d(x, wv, bv);
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct LinearUnit {
  Param<T> w, b;

  void init(Rng& rng, const std::string& name, int64_t in_n, int64_t out_n) {
    w = Param<T>(name + ".w", detail::he_init<T>(rng, {out_n, in_n}, in_n));
    b = Param<T>(name + ".b", Tensor<T>({out_n}));
  }

  template <typename UnitT>
  static typename Tape<T>::Var apply(UnitT& u, Tape<T>& tp, typename Tape<T>::Var x,
                                     bool train) {
    auto wv = detail::bind(u, tp, u.w, train);
    auto bv = detail::bind(u, tp, u.b, train);
    return tp.linear(x, wv, bv);
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// 3-d U-Net, shape preserving: inputs whose spatial dims are not divisible by
// 2^depth are zero-padded symmetrically and the output center-cropped back.
template <typename T>
class UNet3d {
 public:
  using Var = typename Tape<T>::Var;

  UNet3d() = default;
  UNet3d(int in_ch, int out_ch, int depth, int base, Rng rng)
      : in_ch_(in_ch), out_ch_(out_ch), depth_(depth), base_(base) {
    enc_.resize(depth_ + 1);
    int64_t cin = in_ch_;
    for (int l = 0; l <= depth_; ++l) {
      const int64_t wdt = int64_t(base_) << l;
      enc_[l].c1.init(rng, tag("enc", l, "conv1"), cin, wdt, 3);
      enc_[l].c2.init(rng, tag("enc", l, "conv2"), wdt, wdt, 3);
      cin = wdt;
    }
    dec_.resize(depth_);
    for (int l = depth_ - 1; l >= 0; --l) {
      const int64_t wdt = int64_t(base_) << l;
      dec_[l].reduce.init(rng, tag("dec", l, "reduce"), wdt * 2, wdt, 3);
      dec_[l].c1.init(rng, tag("dec", l, "conv1"), wdt * 2, wdt, 3);
      dec_[l].c2.init(rng, tag("dec", l, "conv2"), wdt, wdt, 3);
    }
    final_.init(rng, "final", base_, out_ch_, 1);
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int depth() const { return depth_; }

  // x: (in_ch, H, W, D) -> (out_ch, H, W, D), linear final layer.
  template <typename Self>
  static Var run(Self& self, Tape<T>& tp, Var x, bool train) {
    const auto& shp = tp.value(x).shape();
    if (shp.size() != 4 || shp[0] != self.in_ch_)
      throw std::invalid_argument("UNet3d: expected (" + std::to_string(self.in_ch_) +
                                  ",H,W,D) input, got " + shape_str(shp));
    const int64_t mult = int64_t(1) << self.depth_;
    std::array<int64_t, 3> orig{shp[1], shp[2], shp[3]};
    std::array<int64_t, 3> lo{0, 0, 0}, hi{0, 0, 0};
    bool padded = false;
    for (int a = 0; a < 3; ++a) {
      const int64_t rem = orig[a] % mult;
      if (rem != 0) {
        const int64_t need = mult - rem;
        lo[a] = need / 2;
        hi[a] = need - lo[a];
        padded = true;
      }
    }
    if (padded) x = tp.pad_spatial(x, lo, hi);

    std::vector<Var> skips;
    Var cur = x;
    for (int l = 0; l < self.depth_; ++l) {
      cur = block(self.enc_[l], tp, cur, train);
      skips.push_back(cur);
      cur = tp.avg_pool2(cur);
    }
    cur = block(self.enc_[self.depth_], tp, cur, train);
    for (int l = self.depth_ - 1; l >= 0; --l) {
      cur = tp.upsample2(cur);
      cur = tp.relu(ConvUnit<T>::apply(self.dec_[l].reduce, tp, cur, train));
      cur = tp.concat_channels(skips[l], cur);
      cur = tp.relu(ConvUnit<T>::apply(self.dec_[l].c1, tp, cur, train));
      cur = tp.relu(ConvUnit<T>::apply(self.dec_[l].c2, tp, cur, train));
    }
    cur = ConvUnit<T>::apply(self.final_, tp, cur, train);
    if (padded) cur = tp.crop_spatial(cur, lo, orig);
    return cur;
  }

  Var forward(Tape<T>& tp, Var x, bool train) { return run(*this, tp, x, train); }
  Var forward(Tape<T>& tp, Var x) const { return run(*this, tp, x, false); }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& b : enc_) {
      b.c1.collect(out);
      b.c2.collect(out);
    }
    for (auto& d : dec_) {
      d.reduce.collect(out);
      d.c1.collect(out);
      d.c2.collect(out);
    }
    final_.collect(out);
    return out;
  }

 private:
  struct EncBlock {
    ConvUnit<T> c1, c2;
  };
  struct DecBlock {
    ConvUnit<T> reduce, c1, c2;
  };

  template <typename BlockT>
  static Var block(BlockT& b, Tape<T>& tp, Var x, bool train) {
    x = tp.relu(ConvUnit<T>::apply(b.c1, tp, x, train));
    return tp.relu(ConvUnit<T>::apply(b.c2, tp, x, train));
  }

  int in_ch_ = 1, out_ch_ = 1, depth_ = 3, base_ = 8;
  std::vector<EncBlock> enc_;
  std::vector<DecBlock> dec_;
  ConvUnit<T> final_;

  static std::string tag(const char* part, int level, const char* unit) {
    return std::string(part) + std::to_string(level) + "." + unit;
  }
};

// Siamese discriminator: weight-shared backbone -> embedding; head acts on
// the elementwise |emb1 - emb2|, which makes the pair score symmetric.
//
// Two backbone flavors share the head wiring: a densely-connected one (the
// adversarial discriminator) and a residual one (the independent attacker).
template <typename T>
class Siamese {
 public:
  using Var = typename Tape<T>::Var;
  enum class Backbone { kDense, kResidual };

  Siamese() = default;
  Siamese(Backbone kind, int in_ch, int blocks, int growth_or_width, int embed_dim,
          int head_hidden, Rng rng)
      : kind_(kind), in_ch_(in_ch), blocks_(blocks), embed_dim_(embed_dim) {
    if (kind_ == Backbone::kDense) {
      int64_t ch = 2 * growth_or_width;
      stem_.init(rng, "stem", in_ch_, ch, 3);
      dense_.resize(blocks_);
      for (int bl = 0; bl < blocks_; ++bl) {
        for (int ly = 0; ly < kLayersPerBlock; ++ly) {
          dense_[bl].layers.emplace_back();
          dense_[bl].layers.back().init(
              rng, tag("block", bl, ly), ch, growth_or_width, 3);
          ch += growth_or_width;
        }
        if (bl + 1 < blocks_) {
          dense_[bl].transition.init(rng, tag("trans", bl, 0), ch, ch / 2, 1);
          ch /= 2;
        }
      }
      proj_.init(rng, "proj", ch, embed_dim_, 1);
    } else {
      int64_t ch = growth_or_width;
      stem_.init(rng, "stem", in_ch_, ch, 3);
      res_.resize(blocks_);
      for (int bl = 0; bl < blocks_; ++bl) {
        res_[bl].c1.init(rng, tag("res", bl, 1), ch, ch, 3);
        res_[bl].c2.init(rng, tag("res", bl, 2), ch, ch, 3);
        if (bl + 1 < blocks_) {
          res_[bl].widen.init(rng, tag("widen", bl, 0), ch, ch * 2, 1);
          ch *= 2;
        }
      }
      proj_.init(rng, "proj", ch, embed_dim_, 1);
    }
    fc1_.init(rng, "head.fc1", embed_dim_, head_hidden);
    fc2_.init(rng, "head.fc2", head_hidden, 1);
  }

  int in_channels() const { return in_ch_; }
  int embed_dim() const { return embed_dim_; }

  // Backbone embedding of one encoding (C,H,W,D) -> (embed_dim).
  template <typename Self>
  static Var run_embed(Self& self, Tape<T>& tp, Var x, bool train) {
    const auto& shp = tp.value(x).shape();
    if (shp.size() != 4 || shp[0] != self.in_ch_)
      throw std::invalid_argument("Siamese: expected (" + std::to_string(self.in_ch_) +
                                  ",H,W,D) input, got " + shape_str(shp));
    // pad so each pooling stage sees even extents
    const int64_t mult = int64_t(1) << (self.blocks_ - 1);
    std::array<int64_t, 3> lo{0, 0, 0}, hi{0, 0, 0};
    bool padded = false;
    for (int a = 0; a < 3; ++a) {
      const int64_t rem = shp[a + 1] % mult;
      if (rem != 0) {
        const int64_t need = mult - rem;
        lo[a] = need / 2;
        hi[a] = need - lo[a];
        padded = true;
      }
    }
    if (padded) x = tp.pad_spatial(x, lo, hi);

    Var cur = tp.leaky_relu(ConvUnit<T>::apply(self.stem_, tp, x, train), kSlope);
    if (self.kind_ == Backbone::kDense) {
      for (int bl = 0; bl < self.blocks_; ++bl) {
        for (auto& ly : self.dense_[bl].layers) {
          Var f = tp.leaky_relu(ConvUnit<T>::apply(ly, tp, cur, train), kSlope);
          cur = tp.concat_channels(cur, f);
        }
        if (bl + 1 < self.blocks_) {
          cur = tp.leaky_relu(
              ConvUnit<T>::apply(self.dense_[bl].transition, tp, cur, train), kSlope);
          cur = tp.avg_pool2(cur);
        }
      }
    } else {
      for (int bl = 0; bl < self.blocks_; ++bl) {
        Var h = tp.leaky_relu(ConvUnit<T>::apply(self.res_[bl].c1, tp, cur, train), kSlope);
        h = ConvUnit<T>::apply(self.res_[bl].c2, tp, h, train);
        cur = tp.leaky_relu(tp.add(cur, h), kSlope);
        if (bl + 1 < self.blocks_) {
          cur = tp.leaky_relu(ConvUnit<T>::apply(self.res_[bl].widen, tp, cur, train),
                              kSlope);
          cur = tp.avg_pool2(cur);
        }
      }
    }
    cur = ConvUnit<T>::apply(self.proj_, tp, cur, train);
    return tp.global_avg_pool(cur);
  }

  // Pair probability in (0,1).
  template <typename Self>
  static Var run_pair(Self& self, Tape<T>& tp, Var e1, Var e2, bool train) {
    Var m1 = run_embed(self, tp, e1, train);
    Var m2 = run_embed(self, tp, e2, train);
    Var d = tp.abs_diff(m1, m2);
    Var h = tp.leaky_relu(LinearUnit<T>::apply(self.fc1_, tp, d, train), kSlope);
    Var logit = LinearUnit<T>::apply(self.fc2_, tp, h, train);
    return tp.sigmoid(logit);
  }

  Var embed(Tape<T>& tp, Var x, bool train) { return run_embed(*this, tp, x, train); }
  Var embed(Tape<T>& tp, Var x) const { return run_embed(*this, tp, x, false); }
  Var pair_prob(Tape<T>& tp, Var e1, Var e2, bool train) {
    return run_pair(*this, tp, e1, e2, train);
  }
  Var pair_prob(Tape<T>& tp, Var e1, Var e2) const {
    return run_pair(*this, tp, e1, e2, false);
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    stem_.collect(out);
    for (auto& bl : dense_) {
      for (auto& ly : bl.layers) ly.collect(out);
      if (!bl.transition.w.value.empty()) bl.transition.collect(out);
    }
    for (auto& bl : res_) {
      bl.c1.collect(out);
      bl.c2.collect(out);
      if (!bl.widen.w.value.empty()) bl.widen.collect(out);
    }
    proj_.collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
    return out;
  }

 private:
  static constexpr T kSlope = T(0.01);
  static constexpr int kLayersPerBlock = 2;

  struct DenseBlock {
    std::vector<ConvUnit<T>> layers;
    ConvUnit<T> transition;
  };
  struct ResBlock {
    ConvUnit<T> c1, c2, widen;
  };

  Backbone kind_ = Backbone::kDense;
  int in_ch_ = 1, blocks_ = 3, embed_dim_ = 64;
  ConvUnit<T> stem_;
  std::vector<DenseBlock> dense_;
  std::vector<ResBlock> res_;
  ConvUnit<T> proj_;
  LinearUnit<T> fc1_, fc2_;

  static std::string tag(const char* part, int block, int layer) {
    return std::string(part) + std::to_string(block) + "." + std::to_string(layer);
  }
};

// The three networks of the system with their named parameter groups.
template <typename T>
struct SegSystem {
  NetworkConfig cfg;
  UNet3d<T> G;    // encoder
  UNet3d<T> S;    // segmenter
  Siamese<T> D;   // adversarial discriminator
  ConvUnit<T> recon_head;  // 1x1 head used only when pretraining with C_enc > 1

  SegSystem() = default;
  SegSystem(const NetworkConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    G = UNet3d<T>(1, cfg.enc_channels, cfg.unet_depth, cfg.base_width,
                  Rng(mix_seeds(seed, 0xE1)));
    S = UNet3d<T>(cfg.enc_channels, cfg.num_classes, cfg.unet_depth, cfg.base_width,
                  Rng(mix_seeds(seed, 0xE2)));
    D = Siamese<T>(Siamese<T>::Backbone::kDense, cfg.enc_channels, cfg.dense_blocks,
                   cfg.growth, cfg.embed_dim, cfg.head_hidden, Rng(mix_seeds(seed, 0xE3)));
    if (cfg.enc_channels > 1) {
      Rng r(mix_seeds(seed, 0xE4));
      recon_head.init(r, "recon", cfg.enc_channels, 1, 1);
    }
  }

  std::vector<Param<T>*> group(const std::string& name) {
    if (name == "G") {
      auto p = G.params();
      if (cfg.enc_channels > 1) recon_head.collect(p);
      return p;
    }
    if (name == "S") return S.params();
    if (name == "D") return D.params();
    throw std::invalid_argument("unknown parameter group: " + name);
  }

  int64_t param_count(const std::string& name) {
    int64_t n = 0;
    for (auto* p : group(name)) n += p->value.size();
    return n;
  }

  bool all_finite() {
    for (const char* g : {"G", "S", "D"})
      for (auto* p : group(g))
        if (!p->value.all_finite()) return false;
    return true;
  }
};

// --- spec-level forward operations ------------------------------------

// Volume voxels (H,W,D) -> encoding (C_enc,H,W,D).
template <typename T>
Tensor<T> forward_encoder(const UNet3d<T>& g, const Tensor<T>& voxels) {
  if (voxels.ndim() != 3) throw std::invalid_argument("forward_encoder: rank-3 input");
  Tape<T> tp;
  auto x = tp.input(Tensor<T>({1, voxels.dim(0), voxels.dim(1), voxels.dim(2)},
                              voxels.vec()));
  auto out = g.forward(tp, x);
  return tp.value(out);
}

// Encoding (C_enc,H,W,D) -> per-voxel class probabilities (K,H,W,D).
template <typename T>
Tensor<T> forward_segmenter(const UNet3d<T>& s, const Tensor<T>& encoding) {
  if (encoding.ndim() != 4) throw std::invalid_argument("forward_segmenter: rank-4 input");
  Tape<T> tp;
  auto x = tp.input(encoding);
  auto out = tp.softmax_channels(s.forward(tp, x));
  return tp.value(out);
}

// Pair probability that two encodings come from the same subject.
template <typename T>
T forward_discriminator(const Siamese<T>& d, const Tensor<T>& e1, const Tensor<T>& e2) {
  if (!e1.same_shape(e2))
    throw std::invalid_argument("forward_discriminator: encoding shape mismatch");
  Tape<T> tp;
  auto a = tp.input(e1);
  auto b = tp.input(e2);
  return tp.value(d.pair_prob(tp, a, b))[0];
}

template <typename T>
std::vector<T> embed(const Siamese<T>& d, const Tensor<T>& e) {
  Tape<T> tp;
  auto x = tp.input(e);
  return tp.value(d.embed(tp, x)).vec();
}

}  // namespace privseg
