// patchwork.hpp - deterministic patch grids, crop/stitch, and the client-side
// shuffle protocol.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "privseg/rng.hpp"
#include "privseg/tensor.hpp"

namespace privseg {

struct PatchGrid {
  Shape volume_shape;                            // (H,W,D)
  std::array<int64_t, 3> window{};
  std::array<int64_t, 3> steps{};
  std::vector<std::array<int64_t, 3>> positions;  // lexicographically sorted corners
};

// Sliding-window corners: 0, s, 2s, ... while p + w <= dim; when the last
// start leaves voxels uncovered, the flush position dim - w is appended.
inline PatchGrid compute_positions(const Shape& shape, std::array<int64_t, 3> window,
                                   std::array<int64_t, 3> steps) {
  if (shape.size() != 3) throw std::invalid_argument("compute_positions: rank-3 shape");
  std::array<std::vector<int64_t>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1 || steps[a] < 1)
      throw std::invalid_argument("compute_positions: window and steps must be >= 1");
    if (window[a] > shape[a])
      throw std::invalid_argument("compute_positions: window exceeds volume extent on axis " +
                                  std::to_string(a));
    // steps beyond the window would leave interior voxels uncovered
    if (steps[a] > window[a])
      throw std::invalid_argument("compute_positions: step exceeds window on axis " +
                                  std::to_string(a));
    for (int64_t p = 0; p + window[a] <= shape[a]; p += steps[a]) axis[a].push_back(p);
    if (axis[a].back() + window[a] < shape[a]) axis[a].push_back(shape[a] - window[a]);
  }
  PatchGrid g;
  g.volume_shape = shape;
  g.window = window;
  g.steps = steps;
  for (int64_t h : axis[0])
    for (int64_t w : axis[1])
      for (int64_t d : axis[2]) g.positions.push_back({h, w, d});
  return g;
}

namespace detail {

template <typename T>
void check_grid_volume(const Tensor<T>& v, const PatchGrid& g) {
  const size_t off = v.ndim() == 4 ? 1 : 0;
  if (v.ndim() != 3 && v.ndim() != 4)
    throw std::invalid_argument("patch ops expect rank-3 or rank-4 data");
  for (int a = 0; a < 3; ++a)
    if (v.dim(a + off) != g.volume_shape[static_cast<size_t>(a)])
      throw std::invalid_argument("grid/volume shape mismatch: " +
                                  shape_str(v.shape()) + " vs grid " +
                                  shape_str(g.volume_shape));
}

}  // namespace detail

// Cropping is lossless: patch k is the sub-array at positions[k]. Works on
// (H,W,D) volumes and (C,H,W,D) encodings/probability maps alike.
template <typename T>
std::vector<Tensor<T>> crop_patches(const Tensor<T>& v, const PatchGrid& g) {
  detail::check_grid_volume(v, g);
  const bool chan = v.ndim() == 4;
  const int64_t C = chan ? v.dim(0) : 1;
  const auto [wh, ww, wd] = g.window;
  std::vector<Tensor<T>> out;
  out.reserve(g.positions.size());
  for (const auto& pos : g.positions) {
    Tensor<T> p(chan ? Shape{C, wh, ww, wd} : Shape{wh, ww, wd});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < wh; ++h)
        for (int64_t w = 0; w < ww; ++w)
          for (int64_t d = 0; d < wd; ++d) {
            const T val = chan ? v.at(c, pos[0] + h, pos[1] + w, pos[2] + d)
                               : v.at(pos[0] + h, pos[1] + w, pos[2] + d);
            if (chan)
              p.at(c, h, w, d) = val;
            else
              p.at(h, w, d) = val;
          }
    out.push_back(std::move(p));
  }
  return out;
}

// Reassembles per-patch maps: each output voxel is the arithmetic mean of all
// patch values covering it (plain copy where coverage is 1). Probability
// simplexes stay simplexes since means of simplex points are simplex points.
template <typename T>
Tensor<T> stitch(const std::map<size_t, Tensor<T>>& by_position, const PatchGrid& g) {
  std::vector<size_t> missing;
  for (size_t k = 0; k < g.positions.size(); ++k)
    if (!by_position.count(k)) missing.push_back(k);
  if (!missing.empty()) {
    std::string msg = "stitch: missing patches at positions";
    for (size_t k : missing) msg += " " + std::to_string(k);
    throw std::invalid_argument(msg);
  }

  const Tensor<T>& first = by_position.at(0);
  const bool chan = first.ndim() == 4;
  const int64_t C = chan ? first.dim(0) : 1;
  const auto [wh, ww, wd] = g.window;
  const Shape expect = chan ? Shape{C, wh, ww, wd} : Shape{wh, ww, wd};
  const auto [H, W, D] = std::array<int64_t, 3>{g.volume_shape[0], g.volume_shape[1],
                                                g.volume_shape[2]};

  Tensor<double> acc(chan ? Shape{C, H, W, D} : Shape{H, W, D});
  Tensor<double> cnt({H, W, D});
  for (size_t k = 0; k < g.positions.size(); ++k) {
    const Tensor<T>& p = by_position.at(k);
    if (p.shape() != expect)
      throw std::invalid_argument("stitch: patch " + std::to_string(k) +
                                  " has shape " + shape_str(p.shape()));
    const auto& pos = g.positions[k];
    for (int64_t h = 0; h < wh; ++h)
      for (int64_t w = 0; w < ww; ++w)
        for (int64_t d = 0; d < wd; ++d) {
          cnt.at(pos[0] + h, pos[1] + w, pos[2] + d) += 1.0;
          for (int64_t c = 0; c < C; ++c) {
            const double val = chan ? double(p.at(c, h, w, d)) : double(p.at(h, w, d));
            if (chan)
              acc.at(c, pos[0] + h, pos[1] + w, pos[2] + d) += val;
            else
              acc.at(pos[0] + h, pos[1] + w, pos[2] + d) += val;
          }
        }
  }
  Tensor<T> out(acc.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w)
        for (int64_t d = 0; d < D; ++d) {
          const double n = cnt.at(h, w, d);
          if (n == 0.0)
            throw std::logic_error("stitch: uncovered voxel (grid violates coverage)");
          if (chan)
            out.at(c, h, w, d) = static_cast<T>(acc.at(c, h, w, d) / n);
          else
            out.at(h, w, d) = static_cast<T>(acc.at(h, w, d) / n);
        }
  return out;
}

template <typename T>
Tensor<T> stitch(const std::vector<Tensor<T>>& patches, const PatchGrid& g) {
  std::map<size_t, Tensor<T>> by_pos;
  for (size_t k = 0; k < patches.size(); ++k) by_pos.emplace(k, patches[k]);
  if (patches.size() != g.positions.size()) {
    std::string msg = "stitch: missing patches at positions";
    for (size_t k = patches.size(); k < g.positions.size(); ++k)
      msg += " " + std::to_string(k);
    throw std::invalid_argument(msg);
  }
  return stitch(by_pos, g);
}

// Client-held reordering secret: position index <-> opaque 128-bit token.
struct Permutation {
  std::vector<std::string> token_of_position;  // hex tokens, one per grid position
  std::map<std::string, size_t> position_of_token;
  std::vector<size_t> send_order;  // positions in transmission order

  size_t position_of(const std::string& token) const {
    auto it = position_of_token.find(token);
    if (it == position_of_token.end())
      throw std::invalid_argument("unknown patch token: " + token);
    return it->second;
  }
};

inline std::string make_token(Rng& rng) {
  static const char* hex = "0123456789abcdef";
  std::string s(32, '0');
  for (int half = 0; half < 2; ++half) {
    uint64_t v = rng.u64();
    for (int i = 0; i < 16; ++i) {
      s[static_cast<size_t>(half * 16 + (15 - i))] = hex[v & 0xF];
      v >>= 4;
    }
  }
  return s;
}

// Shuffles patches into a random transmission order under fresh tokens.
// Tokens carry no positional information; order is a uniform permutation.
template <typename T>
std::pair<std::vector<std::pair<std::string, Tensor<T>>>, Permutation> shuffle_patches(
    const std::vector<Tensor<T>>& patches, uint64_t seed) {
  Rng rng(mix_seeds(seed, 0x5FF1E));
  Permutation perm;
  perm.token_of_position.resize(patches.size());
  for (size_t k = 0; k < patches.size(); ++k) {
    std::string tok = make_token(rng);
    while (perm.position_of_token.count(tok)) tok = make_token(rng);
    perm.token_of_position[k] = tok;
    perm.position_of_token.emplace(tok, k);
  }
  perm.send_order.resize(patches.size());
  for (size_t k = 0; k < patches.size(); ++k) perm.send_order[k] = k;
  rng.shuffle(perm.send_order);

  std::vector<std::pair<std::string, Tensor<T>>> wire;
  wire.reserve(patches.size());
  for (size_t k : perm.send_order)
    wire.emplace_back(perm.token_of_position[k], patches[k]);
  return {std::move(wire), std::move(perm)};
}

// Reorders results received in arbitrary order back into position order.
template <typename T>
std::vector<Tensor<T>> unshuffle(const std::map<std::string, Tensor<T>>& by_token,
                                 const Permutation& perm) {
  for (const auto& [tok, unused] : by_token) {
    (void)unused;
    perm.position_of(tok);  // throws on unknown token
  }
  std::vector<Tensor<T>> out(perm.token_of_position.size());
  std::vector<char> seen(perm.token_of_position.size(), 0);
  for (const auto& [tok, patch] : by_token) {
    const size_t k = perm.position_of(tok);
    out[k] = patch;
    seen[k] = 1;
  }
  std::string msg;
  for (size_t k = 0; k < seen.size(); ++k)
    if (!seen[k]) msg += " " + std::to_string(k);
  if (!msg.empty())
    throw std::invalid_argument("unshuffle: missing results for positions" + msg);
  return out;
}

}  // namespace privseg
