// client.hpp - client-side encode/shuffle/send pipeline and its local twin.
//
// The permutation mapping tokens to positions never leaves this process;
// the server sees opaque tokens over constant-shape patches only.
#pragma once

#include <cstring>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "privseg/nets.hpp"
#include "privseg/patchwork.hpp"
#include "privseg/volume.hpp"
#include "privseg/wire.hpp"

namespace privseg {

struct ClientConfig {
  std::string host = "127.0.0.1";
  int port = 0;
  std::array<int64_t, 3> window{16, 16, 16};
  std::array<int64_t, 3> steps{16, 16, 16};
  uint64_t shuffle_seed = 1;
  int max_retries = 3;       // resend rounds for unanswered patches
  int timeout_ms = 2000;     // wait per collection round
  std::string model_version = "v1";
  // test seam: when set, a received result for which this returns true is
  // discarded as if the response had been lost in transit
  std::function<bool(const std::string& token)> drop_result;
};

template <typename T>
struct SegmentOutcome {
  Tensor<T> softmax;       // (K,H,W,D)
  Tensor<uint8_t> labels;  // argmax (H,W,D)
};

namespace clientd {

template <typename T>
Tensor<uint8_t> argmax_channels(const Tensor<T>& probs) {
  const int64_t K = probs.dim(0), nvox = probs.size() / K;
  Tensor<uint8_t> out({probs.dim(1), probs.dim(2), probs.dim(3)});
  for (int64_t v = 0; v < nvox; ++v) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (probs[k * nvox + v] > probs[best * nvox + v]) best = k;
    out[v] = static_cast<uint8_t>(best);
  }
  return out;
}

// Serialization boundary both pipelines share: patches travel as float32, so
// the local twin casts through float32 too and stays bit-identical.
template <typename T>
Tensor<T> through_float32(const Tensor<T>& t) {
  return t.template cast<float>().template cast<T>();
}

}  // namespace clientd

// Local pipeline: encode -> crop -> per-patch segmentation -> stitch.
template <typename T>
SegmentOutcome<T> local_segment(const UNet3d<T>& encoder, const UNet3d<T>& segmenter,
                                const Volume& vol, std::array<int64_t, 3> window,
                                std::array<int64_t, 3> steps) {
  const Tensor<T> enc = forward_encoder(encoder, vol.voxels.template cast<T>());
  const auto grid = compute_positions(vol.voxels.shape(), window, steps);
  const auto patches = crop_patches(enc, grid);
  std::vector<Tensor<T>> outs;
  outs.reserve(patches.size());
  for (const auto& p : patches)
    outs.push_back(clientd::through_float32(
        forward_segmenter(segmenter, clientd::through_float32(p))));
  SegmentOutcome<T> res;
  res.softmax = stitch(outs, grid);
  res.labels = clientd::argmax_channels(res.softmax);
  return res;
}

// Remote pipeline: encode -> crop -> shuffle -> send tokens -> collect by
// token in any order -> unshuffle -> stitch. Unanswered patches are resent up
// to max_retries rounds, then reported by token.
template <typename T>
SegmentOutcome<T> client_segment(const UNet3d<T>& encoder, const Volume& vol,
                                 const ClientConfig& cfg,
                                 std::vector<uint8_t>* wire_capture = nullptr) {
  const Tensor<T> enc = forward_encoder(encoder, vol.voxels.template cast<T>());
  const auto grid = compute_positions(vol.voxels.shape(), cfg.window, cfg.steps);
  const auto patches = crop_patches(enc, grid);
  auto [wire_order, perm] = shuffle_patches(patches, cfg.shuffle_seed);

  TcpStream conn = TcpStream::connect(cfg.host, cfg.port);
  {
    Message hello;
    hello.type = MsgType::kHello;
    hello.header = {{"model_version", cfg.model_version}};
    send_message(conn, hello, wire_capture);
    auto reply = recv_message(conn, cfg.timeout_ms);
    if (!reply) throw std::runtime_error("server did not answer HELLO");
    if (reply->type == MsgType::kError)
      throw std::runtime_error("server refused session: " +
                               reply->header.value("message", std::string("unknown")));
    if (reply->type != MsgType::kHelloOk ||
        reply->header.value("model_version", std::string()) != cfg.model_version)
      throw std::runtime_error("model version mismatch with server");
  }

  auto send_patch = [&](const std::string& token, const Tensor<T>& patch) {
    const Tensor<float> pf = patch.template cast<float>();
    Message m;
    m.type = MsgType::kPatch;
    m.header = {{"token", token}, {"dtype", "float32"}, {"shape", pf.shape()}};
    m.payload.resize(static_cast<size_t>(pf.size()) * sizeof(float));
    std::memcpy(m.payload.data(), pf.data(), m.payload.size());
    send_message(conn, m, wire_capture);
  };

  std::map<std::string, Tensor<T>> results;  // keyed by token
  auto outstanding = [&]() {
    std::vector<std::string> missing;
    for (const auto& [token, patch] : wire_order) {
      (void)patch;
      if (!results.count(token)) missing.push_back(token);
    }
    return missing;
  };

  for (const auto& [token, patch] : wire_order) send_patch(token, patch);

  for (int round = 0; round <= cfg.max_retries; ++round) {
    while (results.size() < wire_order.size()) {
      auto msg = recv_message(conn, cfg.timeout_ms);
      if (!msg) break;  // round timed out; resend what is missing
      if (msg->type == MsgType::kError)
        throw std::runtime_error("server error: " +
                                 msg->header.value("message", std::string("unknown")));
      if (msg->type != MsgType::kResult) continue;
      const auto token = msg->header.at("token").get<std::string>();
      if (cfg.drop_result && cfg.drop_result(token)) continue;  // injected loss
      if (results.count(token)) continue;                       // duplicate resend
      const auto shape = msg->header.at("shape").get<Shape>();
      if (msg->payload.size() != static_cast<size_t>(shape_numel(shape)) * sizeof(float))
        throw std::runtime_error("result payload size mismatch for token " + token);
      Tensor<float> pf(shape);
      std::memcpy(pf.data(), msg->payload.data(), msg->payload.size());
      results.emplace(token, pf.template cast<T>());
    }
    const auto missing = outstanding();
    if (missing.empty()) break;
    if (round == cfg.max_retries) {
      std::string msg = "segmentation incomplete after retries; missing tokens:";
      for (const auto& t : missing) msg += " " + t;
      throw std::runtime_error(msg);
    }
    for (const auto& token : missing) {
      const size_t pos = perm.position_of(token);
      send_patch(token, patches[pos]);
    }
  }

  std::vector<Tensor<T>> ordered = unshuffle(results, perm);
  SegmentOutcome<T> res;
  res.softmax = stitch(ordered, grid);
  res.labels = clientd::argmax_channels(res.softmax);
  return res;
}

}  // namespace privseg
