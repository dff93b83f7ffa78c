// server.hpp - stateless per-patch segmentation server.
//
// Each PatchMessage is processed independently through the segmenter; the
// response carries only the echoed token, so nothing ties a patch to a
// position or subject on the server side.
#pragma once

#include <atomic>
#include <cstring>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "privseg/nets.hpp"
#include "privseg/wire.hpp"

namespace privseg {

struct ServerConfig {
  std::string bind_host = "127.0.0.1";
  int port = 0;  // 0 picks an ephemeral port
  int concurrency_limit = 4;
  std::string model_version = "v1";
};

template <typename T>
class SegServer {
 public:
  SegServer(UNet3d<T> segmenter, ServerConfig cfg)
      : seg_(std::move(segmenter)), cfg_(cfg), sem_(std::max(1, cfg.concurrency_limit)) {}

  ~SegServer() { stop(); }

  void start() {
    listener_ = std::make_unique<TcpListener>(cfg_.bind_host, cfg_.port);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    if (listener_) listener_->close();
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

  int port() const { return listener_ ? listener_->port() : 0; }

  // Blocks the calling thread while the server runs (CLI `serve` mode).
  void wait() {
    if (accept_thread_.joinable()) accept_thread_.join();
  }

 private:
  UNet3d<T> seg_;
  ServerConfig cfg_;
  std::counting_semaphore<64> sem_;
  std::unique_ptr<TcpListener> listener_;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::vector<std::thread> workers_;

  void accept_loop() {
    while (running_) {
      std::optional<TcpStream> conn;
      try {
        conn = listener_->accept(200);
      } catch (const std::exception&) {
        break;  // listener closed
      }
      if (!conn) continue;
      sem_.acquire();
      workers_.emplace_back(
          [this, c = std::make_shared<TcpStream>(std::move(*conn))]() mutable {
            serve_connection(*c);
            sem_.release();
          });
    }
  }

  void serve_connection(TcpStream& conn) {
    try {
      while (running_) {
        auto msg = recv_message(conn, 200);
        if (!msg) continue;
        try {
          handle(conn, *msg);
        } catch (const std::exception& e) {
          Message err;
          err.type = MsgType::kError;
          err.header = {{"code", "bad_request"}, {"message", e.what()}};
          if (msg->header.contains("token")) err.header["token"] = msg->header["token"];
          send_message(conn, err);
        }
      }
    } catch (const std::exception&) {
      // connection ended; nothing to clean up, the server is stateless
    }
  }

  void handle(TcpStream& conn, const Message& msg) {
    switch (msg.type) {
      case MsgType::kHello: {
        const auto version = msg.header.value("model_version", std::string());
        if (version != cfg_.model_version) {
          Message err;
          err.type = MsgType::kError;
          err.header = {{"code", "version_mismatch"},
                        {"message", "server runs model_version " + cfg_.model_version}};
          send_message(conn, err);
          return;
        }
        Message ok;
        ok.type = MsgType::kHelloOk;
        ok.header = {{"model_version", cfg_.model_version}};
        send_message(conn, ok);
        return;
      }
      case MsgType::kPatch: {
        handle_patch(conn, msg);
        return;
      }
      default:
        throw std::runtime_error("unexpected message type " +
                                 std::to_string(int(msg.type)));
    }
  }

  void handle_patch(TcpStream& conn, const Message& msg) {
    const auto token = msg.header.at("token").get<std::string>();
    const auto dtype = msg.header.value("dtype", std::string("float32"));
    if (dtype != "float32") throw std::runtime_error("unsupported dtype " + dtype);
    const auto shape = msg.header.at("shape").get<Shape>();
    if (shape.size() != 4) throw std::runtime_error("patch shape must be rank 4");
    const int64_t numel = shape_numel(shape);
    if (msg.payload.size() != static_cast<size_t>(numel) * sizeof(float))
      throw std::runtime_error("payload length does not match shape");
    if (shape[0] != seg_.in_channels())
      throw std::runtime_error("patch has " + std::to_string(shape[0]) +
                               " channels, segmenter expects " +
                               std::to_string(seg_.in_channels()));

    Tensor<float> patch_f(shape);
    std::memcpy(patch_f.data(), msg.payload.data(), msg.payload.size());
    const Tensor<T> probs = forward_segmenter(seg_, patch_f.template cast<T>());
    const Tensor<float> probs_f = probs.template cast<float>();

    Message res;
    res.type = MsgType::kResult;
    res.header = {{"token", token},
                  {"shape", probs_f.shape()},
                  {"dtype", "float32"}};
    res.payload.resize(static_cast<size_t>(probs_f.size()) * sizeof(float));
    std::memcpy(res.payload.data(), probs_f.data(), res.payload.size());
    send_message(conn, res);
  }
};

}  // namespace privseg
