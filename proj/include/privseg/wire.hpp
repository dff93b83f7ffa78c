// wire.hpp - length-prefixed binary message framing over TCP.
//
// Frame layout: [length u32 BE] [type u8] [JSON header] '\n' [payload].
// The length covers everything after the prefix. Headers are one-line JSON;
// payloads are raw little-endian float32.
#pragma once

#include <json.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace privseg {

enum class MsgType : uint8_t {
  kHello = 1,
  kHelloOk = 2,
  kPatch = 3,
  kResult = 4,
  kError = 5,
};

struct Message {
  MsgType type = MsgType::kError;
  nlohmann::json header;
  std::vector<uint8_t> payload;
};

constexpr size_t kMaxFrameBytes = size_t(1) << 28;  // 256 MiB

inline std::vector<uint8_t> encode_message(const Message& m) {
  const std::string header = m.header.dump();
  const size_t body = 1 + header.size() + 1 + m.payload.size();
  if (body > kMaxFrameBytes) throw std::runtime_error("encode_message: frame too large");
  std::vector<uint8_t> out;
  out.reserve(4 + body);
  const auto len = static_cast<uint32_t>(body);
  out.push_back(static_cast<uint8_t>(len >> 24));
  out.push_back(static_cast<uint8_t>(len >> 16));
  out.push_back(static_cast<uint8_t>(len >> 8));
  out.push_back(static_cast<uint8_t>(len));
  out.push_back(static_cast<uint8_t>(m.type));
  out.insert(out.end(), header.begin(), header.end());
  out.push_back('\n');
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

inline Message decode_body(const uint8_t* data, size_t n) {
  if (n < 2) throw std::runtime_error("decode_body: truncated frame");
  Message m;
  m.type = static_cast<MsgType>(data[0]);
  const uint8_t* nl = static_cast<const uint8_t*>(std::memchr(data + 1, '\n', n - 1));
  if (!nl) throw std::runtime_error("decode_body: missing header terminator");
  m.header = nlohmann::json::parse(data + 1, nl);
  m.payload.assign(nl + 1, data + n);
  return m;
}

// Minimal RAII TCP stream with deadline-aware reads.
class TcpStream {
 public:
  TcpStream() = default;
  explicit TcpStream(int fd) : fd_(fd) {}
  TcpStream(TcpStream&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  TcpStream& operator=(TcpStream&& o) noexcept {
    if (this != &o) {
      close_fd();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;
  ~TcpStream() { close_fd(); }

  static TcpStream connect(const std::string& host, int port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw std::runtime_error("invalid server address: " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
    }
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
  }

  bool valid() const { return fd_ >= 0; }

  void send_all(const uint8_t* p, size_t n) {
    while (n > 0) {
      const ssize_t w = ::send(fd_, p, n, MSG_NOSIGNAL);
      if (w <= 0) throw std::runtime_error("send failed");
      p += w;
      n -= static_cast<size_t>(w);
    }
  }

  // Reads exactly n bytes; returns false when the deadline passes first.
  // timeout_ms < 0 blocks indefinitely. Throws on closed/failed connection.
  bool recv_exact(uint8_t* p, size_t n, int timeout_ms) {
    while (n > 0) {
      if (timeout_ms >= 0) {
        pollfd pf{fd_, POLLIN, 0};
        const int pr = ::poll(&pf, 1, timeout_ms);
        if (pr == 0) return false;
        if (pr < 0) throw std::runtime_error("poll failed");
      }
      const ssize_t r = ::recv(fd_, p, n, 0);
      if (r == 0) throw std::runtime_error("connection closed by peer");
      if (r < 0) throw std::runtime_error("recv failed");
      p += r;
      n -= static_cast<size_t>(r);
    }
    return true;
  }

 private:
  int fd_ = -1;
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
};

// Sends a frame, mirroring the exact bytes into an optional capture sink.
inline void send_message(TcpStream& s, const Message& m,
                         std::vector<uint8_t>* capture = nullptr) {
  const auto bytes = encode_message(m);
  if (capture) capture->insert(capture->end(), bytes.begin(), bytes.end());
  s.send_all(bytes.data(), bytes.size());
}

// Reads one frame. nullopt on timeout. Throws on protocol violations.
inline std::optional<Message> recv_message(TcpStream& s, int timeout_ms = -1) {
  uint8_t lenbuf[4];
  if (!s.recv_exact(lenbuf, 4, timeout_ms)) return std::nullopt;
  const uint32_t len = (uint32_t(lenbuf[0]) << 24) | (uint32_t(lenbuf[1]) << 16) |
                       (uint32_t(lenbuf[2]) << 8) | uint32_t(lenbuf[3]);
  if (len == 0 || len > kMaxFrameBytes)
    throw std::runtime_error("frame length out of bounds: " + std::to_string(len));
  std::vector<uint8_t> body(len);
  // after the prefix arrives, the body must follow promptly on any healthy
  // connection; keep the same deadline per read
  if (!s.recv_exact(body.data(), body.size(), timeout_ms < 0 ? -1 : std::max(timeout_ms, 1000)))
    throw std::runtime_error("frame body timed out");
  return decode_body(body.data(), body.size());
}

class TcpListener {
 public:
  TcpListener(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw std::runtime_error("socket() failed");
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw std::runtime_error("invalid bind address: " + host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(fd_, 16) != 0) {
      ::close(fd_);
      throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    }
    socklen_t alen = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() { close(); }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  int port() const { return port_; }

  // Accepts one connection; nullopt when the poll deadline passes.
  std::optional<TcpStream> accept(int timeout_ms) {
    pollfd pf{fd_, POLLIN, 0};
    const int pr = ::poll(&pf, 1, timeout_ms);
    if (pr == 0) return std::nullopt;
    if (pr < 0) throw std::runtime_error("poll failed");
    const int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) throw std::runtime_error("accept failed");
    return TcpStream(cfd);
  }

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

}  // namespace privseg
