#pragma once

// Thin POSIX TCP wrappers plus a framed connection.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <utility>

#include "fedhar/errors.hpp"
#include "fedhar/wire/frame.hpp"

namespace fedhar::wire {

inline std::string errno_text() { return std::strerror(errno); }

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }

  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  void shutdown_write() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
  }

  void send_all(std::span<const std::uint8_t> data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError("send failed: " + errno_text());
      }
      off += static_cast<std::size_t>(n);
    }
  }

  /// Waits up to `timeout` (negative = forever) for readability.
  bool wait_readable(std::chrono::milliseconds timeout) const {
    pollfd p{fd_, POLLIN, 0};
    for (;;) {
      const int rc = ::poll(&p, 1, timeout.count() < 0 ? -1 : static_cast<int>(std::min<std::int64_t>(
                                                                   timeout.count(), 1 << 30)));
      if (rc < 0 && errno == EINTR) continue;
      if (rc < 0) throw IoError("poll failed: " + errno_text());
      return rc > 0;
    }
  }

  /// Reads what is available; 0 means the peer closed.
  std::size_t recv_some(std::span<std::uint8_t> buf) {
    for (;;) {
      const ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw IoError("recv failed: " + errno_text());
      return static_cast<std::size_t>(n);
    }
  }

 private:
  int fd_ = -1;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 8099;
};

/// Parses "host:port" or "host" (default port).
inline Endpoint parse_endpoint(const std::string& s, std::uint16_t default_port = 8099) {
  Endpoint e;
  e.port = default_port;
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) {
    e.host = s;
  } else {
    e.host = s.substr(0, colon);
    const std::string port = s.substr(colon + 1);
    char* end = nullptr;
    const long v = std::strtol(port.c_str(), &end, 10);
    if (port.empty() || *end != '\0' || v < 0 || v > 65535) throw ConfigError("bad port in address " + s);
    e.port = static_cast<std::uint16_t>(v);
  }
  if (e.host.empty()) e.host = "127.0.0.1";
  return e;
}

class Listener {
 public:
  explicit Listener(const Endpoint& at, int backlog = 64) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(at.port);
    if (int rc = ::getaddrinfo(at.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
      throw IoError("cannot resolve " + at.host + ": " + ::gai_strerror(rc));
    }
    std::string last_error = "no usable address";
    for (auto* ai = res; ai; ai = ai->ai_next) {
      Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
      if (!s.valid()) continue;
      int one = 1;
      ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(s.fd(), backlog) == 0) {
        sock_ = std::move(s);
        break;
      }
      last_error = errno_text();
    }
    ::freeaddrinfo(res);
    if (!sock_.valid()) throw IoError("cannot bind " + at.host + ":" + port + ": " + last_error);
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                              : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  }

  std::uint16_t port() const noexcept { return port_; }

  /// nullopt on timeout.
  std::optional<Socket> accept(std::chrono::milliseconds timeout) {
    if (!sock_.wait_readable(timeout)) return std::nullopt;
    const int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd < 0) throw IoError("accept failed: " + errno_text());
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return Socket(fd);
  }

 private:
  Socket sock_;
  std::uint16_t port_ = 0;
};

inline Socket connect_to(const Endpoint& to) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(to.port);
  if (int rc = ::getaddrinfo(to.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw IoError("cannot resolve " + to.host + ": " + ::gai_strerror(rc));
  }
  std::string last_error = "no usable address";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) continue;
    if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return s;
    }
    last_error = errno_text();
  }
  ::freeaddrinfo(res);
  throw IoError("cannot connect to " + to.host + ":" + port + ": " + last_error);
}

/// A socket with frame decoding on the receive side.
class Connection {
 public:
  explicit Connection(Socket s) : sock_(std::move(s)) {}

  void send(MsgType type, std::span<const std::uint8_t> payload) { sock_.send_all(frame_encode(type, payload)); }

  /// Next frame, waiting at most `timeout` (negative = forever). Throws
  /// TimeoutError on expiry and IoError/DecodeError when the peer goes away.
  Frame receive(std::chrono::milliseconds timeout = std::chrono::milliseconds(-1)) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::uint8_t buf[1 << 16];
    for (;;) {
      if (auto f = decoder_.next()) return std::move(*f);
      auto left = std::chrono::milliseconds(-1);
      if (timeout.count() >= 0) {
        left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0 || !sock_.wait_readable(left)) throw TimeoutError("no message within deadline");
      }
      const std::size_t n = sock_.recv_some(buf);
      if (n == 0) {
        decoder_.finish();
        throw IoError("connection closed by peer");
      }
      decoder_.feed(std::span<const std::uint8_t>(buf, n));
    }
  }

  /// True when bytes are already waiting (buffered or on the socket).
  bool has_pending() {
    if (decoder_.buffered() > 0) return true;
    return sock_.wait_readable(std::chrono::milliseconds(0));
  }

  void close() noexcept { sock_.close(); }
  Socket& socket() noexcept { return sock_; }

 private:
  Socket sock_;
  FrameDecoder decoder_;
};

}  // namespace fedhar::wire
