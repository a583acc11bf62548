#include "saekit/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace saekit {

// ----------------------------- framing -----------------------------

std::string encode_request_body(const BatchRequest& req) {
  std::string body;
  put_u8(body, static_cast<uint8_t>(MessageKind::request));
  put_u64(body, req.trainer_id);
  put_u64(body, req.next_index);
  return body;
}

std::string encode_reply_body(const BatchReply& reply) {
  std::string body;
  put_u8(body, static_cast<uint8_t>(reply.kind));
  put_u64(body, reply.index);
  put_u32(body, reply.rows);
  put_u32(body, reply.n);
  body += reply.payload;
  return body;
}

std::string encode_ping_body() {
  std::string body;
  put_u8(body, static_cast<uint8_t>(MessageKind::ping));
  return body;
}

std::string encode_pong_body() {
  std::string body;
  put_u8(body, static_cast<uint8_t>(MessageKind::pong));
  return body;
}

std::string frame(const std::string& body) {
  std::string out;
  put_u32(out, static_cast<uint32_t>(body.size()));
  out += body;
  return out;
}

MessageKind peek_kind(const std::string& body) {
  if (body.empty()) throw ProtocolError("empty frame body");
  const uint8_t k = static_cast<uint8_t>(body[0]);
  if (k < 1 || k > 6) throw ProtocolError("unknown message kind " + std::to_string(k));
  return static_cast<MessageKind>(k);
}

BatchRequest parse_request_body(const std::string& body) {
  if (peek_kind(body) != MessageKind::request) throw ProtocolError("expected request frame");
  if (body.size() != 17) {
    throw ProtocolError("request frame has wrong length " + std::to_string(body.size()));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(body.data());
  return BatchRequest{get_u64(p + 1), get_u64(p + 9)};
}

BatchReply parse_reply_body(const std::string& body) {
  MessageKind kind = peek_kind(body);
  if (kind != MessageKind::batch && kind != MessageKind::wait &&
      kind != MessageKind::end_of_data) {
    throw ProtocolError("expected reply frame");
  }
  if (body.size() < 17) throw ProtocolError("reply frame too short");
  const auto* p = reinterpret_cast<const unsigned char*>(body.data());
  BatchReply reply;
  reply.kind = kind;
  reply.index = get_u64(p + 1);
  reply.rows = get_u32(p + 9);
  reply.n = get_u32(p + 13);
  const uint64_t want = static_cast<uint64_t>(reply.rows) * reply.n * 4;
  if (body.size() - 17 != want) {
    throw ProtocolError("reply payload length mismatch: have " +
                        std::to_string(body.size() - 17) + ", want " + std::to_string(want));
  }
  reply.payload = body.substr(17);
  return reply;
}

// ----------------------------- sockets -----------------------------

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::send_all(const void* data, size_t len) {
  const char* p = static_cast<const char*>(data);
  while (len > 0) {
    ssize_t sent = ::send(fd_, p, len, MSG_NOSIGNAL);
    if (sent < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("send failed: ") + std::strerror(errno));
    }
    p += sent;
    len -= static_cast<size_t>(sent);
  }
}

bool Socket::recv_all(void* data, size_t len) {
  char* p = static_cast<char*>(data);
  size_t got = 0;
  while (got < len) {
    ssize_t r = ::recv(fd_, p + got, len - got, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("recv failed: ") + std::strerror(errno));
    }
    if (r == 0) {
      if (got == 0) return false;
      throw ProtocolError("connection closed mid-frame");
    }
    got += static_cast<size_t>(r);
  }
  return true;
}

void Socket::send_frame(const std::string& body) {
  std::string f = frame(body);
  send_all(f.data(), f.size());
}

bool Socket::recv_frame(std::string& body) {
  unsigned char len_bytes[4];
  if (!recv_all(len_bytes, 4)) return false;
  const uint32_t len = get_u32(len_bytes);
  if (len == 0 || len > kMaxFrameBytes) {
    throw ProtocolError("bad frame length " + std::to_string(len));
  }
  body.resize(len);
  if (!recv_all(body.data(), len)) throw ProtocolError("connection closed mid-frame");
  return true;
}

Socket connect_tcp(const std::string& host, uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res);
  if (rc != 0) {
    throw IoError("cannot resolve " + host + ": " + gai_strerror(rc));
  }
  int fd = -1;
  std::string err = "connect failed";
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    err = std::string("connect to ") + host + ":" + service + " failed: " + std::strerror(errno);
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw IoError(err);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return Socket(fd);
}

Listener::Listener(Listener&& other) noexcept : fd_(other.fd_), port_(other.port_) {
  other.fd_ = -1;
}

Listener& Listener::operator=(Listener&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    port_ = other.port_;
    other.fd_ = -1;
  }
  return *this;
}

void Listener::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

Socket Listener::accept_connection() {
  while (true) {
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd >= 0) {
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return Socket(fd);
    }
    if (errno == EINTR) continue;
    return Socket();  // listener closed
  }
}

Listener listen_tcp(const std::string& host, uint16_t port) {
  Listener listener;
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw IoError(std::string("socket failed: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (host == "0.0.0.0" || host.empty()) {
    addr.sin_addr.s_addr = INADDR_ANY;
  } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw ConfigError("listen address must be an IPv4 literal, got '" + host + "'");
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    std::string err = std::strerror(errno);
    ::close(fd);
    throw IoError("bind to " + host + ":" + std::to_string(port) + " failed: " + err);
  }
  if (::listen(fd, 64) != 0) {
    std::string err = std::strerror(errno);
    ::close(fd);
    throw IoError("listen failed: " + err);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
  listener.fd_ = fd;
  listener.port_ = ntohs(bound.sin_port);
  return listener;
}

}  // namespace saekit
