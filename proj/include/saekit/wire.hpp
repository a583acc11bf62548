#pragma once

// Wire contract between activation servers and trainer clients. Every frame
// is a 4-byte little-endian body length followed by the body: one message
// kind byte, fixed-width little-endian fields, then the payload. Byte-exact.
//
//   request: kind=1, trainer_id u64, next_index u64
//   batch:   kind=2, index u64, rows u32, n u32, payload rows*n*4 bytes
//   wait:    kind=3, index u64, rows=0, n=0
//   end:     kind=4, index u64, rows=0, n=0
//   ping:    kind=5          pong: kind=6

#include "saekit/common.hpp"

#include <string>

namespace saekit {

struct ProtocolError : IoError {
  using IoError::IoError;
};

enum class MessageKind : uint8_t {
  request = 1,
  batch = 2,
  wait = 3,
  end_of_data = 4,
  ping = 5,
  pong = 6,
};

struct BatchRequest {
  uint64_t trainer_id = 0;
  uint64_t next_index = 0;
};

struct BatchReply {
  MessageKind kind = MessageKind::wait;
  uint64_t index = 0;
  uint32_t rows = 0;
  uint32_t n = 0;
  std::string payload;  // rows*n little-endian float32, batch replies only
};

inline constexpr uint32_t kMaxFrameBytes = 256u << 20;

// Frame bodies (kind byte + fields), without the length prefix.
std::string encode_request_body(const BatchRequest& req);
std::string encode_reply_body(const BatchReply& reply);
std::string encode_ping_body();
std::string encode_pong_body();

// Full frames (length prefix + body).
std::string frame(const std::string& body);

BatchRequest parse_request_body(const std::string& body);
BatchReply parse_reply_body(const std::string& body);
MessageKind peek_kind(const std::string& body);

// ----------------------------- sockets -----------------------------

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  void close();
  void shutdown();  // unblocks a peer thread sitting in recv

  void send_all(const void* data, size_t len);
  // Returns false on orderly EOF before any byte; throws on partial reads.
  bool recv_all(void* data, size_t len);

  void send_frame(const std::string& body);
  // Returns false on orderly EOF at a frame boundary.
  bool recv_frame(std::string& body);

 private:
  int fd_ = -1;
};

Socket connect_tcp(const std::string& host, uint16_t port);

class Listener {
 public:
  Listener() = default;
  ~Listener() { close(); }
  Listener(Listener&&) noexcept;
  Listener& operator=(Listener&&) noexcept;
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  uint16_t port() const { return port_; }
  // Blocks; returns an invalid socket when the listener has been closed.
  Socket accept_connection();
  void close();
  bool valid() const { return fd_ >= 0; }

  friend Listener listen_tcp(const std::string& host, uint16_t port);

 private:
  int fd_ = -1;
  uint16_t port_ = 0;
};

// port 0 binds an ephemeral port; the bound port is available via port().
Listener listen_tcp(const std::string& host, uint16_t port);

}  // namespace saekit
