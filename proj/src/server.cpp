#include "saekit/server.hpp"

#include <sys/socket.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <iostream>

namespace saekit {

ServerCore::ServerCore(const ServerConfig& cfg) : cfg_(cfg), accessor_(cfg.shards) {
  if (cfg_.batch_size < 1) throw ConfigError("server: batch_size must be >= 1");
  if (cfg_.buffer_batches < 1) throw ConfigError("server: buffer_batches must be >= 1");
  num_batches_ = accessor_.total_rows() / static_cast<uint64_t>(cfg_.batch_size);
  if (num_batches_ == 0) {
    throw ConfigError("server: slice holds fewer rows than one batch");
  }
  batch_bytes_ = static_cast<uint64_t>(cfg_.batch_size) * accessor_.dim() * 4ull;
}

MatF ServerCore::read_batch_from_disk(uint64_t index) {
  const uint64_t start = index * static_cast<uint64_t>(cfg_.batch_size);
  int attempt = 0;
  while (true) {
    try {
      return accessor_.read_rows(start, static_cast<uint64_t>(cfg_.batch_size));
    } catch (const IoError&) {
      if (++attempt >= cfg_.io_max_retries) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(10 << attempt));
    }
  }
}

BatchReply ServerCore::handle_request(const BatchRequest& req) {
  std::unique_lock<std::mutex> lock(mu_);
  BatchReply reply;
  reply.index = req.next_index;
  if (req.next_index >= num_batches_) {
    reply.kind = MessageKind::end_of_data;
    return reply;
  }
  const int64_t idx = static_cast<int64_t>(req.next_index);
  const int64_t high = low_ + static_cast<int64_t>(ring_.size()) - 1;
  if (!ring_.empty() && idx >= low_ && idx <= high) {
    reply.kind = MessageKind::batch;
    reply.rows = static_cast<uint32_t>(cfg_.batch_size);
    reply.n = accessor_.dim();
    reply.payload = ring_[static_cast<size_t>(idx - low_)];
    return reply;
  }
  if (auto it = replay_cache_.find(req.next_index); it != replay_cache_.end()) {
    reply.kind = MessageKind::batch;
    reply.rows = static_cast<uint32_t>(cfg_.batch_size);
    reply.n = accessor_.dim();
    reply.payload = it->second;
    return reply;
  }
  if (idx > high) {
    max_requested_ = std::max(max_requested_, req.next_index + 1);
  } else {
    // laggard: schedule a replay read of that region
    if (std::find(replay_queue_.begin(), replay_queue_.end(), req.next_index) ==
        replay_queue_.end()) {
      replay_queue_.push_back(req.next_index);
    }
  }
  reply.kind = MessageKind::wait;
  cv_.notify_all();
  return reply;
}

bool ServerCore::fetch_pending_once() {
  uint64_t replay_index = 0;
  bool do_replay = false;
  uint64_t advance_index = 0;
  bool do_advance = false;
  {
    std::unique_lock<std::mutex> lock(mu_);
    if (!replay_queue_.empty()) {
      replay_index = replay_queue_.front();
      replay_queue_.pop_front();
      do_replay = true;
    } else {
      const int64_t high = low_ + static_cast<int64_t>(ring_.size()) - 1;
      const uint64_t next = static_cast<uint64_t>(high + 1);
      const bool demand = ring_.size() < static_cast<size_t>(cfg_.buffer_batches) ||
                          max_requested_ > next;
      if (next < num_batches_ && demand) {
        advance_index = next;
        do_advance = true;
      }
    }
  }
  if (do_replay) {
    MatF batch = read_batch_from_disk(replay_index);
    std::string payload(reinterpret_cast<const char*>(batch.data()),
                        sizeof(float) * batch.size());
    std::unique_lock<std::mutex> lock(mu_);
    if (replay_cache_.emplace(replay_index, std::move(payload)).second) {
      replay_order_.push_back(replay_index);
      while (replay_order_.size() > static_cast<size_t>(cfg_.replay_cache_batches)) {
        replay_cache_.erase(replay_order_.front());
        replay_order_.pop_front();
      }
    }
    return true;
  }
  if (do_advance) {
    MatF batch = read_batch_from_disk(advance_index);
    std::string payload(reinterpret_cast<const char*>(batch.data()),
                        sizeof(float) * batch.size());
    std::unique_lock<std::mutex> lock(mu_);
    ring_.push_back(std::move(payload));
    if (ring_.size() > static_cast<size_t>(cfg_.buffer_batches)) {
      ring_.pop_front();  // evict the oldest batch
      ++low_;
    }
    return true;
  }
  return false;
}

void ServerCore::wait_for_work() {
  std::unique_lock<std::mutex> lock(mu_);
  cv_.wait(lock, [&] {
    if (stopping_) return true;
    if (!replay_queue_.empty()) return true;
    const int64_t high = low_ + static_cast<int64_t>(ring_.size()) - 1;
    const uint64_t next = static_cast<uint64_t>(high + 1);
    return next < num_batches_ && (ring_.size() < static_cast<size_t>(cfg_.buffer_batches) ||
                                   max_requested_ > next);
  });
}

void ServerCore::stop_waiting() {
  std::unique_lock<std::mutex> lock(mu_);
  stopping_ = true;
  cv_.notify_all();
}

uint64_t ServerCore::buffered_bytes() const {
  std::unique_lock<std::mutex> lock(mu_);
  uint64_t total = 0;
  for (const auto& p : ring_) total += p.size();
  for (const auto& [k, v] : replay_cache_) total += v.size();
  return total;
}

int64_t ServerCore::window_low() const {
  std::unique_lock<std::mutex> lock(mu_);
  return low_;
}

int64_t ServerCore::window_high() const {
  std::unique_lock<std::mutex> lock(mu_);
  return low_ + static_cast<int64_t>(ring_.size()) - 1;
}

// ----------------------------- socket front-end -----------------------------

BatchServer::BatchServer(ServerConfig cfg) : cfg_(std::move(cfg)), core_(cfg_) {}

BatchServer::~BatchServer() { stop(); }

void BatchServer::start() {
  listener_ = listen_tcp(cfg_.host, cfg_.port);
  port_ = listener_.port();
  accept_thread_ = std::thread([this] { accept_loop(); });
  fetch_thread_ = std::thread([this] { fetch_loop(); });
  started_ = true;
}

void BatchServer::stop() {
  if (!started_) return;
  stopping_ = true;
  core_.stop_waiting();
  listener_.close();
  {
    std::lock_guard<std::mutex> lock(conn_mu_);
    for (int fd : live_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  if (fetch_thread_.joinable()) fetch_thread_.join();
  for (auto& t : conn_threads_) {
    if (t.joinable()) t.join();
  }
  started_ = false;
}

void BatchServer::accept_loop() {
  while (!stopping_) {
    Socket sock = listener_.accept_connection();
    if (!sock.valid()) break;
    {
      std::lock_guard<std::mutex> lock(conn_mu_);
      live_fds_.push_back(sock.fd());
      conn_threads_.emplace_back(
          [this, s = std::move(sock)]() mutable { serve_connection(std::move(s)); });
    }
  }
}

void BatchServer::serve_connection(Socket sock) {
  const int fd = sock.fd();
  try {
    std::string body;
    while (!stopping_ && sock.recv_frame(body)) {
      MessageKind kind = peek_kind(body);
      if (kind == MessageKind::ping) {
        sock.send_frame(encode_pong_body());
        continue;
      }
      BatchRequest req = parse_request_body(body);
      BatchReply reply = core_.handle_request(req);
      sock.send_frame(encode_reply_body(reply));
    }
  } catch (const ProtocolError& e) {
    std::cerr << "server: protocol error, closing connection: " << e.what() << "\n";
  } catch (const std::exception&) {
    // peer went away mid-conversation; nothing to do
  }
  std::lock_guard<std::mutex> lock(conn_mu_);
  live_fds_.erase(std::remove(live_fds_.begin(), live_fds_.end(), fd), live_fds_.end());
}

void BatchServer::fetch_loop() {
  try {
    while (!stopping_) {
      if (!core_.fetch_pending_once()) {
        if (stopping_) break;
        core_.wait_for_work();
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "server: fetcher failed: " << e.what() << "\n";
  }
}

}  // namespace saekit
