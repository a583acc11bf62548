#pragma once

// Shared-buffer activation server. One server owns a contiguous slice of the
// dataset and keeps a ring buffer of the most recently fetched batches.
// Trainers pull batches by index: inside the window they get the batch, above
// it they get `wait` while the fetcher advances, below it the server
// schedules a replay read from disk and answers `wait` until it lands.

#include "saekit/shard.hpp"
#include "saekit/wire.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

namespace saekit {

struct ServerConfig {
  std::vector<std::filesystem::path> shards;  // this server's slice, in order
  int64_t batch_size = 256;
  int64_t buffer_batches = 8;   // ring capacity B
  std::string host = "127.0.0.1";
  uint16_t port = 0;            // 0 = ephemeral
  int64_t replay_cache_batches = 4;
  int io_max_retries = 5;
};

// Protocol state machine, free of socket concerns so it can be tested
// directly. Thread-safe; the fetch work normally runs on a dedicated thread
// (BatchServer) but can be driven manually with fetch_pending_once().
class ServerCore {
 public:
  explicit ServerCore(const ServerConfig& cfg);

  BatchReply handle_request(const BatchRequest& req);

  // Performs one unit of pending fetch work (a replay read or one window
  // advance). Returns false when there is nothing to do right now.
  bool fetch_pending_once();

  // Blocks until fetch work may exist or stop() is called.
  void wait_for_work();
  void stop_waiting();

  uint64_t num_batches() const { return num_batches_; }
  uint64_t batch_bytes() const { return batch_bytes_; }
  // Current buffered bytes (ring + replay cache); accounting for tests.
  uint64_t buffered_bytes() const;
  int64_t window_low() const;
  int64_t window_high() const;

 private:
  MatF read_batch_from_disk(uint64_t index);

  ServerConfig cfg_;
  ShardRowAccessor accessor_;
  uint64_t num_batches_ = 0;
  uint64_t batch_bytes_ = 0;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> ring_;        // payloads for [low_, low_ + ring_.size())
  int64_t low_ = 0;                     // index of ring_.front(); window empty if size 0
  uint64_t max_requested_ = 0;          // demand watermark, one past the highest index asked for
  std::deque<uint64_t> replay_queue_;
  std::map<uint64_t, std::string> replay_cache_;  // FIFO-bounded
  std::deque<uint64_t> replay_order_;
  bool stopping_ = false;
};

class BatchServer {
 public:
  explicit BatchServer(ServerConfig cfg);
  ~BatchServer();

  void start();
  void stop();
  uint16_t port() const { return port_; }
  ServerCore& core() { return core_; }

 private:
  void accept_loop();
  void serve_connection(Socket sock);
  void fetch_loop();

  ServerConfig cfg_;
  ServerCore core_;
  Listener listener_;
  uint16_t port_ = 0;
  std::thread accept_thread_;
  std::thread fetch_thread_;
  std::vector<std::thread> conn_threads_;
  std::mutex conn_mu_;
  std::vector<int> live_fds_;
  std::atomic<bool> stopping_{false};
  bool started_ = false;
};

}  // namespace saekit
