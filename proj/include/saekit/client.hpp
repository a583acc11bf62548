#pragma once

// Trainer-side client for activation servers. Each client tracks the batch
// indices it has consumed; `wait` replies are retried after a short sleep.
// With several servers the batch stream interleaves slices round-robin by
// server rank.

#include "saekit/trainer.hpp"
#include "saekit/wire.hpp"

#include <optional>
#include <vector>

namespace saekit {

struct ServerAddress {
  std::string host;
  uint16_t port = 0;
};

// "host:port[,host:port...]"
std::vector<ServerAddress> parse_server_list(const std::string& spec);

class BatchClient {
 public:
  BatchClient(const ServerAddress& addr, uint64_t trainer_id, int wait_sleep_ms = 2);

  // Blocks through wait replies. Returns false once the slice is exhausted.
  bool fetch(uint64_t index, BatchReply& out);
  bool ping();

 private:
  Socket sock_;
  uint64_t trainer_id_;
  int wait_sleep_ms_;
};

class RemoteBatchSource final : public BatchSource {
 public:
  RemoteBatchSource(const std::vector<ServerAddress>& servers, uint64_t trainer_id,
                    double norm_c);

  bool next(MatF& x, MatF& target) override;
  void reset() override;
  Eigen::Index dim() const override;

 private:
  bool fetch_into(size_t rank, MatF& x);

  std::vector<BatchClient> clients_;
  std::vector<uint64_t> next_index_;
  std::vector<bool> exhausted_;
  size_t rr_ = 0;  // next server rank in the round-robin
  float inv_c_;
  mutable std::optional<MatF> stash_;  // prefetched batch backing dim()
  mutable Eigen::Index dim_ = 0;
};

}  // namespace saekit
