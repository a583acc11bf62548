#include "saekit/client.hpp"

#include <chrono>
#include <cstring>
#include <thread>

namespace saekit {

std::vector<ServerAddress> parse_server_list(const std::string& spec) {
  std::vector<ServerAddress> out;
  size_t pos = 0;
  while (pos < spec.size()) {
    size_t comma = spec.find(',', pos);
    std::string item = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    pos = comma == std::string::npos ? spec.size() : comma + 1;
    if (item.empty()) continue;
    size_t colon = item.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 >= item.size()) {
      throw ConfigError("server address must be host:port, got '" + item + "'");
    }
    ServerAddress addr;
    addr.host = item.substr(0, colon);
    int64_t port = parse_int(item.substr(colon + 1));
    if (port < 1 || port > 65535) throw ConfigError("bad port in '" + item + "'");
    addr.port = static_cast<uint16_t>(port);
    out.push_back(std::move(addr));
  }
  if (out.empty()) throw ConfigError("empty server list");
  return out;
}

BatchClient::BatchClient(const ServerAddress& addr, uint64_t trainer_id, int wait_sleep_ms)
    : sock_(connect_tcp(addr.host, addr.port)),
      trainer_id_(trainer_id),
      wait_sleep_ms_(wait_sleep_ms) {}

bool BatchClient::fetch(uint64_t index, BatchReply& out) {
  BatchRequest req{trainer_id_, index};
  std::string body;
  while (true) {
    sock_.send_frame(encode_request_body(req));
    if (!sock_.recv_frame(body)) throw IoError("server closed the connection");
    out = parse_reply_body(body);
    if (out.index != index) throw ProtocolError("reply index mismatch");
    switch (out.kind) {
      case MessageKind::batch:
        return true;
      case MessageKind::end_of_data:
        return false;
      case MessageKind::wait:
        std::this_thread::sleep_for(std::chrono::milliseconds(wait_sleep_ms_));
        continue;
      default:
        throw ProtocolError("unexpected reply kind");
    }
  }
}

bool BatchClient::ping() {
  sock_.send_frame(encode_ping_body());
  std::string body;
  if (!sock_.recv_frame(body)) return false;
  return peek_kind(body) == MessageKind::pong;
}

RemoteBatchSource::RemoteBatchSource(const std::vector<ServerAddress>& servers,
                                     uint64_t trainer_id, double norm_c)
    : inv_c_(static_cast<float>(1.0 / norm_c)) {
  if (servers.empty()) throw ConfigError("RemoteBatchSource: no servers");
  if (!(norm_c > 0)) throw ConfigError("RemoteBatchSource: norm constant must be > 0");
  clients_.reserve(servers.size());
  for (const auto& addr : servers) clients_.emplace_back(addr, trainer_id);
  next_index_.assign(servers.size(), 0);
  exhausted_.assign(servers.size(), false);
}

bool RemoteBatchSource::fetch_into(size_t rank, MatF& x) {
  BatchReply reply;
  if (!clients_[rank].fetch(next_index_[rank], reply)) return false;
  ++next_index_[rank];
  if (dim_ == 0) dim_ = reply.n;
  if (static_cast<Eigen::Index>(reply.n) != dim_) {
    throw ProtocolError("servers disagree on activation dimension");
  }
  x.resize(reply.rows, reply.n);
  std::memcpy(x.data(), reply.payload.data(), reply.payload.size());
  x *= inv_c_;
  return true;
}

bool RemoteBatchSource::next(MatF& x, MatF& target) {
  if (stash_) {
    // the dim() probe already holds server 0's batch 0
    x = std::move(*stash_);
    stash_.reset();
    rr_ = 1 % clients_.size();
    target = x;
    return true;
  }
  const size_t S = clients_.size();
  for (size_t tried = 0; tried < S; ++tried) {
    const size_t rank = rr_;
    rr_ = (rr_ + 1) % S;
    if (exhausted_[rank]) continue;
    if (fetch_into(rank, x)) {
      target = x;
      return true;
    }
    exhausted_[rank] = true;
  }
  return false;  // all slices drained this epoch
}

void RemoteBatchSource::reset() {
  std::fill(next_index_.begin(), next_index_.end(), 0);
  std::fill(exhausted_.begin(), exhausted_.end(), false);
  rr_ = 0;
  stash_.reset();
}

Eigen::Index RemoteBatchSource::dim() const {
  if (dim_ != 0) return dim_;
  // probe: fetch server 0's first batch and stash it for the next() call
  auto* self = const_cast<RemoteBatchSource*>(this);
  MatF x;
  if (!self->fetch_into(0, x)) throw IoError("RemoteBatchSource: first slice is empty");
  self->stash_ = std::move(x);
  return dim_;
}

}  // namespace saekit
