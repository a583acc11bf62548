#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "saekit/wire.hpp"

using namespace saekit;

namespace {
std::string hex(const std::string& s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 0xf]);
  }
  return out;
}
}  // namespace

TEST_CASE("request frame bytes are exactly as specified") {
  BatchRequest req;
  req.trainer_id = 0x0102030405060708ULL;
  req.next_index = 0x1122334455667788ULL;
  std::string f = frame(encode_request_body(req));
  // 4-byte LE length (17) + kind 0x01 + trainer_id LE + next_index LE
  CHECK(hex(f) == "11000000"
                  "01"
                  "0807060504030201"
                  "8877665544332211");
  BatchRequest back = parse_request_body(encode_request_body(req));
  CHECK(back.trainer_id == req.trainer_id);
  CHECK(back.next_index == req.next_index);
}

TEST_CASE("batch reply frame bytes are exactly as specified") {
  BatchReply reply;
  reply.kind = MessageKind::batch;
  reply.index = 3;
  reply.rows = 1;
  reply.n = 2;
  float payload[2] = {1.0f, -2.0f};
  reply.payload.assign(reinterpret_cast<const char*>(payload), 8);
  std::string f = frame(encode_reply_body(reply));
  // length = 1 + 8 + 4 + 4 + 8 = 25; float32 LE: 1.0 = 0000803f, -2.0 = 000000c0
  CHECK(hex(f) == "19000000"
                  "02"
                  "0300000000000000"
                  "01000000"
                  "02000000"
                  "0000803f"
                  "000000c0");
}

TEST_CASE("wait and end replies carry zero payload") {
  for (MessageKind kind : {MessageKind::wait, MessageKind::end_of_data}) {
    BatchReply reply;
    reply.kind = kind;
    reply.index = 42;
    std::string body = encode_reply_body(reply);
    CHECK(body.size() == 17);
    BatchReply back = parse_reply_body(body);
    CHECK(back.kind == kind);
    CHECK(back.index == 42);
    CHECK(back.rows == 0);
    CHECK(back.n == 0);
    CHECK(back.payload.empty());
  }
}

TEST_CASE("ping and pong are single-byte bodies") {
  CHECK(hex(frame(encode_ping_body())) == "0100000005");
  CHECK(hex(frame(encode_pong_body())) == "0100000006");
  CHECK(peek_kind(encode_ping_body()) == MessageKind::ping);
  CHECK(peek_kind(encode_pong_body()) == MessageKind::pong);
}

TEST_CASE("malformed frames are rejected") {
  CHECK_THROWS_AS(peek_kind(""), ProtocolError);
  CHECK_THROWS_AS(peek_kind(std::string(1, '\x09')), ProtocolError);
  CHECK_THROWS_AS(parse_request_body(std::string(1, '\x01')), ProtocolError);  // short
  CHECK_THROWS_AS(parse_request_body(encode_ping_body()), ProtocolError);      // wrong kind
  // payload length disagreeing with rows*n
  BatchReply reply;
  reply.kind = MessageKind::batch;
  reply.rows = 2;
  reply.n = 2;
  reply.payload = "only-ninebytes";
  CHECK_THROWS_AS(parse_reply_body(encode_reply_body(reply)), ProtocolError);
}

TEST_CASE("reply roundtrip preserves payload bytes") {
  BatchReply reply;
  reply.kind = MessageKind::batch;
  reply.index = 9;
  reply.rows = 3;
  reply.n = 4;
  reply.payload.resize(48);
  for (size_t i = 0; i < reply.payload.size(); ++i) {
    reply.payload[i] = static_cast<char>(i * 7 + 1);
  }
  BatchReply back = parse_reply_body(encode_reply_body(reply));
  CHECK(back.payload == reply.payload);
  CHECK(back.rows == 3);
  CHECK(back.n == 4);
}
