#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtz/common/bytes.hpp"
#include "dtz/common/error.hpp"
#include "dtz/nncore/tensor.hpp"

namespace dtz {

enum class Command : std::uint32_t {
  load_sealed = 1,
  forward = 2,
  backward = 3,
  update = 4,
  get_output = 5,
  save_sealed = 6,
  teardown = 7,
};

inline constexpr std::uint32_t kReplyBit = 0x80000000u;
inline constexpr std::uint32_t kErrorTag = 0xffffffffu;

inline std::uint32_t reply_tag(Command c) { return kReplyBit | static_cast<std::uint32_t>(c); }

inline const char* to_string(Command c) {
  switch (c) {
    case Command::load_sealed: return "LoadSealed";
    case Command::forward: return "Forward";
    case Command::backward: return "Backward";
    case Command::update: return "Update";
    case Command::get_output: return "GetOutput";
    case Command::save_sealed: return "SaveSealed";
    case Command::teardown: return "Teardown";
  }
  return "?";
}

struct Message {
  std::uint32_t tag = 0;
  Bytes payload;
};

// Frame: u32 tag | u64 chunk payload length | u32 chunk index | u32 chunk count | payload.
inline constexpr std::size_t kFrameHeaderSize = 4 + 8 + 4 + 4;

inline std::uint64_t chunk_count(std::uint64_t payload, std::uint64_t buffer) {
  return payload == 0 ? 1 : (payload + buffer - 1) / buffer;
}

/// Bytes on the channel for one message: one header per chunk plus the payload.
inline std::uint64_t framed_size(std::uint64_t payload, std::uint64_t buffer) {
  return kFrameHeaderSize * chunk_count(payload, buffer) + payload;
}

inline Bytes encode_frames(const Message& m, std::uint64_t buffer) {
  require(buffer > 0, ErrorKind::contract, "shared buffer must be positive");
  const auto n = chunk_count(m.payload.size(), buffer);
  require(n <= 0xffffffffu, ErrorKind::framing, "message needs more than 2^32 chunks");
  ByteWriter w;
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto begin = i * buffer;
    const auto len = std::min<std::uint64_t>(buffer, m.payload.size() - begin);
    w.put<std::uint32_t>(m.tag);
    w.put<std::uint64_t>(len);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(i));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
    w.put_bytes(std::span(m.payload).subspan(begin, len));
  }
  return std::move(w).take();
}

struct FrameHeader {
  std::uint32_t tag = 0;
  std::uint64_t length = 0;
  std::uint32_t index = 0;
  std::uint32_t count = 0;
};

inline FrameHeader decode_frame_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  FrameHeader h;
  h.tag = r.get<std::uint32_t>();
  h.length = r.get<std::uint64_t>();
  h.index = r.get<std::uint32_t>();
  h.count = r.get<std::uint32_t>();
  return h;
}

/// Incremental reassembly of one message from its chunk frames. Chunks must arrive
/// in order, agree on tag and count, and be full except for the last.
class Reassembler {
 public:
  explicit Reassembler(std::uint64_t buffer) : buffer_(buffer) {}

  /// Validates a header before its payload is read. Returns the payload length.
  std::uint64_t begin_chunk(const FrameHeader& h) {
    require(h.count >= 1, ErrorKind::framing, "frame declares zero chunks");
    require(h.length <= buffer_, ErrorKind::framing,
            "chunk of " + std::to_string(h.length) + " bytes exceeds the " + std::to_string(buffer_) + "-byte buffer");
    if (next_ == 0) {
      tag_ = h.tag;
      count_ = h.count;
    } else {
      require(h.tag == tag_, ErrorKind::framing, "chunk tag changed mid-message");
      require(h.count == count_, ErrorKind::framing, "chunk count changed mid-message");
    }
    require(h.index == next_, ErrorKind::framing,
            "chunk " + std::to_string(h.index) + " arrived where " + std::to_string(next_) + " was expected");
    require(h.index + 1 == h.count || h.length == buffer_, ErrorKind::framing,
            "non-final chunk " + std::to_string(h.index) + " is not full");
    require(h.index + 1 < h.count || h.count == 1 || h.length > 0, ErrorKind::framing, "empty final chunk");
    return h.length;
  }

  /// Appends a chunk payload; returns true once the message is complete.
  bool add_payload(std::span<const std::uint8_t> data) {
    payload_.insert(payload_.end(), data.begin(), data.end());
    return ++next_ == count_;
  }

  Message take() {
    Message m{tag_, std::move(payload_)};
    *this = Reassembler(buffer_);
    return m;
  }

 private:
  std::uint64_t buffer_;
  std::uint32_t tag_ = 0;
  std::uint32_t count_ = 0;
  std::uint32_t next_ = 0;
  Bytes payload_;
};

/// Decodes every message in a byte stream; the stream must end on a message boundary.
inline std::vector<Message> decode_frames(std::span<const std::uint8_t> stream, std::uint64_t buffer) {
  std::vector<Message> out;
  Reassembler re(buffer);
  bool open = false;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    require(stream.size() - pos >= kFrameHeaderSize, ErrorKind::framing, "truncated frame header");
    const auto h = decode_frame_header(stream.subspan(pos, kFrameHeaderSize));
    pos += kFrameHeaderSize;
    const auto len = re.begin_chunk(h);
    require(stream.size() - pos >= len, ErrorKind::framing, "truncated frame payload");
    open = true;
    if (re.add_payload(stream.subspan(pos, len))) {
      out.push_back(re.take());
      open = false;
    }
    pos += len;
  }
  require(!open, ErrorKind::framing, "stream ends inside a chunked message");
  return out;
}

inline Message decode_single(std::span<const std::uint8_t> stream, std::uint64_t buffer) {
  auto msgs = decode_frames(stream, buffer);
  require(msgs.size() == 1, ErrorKind::framing, "expected one message, got " + std::to_string(msgs.size()));
  return std::move(msgs.front());
}

inline void write_tensor(ByteWriter& w, const Tensor& t) {
  w.put<std::uint64_t>(t.size());
  w.put_array<float>(t.values());
}

inline Tensor read_tensor(ByteReader& r, Dims expected) {
  const auto n = r.get<std::uint64_t>();
  require(n == expected.count(), ErrorKind::protocol,
          "tensor of " + std::to_string(n) + " values where " + expected.str() + " was expected");
  return Tensor({expected.h, expected.w, expected.c}, r.get_array<float>(n));
}

inline Message error_message(ErrorKind kind, const std::string& what) {
  ByteWriter w;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(kind));
  w.put_string(what);
  return {kErrorTag, std::move(w).take()};
}

/// Rethrows an error reply as a dtz::Error of the original kind; checks the reply tag otherwise.
inline void check_reply(const Message& reply, Command sent) {
  if (reply.tag == kErrorTag) {
    ByteReader r(reply.payload);
    const auto kind = static_cast<ErrorKind>(r.get<std::uint8_t>());
    auto what = r.get_string();
    const auto prefix = std::string(to_string(kind)) + ": ";
    if (what.starts_with(prefix)) what.erase(0, prefix.size());
    fail(kind, "trusted world: " + what);
  }
  require(reply.tag == reply_tag(sent), ErrorKind::protocol,
          std::string("unexpected reply tag to ") + to_string(sent));
}

}  // namespace dtz
