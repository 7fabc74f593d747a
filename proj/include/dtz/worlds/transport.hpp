#pragma once

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dtz/worlds/trusted_app.hpp"
#include "dtz/worlds/wire.hpp"

extern char** environ;

namespace dtz {

struct ChannelStats {
  std::uint64_t crossings = 0;
  std::uint64_t bytes_to_trusted = 0;
  std::uint64_t bytes_to_rich = 0;
  std::uint64_t rich_ns = 0;
  std::uint64_t trusted_ns = 0;

  ChannelStats operator-(const ChannelStats& o) const {
    return {crossings - o.crossings, bytes_to_trusted - o.bytes_to_trusted, bytes_to_rich - o.bytes_to_rich,
            rich_ns - o.rich_ns, trusted_ns - o.trusted_ns};
  }
};

enum class Direction { to_trusted, to_rich };

/// Observer of raw channel bytes (tests use it as a leak canary).
using ChannelTap = std::function<void(Direction, std::span<const std::uint8_t>)>;

/// Carries framed messages to the trusted side and back. One call() is one crossing.
class Transport {
 public:
  explicit Transport(std::uint64_t buffer) : buffer_(buffer) {}
  virtual ~Transport() = default;

  Message call(const Message& request) {
    const auto out = encode_frames(request, buffer_);
    if (tap_) tap_(Direction::to_trusted, out);
    const auto before = trusted_clock();
    const auto t0 = std::chrono::steady_clock::now();
    const auto in = exchange(out);
    const auto wall = std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0);
    const auto after = trusted_clock();
    stats_.crossings += 1;
    stats_.bytes_to_trusted += out.size();
    stats_.bytes_to_rich += in.size();
    stats_.trusted_ns += after ? *after - *before : static_cast<std::uint64_t>(wall.count());
    if (tap_) tap_(Direction::to_rich, in);
    return decode_single(in, buffer_);
  }

  void set_tap(ChannelTap tap) { tap_ = std::move(tap); }
  ChannelStats& stats() { return stats_; }
  const ChannelStats& stats() const { return stats_; }
  std::uint64_t buffer() const { return buffer_; }

 protected:
  /// Sends a framed request and returns the framed reply.
  virtual Bytes exchange(const Bytes& request) = 0;
  /// Trusted-side busy time when it can be observed directly; otherwise round-trip time is used.
  virtual std::optional<std::uint64_t> trusted_clock() const { return std::nullopt; }

 private:
  std::uint64_t buffer_;
  ChannelStats stats_;
  ChannelTap tap_;
};

class InProcessTransport : public Transport {
 public:
  InProcessTransport(KeyHandle key, TrustedOptions options)
      : Transport(options.budget.shared_buffer), ta_(std::move(key), std::move(options)) {}

  const TrustedApp& trusted() const { return ta_; }

 protected:
  Bytes exchange(const Bytes& request) override { return ta_.handle_stream(request); }
  std::optional<std::uint64_t> trusted_clock() const override { return ta_.busy_ns(); }

 private:
  TrustedApp ta_;
};

namespace detail {

inline void write_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0 && errno == EINTR) continue;
    require(n > 0, ErrorKind::session, std::string("channel write failed: ") + std::strerror(errno));
    done += static_cast<std::size_t>(n);
  }
}

/// Reads exactly `n` bytes. Returns false on end-of-stream before the first byte.
inline bool read_exact(int fd, std::uint8_t* out, std::size_t n) {
  std::size_t done = 0;
  while (done < n) {
    const auto r = ::read(fd, out + done, n - done);
    if (r < 0 && errno == EINTR) continue;
    require(r >= 0, ErrorKind::session, std::string("channel read failed: ") + std::strerror(errno));
    if (r == 0) {
      require(done == 0, ErrorKind::session, "channel closed mid-frame");
      return false;
    }
    done += static_cast<std::size_t>(r);
  }
  return true;
}

}  // namespace detail

/// Reads one complete framed message from `fd`. `raw`, when given, receives the exact
/// bytes read. Returns nullopt on a clean end-of-stream between messages.
inline std::optional<Message> read_message(int fd, std::uint64_t buffer, Bytes* raw = nullptr) {
  Reassembler re(buffer);
  bool first = true;
  for (;;) {
    std::uint8_t header[kFrameHeaderSize];
    if (!detail::read_exact(fd, header, sizeof header)) {
      require(first, ErrorKind::session, "channel closed inside a chunked message");
      return std::nullopt;
    }
    first = false;
    const auto h = decode_frame_header(header);
    const auto len = re.begin_chunk(h);
    Bytes chunk(len);
    if (len > 0) require(detail::read_exact(fd, chunk.data(), len), ErrorKind::session, "channel closed mid-frame");
    if (raw) {
      raw->insert(raw->end(), header, header + sizeof header);
      raw->insert(raw->end(), chunk.begin(), chunk.end());
    }
    if (re.add_payload(chunk)) return re.take();
  }
}

/// Runs the trusted side as a child process (`dtz_ta`) connected by two pipes.
class TwoProcessTransport : public Transport {
 public:
  struct Launch {
    std::string executable;
    std::string sealed_path;
    std::string key_path;
    SecureBudget budget;
    bool allow_raw = false;
  };

  explicit TwoProcessTransport(const Launch& l) : Transport(l.budget.shared_buffer) {
    ::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    require(::pipe(to_child) == 0 && ::pipe(from_child) == 0, ErrorKind::session, "pipe() failed");
    std::vector<std::string> args = {l.executable,
                                     "--sealed",
                                     l.sealed_path,
                                     "--key",
                                     l.key_path,
                                     "--budget",
                                     std::to_string(l.budget.ta_available()),
                                     "--buffer",
                                     std::to_string(l.budget.shared_buffer)};
    if (l.allow_raw) args.push_back("--allow-raw");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);

    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&fa, from_child[1], STDOUT_FILENO);
    for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) posix_spawn_file_actions_addclose(&fa, fd);
    const int rc = ::posix_spawn(&pid_, l.executable.c_str(), &fa, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    ::close(to_child[0]);
    ::close(from_child[1]);
    out_ = to_child[1];
    in_ = from_child[0];
    if (rc != 0) {
      close_pipes();
      fail(ErrorKind::session, "cannot start trusted process " + l.executable + ": " + std::strerror(rc));
    }
  }

  ~TwoProcessTransport() override {
    close_pipes();
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

 protected:
  Bytes exchange(const Bytes& request) override {
    require(out_ >= 0, ErrorKind::session, "channel closed");
    detail::write_all(out_, request);
    Bytes raw;
    const auto reply = read_message(in_, buffer(), &raw);
    require(reply.has_value(), ErrorKind::session, "trusted process closed the channel");
    return raw;
  }

 private:
  void close_pipes() {
    if (out_ >= 0) ::close(out_);
    if (in_ >= 0) ::close(in_);
    out_ = in_ = -1;
  }

  pid_t pid_ = -1;
  int out_ = -1;
  int in_ = -1;
};

enum class TransportKind { in_process, two_process };

inline TransportKind parse_transport(const std::string& s) {
  if (s == "in-process") return TransportKind::in_process;
  if (s == "two-process") return TransportKind::two_process;
  fail(ErrorKind::validation, "unknown transport '" + s + "' (expected in-process or two-process)");
}

/// DTZ_TRANSPORT, when set, overrides the requested transport.
inline TransportKind resolve_transport(TransportKind requested) {
  if (const char* env = std::getenv("DTZ_TRANSPORT"); env && *env) return parse_transport(env);
  return requested;
}

}  // namespace dtz
