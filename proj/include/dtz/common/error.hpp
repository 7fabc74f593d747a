#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dtz {

enum class ErrorKind {
  contract,
  parse,
  validation,
  state,
  format,
  truncated,
  version,
  count_mismatch,
  authentication,
  integrity,
  protocol,
  framing,
  out_of_secure_memory,
  session,
  io,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::contract: return "contract violation";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::state: return "state error";
    case ErrorKind::format: return "format error";
    case ErrorKind::truncated: return "truncated input";
    case ErrorKind::version: return "version mismatch";
    case ErrorKind::count_mismatch: return "count mismatch";
    case ErrorKind::authentication: return "authentication failure";
    case ErrorKind::integrity: return "integrity error";
    case ErrorKind::protocol: return "protocol-state error";
    case ErrorKind::framing: return "framing error";
    case ErrorKind::out_of_secure_memory: return "out of secure memory";
    case ErrorKind::session: return "session error";
    case ErrorKind::io: return "i/o error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace dtz
