#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dtz/common/bytes.hpp"
#include "dtz/common/error.hpp"
#include "dtz/nncore/tensor.hpp"

namespace dtz {

enum class OutputPolicy : std::uint8_t { top1 = 1, top5 = 2, all_ranked = 3, raw = 4 };

inline const char* to_string(OutputPolicy p) {
  switch (p) {
    case OutputPolicy::top1: return "top1";
    case OutputPolicy::top5: return "top5";
    case OutputPolicy::all_ranked: return "all";
    case OutputPolicy::raw: return "raw";
  }
  return "?";
}

/// Proof of running as an undefended baseline (benchmarks, attack reference runs).
struct BaselineMode {
  explicit BaselineMode() = default;
};

/// A release policy. Raw release can only be named with a BaselineMode token.
class Policy {
 public:
  static Policy top1(bool suppress_scores = false) { return {OutputPolicy::top1, suppress_scores}; }
  static Policy top5(bool suppress_scores = false) { return {OutputPolicy::top5, suppress_scores}; }
  static Policy all_ranked(bool suppress_scores = false) { return {OutputPolicy::all_ranked, suppress_scores}; }
  static Policy raw(BaselineMode) { return {OutputPolicy::raw, false}; }

  /// Rebuilds a policy received over the channel; raw needs the baseline token.
  static Policy from_wire(std::uint8_t tag, bool suppress_scores, const BaselineMode* baseline) {
    switch (tag) {
      case 1: return top1(suppress_scores);
      case 2: return top5(suppress_scores);
      case 3: return all_ranked(suppress_scores);
      case 4:
        require(baseline != nullptr, ErrorKind::contract, "raw output requires baseline mode");
        return raw(*baseline);
    }
    fail(ErrorKind::protocol, "unknown output policy tag " + std::to_string(tag));
  }

  static Policy parse(const std::string& name, bool suppress_scores, const BaselineMode* baseline) {
    if (name == "top1") return top1(suppress_scores);
    if (name == "top5") return top5(suppress_scores);
    if (name == "all" || name == "all_ranked") return all_ranked(suppress_scores);
    if (name == "raw") return from_wire(4, false, baseline);
    fail(ErrorKind::validation, "unknown output policy '" + name + "'");
  }

  OutputPolicy kind() const { return kind_; }
  bool suppress_scores() const { return suppress_; }
  friend bool operator==(const Policy&, const Policy&) = default;

 private:
  Policy(OutputPolicy k, bool suppress) : kind_(k), suppress_(suppress) {}
  OutputPolicy kind_;
  bool suppress_;
};

struct RankedEntry {
  std::uint32_t cls = 0;
  std::optional<float> score;
  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

struct SanitizedOutput {
  OutputPolicy policy = OutputPolicy::top1;
  bool downgraded = false;  // top5 requested on fewer than 5 classes
  std::vector<RankedEntry> entries;
  friend bool operator==(const SanitizedOutput&, const SanitizedOutput&) = default;
};

inline constexpr float kProbabilitySumTolerance = 1e-5f;

/// Class indices ordered by descending probability, ties by ascending index.
inline std::vector<std::uint32_t> rank_classes(std::span<const float> probs) {
  std::vector<std::uint32_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return probs[a] > probs[b]; });
  return order;
}

inline SanitizedOutput sanitize(std::span<const float> probs, const Policy& policy) {
  require(!probs.empty(), ErrorKind::contract, "empty probability vector");
  double sum = 0;
  for (float p : probs) {
    require(std::isfinite(p) && p >= 0.0f, ErrorKind::contract, "probability vector has a negative or non-finite entry");
    sum += p;
  }
  require(std::abs(sum - 1.0) <= kProbabilitySumTolerance, ErrorKind::contract,
          "probabilities sum to " + std::to_string(sum) + ", not 1");

  SanitizedOutput out;
  out.policy = policy.kind();
  const bool scores = !policy.suppress_scores();
  auto entry = [&](std::uint32_t c) {
    return RankedEntry{c, scores ? std::optional<float>(probs[c]) : std::nullopt};
  };
  if (policy.kind() == OutputPolicy::raw) {
    for (std::uint32_t c = 0; c < probs.size(); ++c) out.entries.push_back(entry(c));
    return out;
  }
  std::size_t keep = probs.size();
  if (policy.kind() == OutputPolicy::top1) keep = 1;
  if (policy.kind() == OutputPolicy::top5) {
    if (probs.size() < 5) {
      out.policy = OutputPolicy::all_ranked;
      out.downgraded = true;
    } else {
      keep = 5;
    }
  }
  const auto order = rank_classes(probs);
  for (std::size_t i = 0; i < keep; ++i) out.entries.push_back(entry(order[i]));
  return out;
}

inline SanitizedOutput sanitize(const Tensor& probs, const Policy& policy) { return sanitize(probs.values(), policy); }

// Wire form: u8 tag (policy | 0x80 if scores | 0x40 if downgraded), u32 count,
// then per entry u32 class and, when scores are present, f32 score.
inline void write_sanitized(ByteWriter& w, const SanitizedOutput& s) {
  const bool scores = !s.entries.empty() && s.entries.front().score.has_value();
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.policy) | (scores ? 0x80 : 0) | (s.downgraded ? 0x40 : 0));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.entries.size()));
  for (const auto& e : s.entries) {
    w.put<std::uint32_t>(e.cls);
    if (scores) w.put<float>(*e.score);
  }
}

inline Bytes serialize(const SanitizedOutput& s) {
  ByteWriter w;
  write_sanitized(w, s);
  return std::move(w).take();
}

inline SanitizedOutput read_sanitized(ByteReader& r) {
  const auto tag = r.get<std::uint8_t>();
  const auto policy = tag & 0x3f;
  require(policy >= 1 && policy <= 4, ErrorKind::format, "unknown output policy tag " + std::to_string(policy));
  SanitizedOutput s;
  s.policy = static_cast<OutputPolicy>(policy);
  s.downgraded = tag & 0x40;
  const bool scores = tag & 0x80;
  const auto n = r.get<std::uint32_t>();
  require(n <= r.remaining() / 4, ErrorKind::truncated, "sanitized output declares " + std::to_string(n) + " entries");
  for (std::uint32_t i = 0; i < n; ++i) {
    RankedEntry e;
    e.cls = r.get<std::uint32_t>();
    if (scores) e.score = r.get<float>();
    s.entries.push_back(e);
  }
  return s;
}

inline SanitizedOutput deserialize_sanitized(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto s = read_sanitized(r);
  r.expect_end("sanitized output");
  return s;
}

}  // namespace dtz
