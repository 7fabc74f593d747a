#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "dtz/common/error.hpp"
#include "dtz/nncore/network.hpp"

namespace dtz {

inline constexpr std::uint64_t kMiB = 1024 * 1024;

/// Fixed bytes the trusted application occupies before any layer is loaded
/// (code, heap bookkeeping, session state).
inline constexpr std::uint64_t kFixedRuntimeBytes = 1 * kMiB;

struct SecureBudget {
  std::uint64_t total = 16 * kMiB;
  std::uint64_t reserve = 2 * kMiB;
  std::uint64_t shared_buffer = 2 * kMiB;

  std::uint64_t ta_available() const { return total - reserve; }

  void validate() const {
    require(reserve < total, ErrorKind::validation, "runtime reserve must be below total secure memory");
    require(shared_buffer > 0, ErrorKind::validation, "shared buffer must be positive");
  }

  /// Budget whose TA-available share is exactly `bytes`.
  static SecureBudget with_available(std::uint64_t bytes, std::uint64_t shared_buffer = 2 * kMiB) {
    SecureBudget b;
    b.total = bytes + b.reserve;
    b.shared_buffer = shared_buffer;
    b.validate();
    return b;
  }
};

/// "14MiB", "512KiB", "1GiB", "4096" or "4096B"; units are base 2.
inline std::uint64_t parse_byte_size(const std::string& text) {
  std::size_t used = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(text, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::validation, "byte size '" + text + "' does not start with a number");
  }
  require(text[0] != '-', ErrorKind::validation, "byte size '" + text + "' is negative");
  const auto unit = text.substr(used);
  std::uint64_t scale = 0;
  if (unit.empty() || unit == "B") scale = 1;
  else if (unit == "KiB") scale = 1024;
  else if (unit == "MiB") scale = kMiB;
  else if (unit == "GiB") scale = 1024 * kMiB;
  require(scale != 0, ErrorKind::validation, "unknown byte unit '" + unit + "' (use B, KiB, MiB or GiB)");
  require(n <= ~std::uint64_t{0} / scale, ErrorKind::validation, "byte size '" + text + "' overflows");
  return n * scale;
}

/// Boundary after the grouping rule: a non-trainable first trusted layer pulls the
/// nearest preceding trainable layer (and everything after it) into the trusted world.
template <typename T>
std::size_t effective_boundary(const Network<T>& net, std::size_t l) {
  const auto L = net.layers.size();
  require(l <= L, ErrorKind::contract, "boundary " + std::to_string(l) + " beyond " + std::to_string(L) + " layers");
  if (l == L || l == 0 || net.layer(l + 1).trainable()) return l;
  for (std::size_t i = l; i >= 1; --i)
    if (net.layer(i).trainable()) return i - 1;
  return 0;
}

enum class MemoryCategory : std::uint8_t { runtime, parameters, activations, gradients, reassembly };
inline constexpr std::size_t kMemoryCategories = 5;

inline const char* to_string(MemoryCategory c) {
  constexpr const char* names[] = {"runtime", "parameters", "activations", "gradients", "reassembly"};
  return names[static_cast<std::size_t>(c)];
}

struct MemoryBreakdown {
  std::array<std::uint64_t, kMemoryCategories> bytes{};

  std::uint64_t& operator[](MemoryCategory c) { return bytes[static_cast<std::size_t>(c)]; }
  std::uint64_t operator[](MemoryCategory c) const { return bytes[static_cast<std::size_t>(c)]; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto b : bytes) t += b;
    return t;
  }
};

/// Trusted-world bytes for layers boundary+1..L:
///   fixed runtime + Σ (4·params + 4·outputs [+ 4·(params + outputs) when training])
///   + 4·(inputs of the first trusted layer) for reassembling the boundary activation.
template <typename T>
MemoryBreakdown estimate_breakdown(const Network<T>& net, std::size_t boundary, Mode mode) {
  MemoryBreakdown m;
  m[MemoryCategory::runtime] = kFixedRuntimeBytes;
  const auto L = net.layers.size();
  require(boundary <= L, ErrorKind::contract, "boundary beyond network");
  for (std::size_t i = boundary + 1; i <= L; ++i) {
    const auto& layer = net.layer(i);
    const std::uint64_t params = layer.parameter_count();
    const std::uint64_t outputs = layer.output_shape.count();
    m[MemoryCategory::parameters] += 4 * params;
    m[MemoryCategory::activations] += 4 * outputs;
    if (mode == Mode::train) m[MemoryCategory::gradients] += 4 * (params + outputs);
  }
  if (boundary < L) m[MemoryCategory::reassembly] = 4 * net.layer(boundary + 1).input_shape.count();
  return m;
}

template <typename T>
std::uint64_t estimate_ta_memory(const Network<T>& net, std::size_t boundary, Mode mode) {
  return estimate_breakdown(net, boundary, mode).total();
}

/// Rich-world bytes for layers 1..boundary, accounted the same way minus the fixed
/// runtime: the input image plus Σ (4·params + 4·outputs [+ 4·(params + outputs)]).
template <typename T>
std::uint64_t estimate_rich_memory(const Network<T>& net, std::size_t boundary, Mode mode) {
  require(boundary <= net.layers.size(), ErrorKind::contract, "boundary beyond network");
  std::uint64_t bytes = 4 * net.input_shape.count();
  for (std::size_t i = 1; i <= boundary; ++i) {
    const auto& layer = net.layer(i);
    const std::uint64_t n = layer.parameter_count() + layer.output_shape.count();
    bytes += (mode == Mode::train ? 8 : 4) * n;
  }
  return bytes;
}

struct PartitionPlan {
  std::size_t requested = 0;
  std::size_t boundary = 0;  // effective, after grouping
  std::size_t layer_count = 0;
  Mode mode = Mode::infer;
  std::uint64_t estimate = 0;
  std::uint64_t budget = 0;
  bool valid = false;
  std::string reason;

  bool has_trusted_layers() const { return boundary < layer_count; }
  std::uint64_t shortfall() const { return estimate > budget ? estimate - budget : 0; }
};

template <typename T>
PartitionPlan plan_partition(const Network<T>& net, std::size_t l, const SecureBudget& budget, Mode mode,
                             bool grouping = true) {
  PartitionPlan p;
  p.requested = l;
  p.layer_count = net.layers.size();
  p.mode = mode;
  p.budget = budget.ta_available();
  if (l > p.layer_count) {
    p.reason = "boundary " + std::to_string(l) + " beyond " + std::to_string(p.layer_count) + " layers";
    return p;
  }
  p.boundary = grouping ? effective_boundary(net, l) : l;
  p.estimate = estimate_ta_memory(net, p.boundary, mode);
  p.valid = p.estimate <= p.budget;
  if (!p.valid)
    p.reason = "trusted layers " + std::to_string(p.boundary + 1) + ".." + std::to_string(p.layer_count) + " need " +
               std::to_string(p.estimate) + " bytes, " + std::to_string(p.shortfall()) + " over the " +
               std::to_string(p.budget) + "-byte budget";
  return p;
}

/// Trusted-side allocation accounting. Every charge is checked against the limit
/// before it is recorded; a refused charge leaves the ledger unchanged.
class MemoryLedger {
 public:
  explicit MemoryLedger(std::uint64_t limit = 0) : limit_(limit) {}

  std::uint64_t limit() const { return limit_; }
  std::uint64_t total() const { return used_.total(); }
  std::uint64_t high_water() const { return high_water_; }
  std::uint64_t operator[](MemoryCategory c) const { return used_[c]; }
  const MemoryBreakdown& breakdown() const { return used_; }

  /// Sets the bytes held in `c`.
  void set(MemoryCategory c, std::uint64_t bytes) {
    const auto next = used_.total() - used_[c] + bytes;
    if (next > limit_)
      fail(ErrorKind::out_of_secure_memory, std::string("allocating ") + std::to_string(bytes) + " bytes of " +
                                                to_string(c) + " would use " + std::to_string(next) + " of " +
                                                std::to_string(limit_) + " secure bytes");
    used_[c] = bytes;
    high_water_ = std::max(high_water_, next);
  }

  void reset() { used_ = {}; }

 private:
  std::uint64_t limit_;
  MemoryBreakdown used_;
  std::uint64_t high_water_ = 0;
};

}  // namespace dtz
