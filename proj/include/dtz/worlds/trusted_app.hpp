#pragma once

#include <openssl/crypto.h>

#include <chrono>
#include <optional>
#include <string>

#include "dtz/modelio/cfg.hpp"
#include "dtz/modelio/seal.hpp"
#include "dtz/privacy/sanitize.hpp"
#include "dtz/worlds/budget.hpp"
#include "dtz/worlds/wire.hpp"

namespace dtz {

// Request payloads (little-endian):
//   LoadSealed  u8 mode | u8 policy | u8 suppress scores | u64 len + cfg text | u64 len + sealed bytes
//               (empty sealed bytes select the container the trusted side was started with)
//   Forward     u8 mode | u64 count | f32 boundary activation
//   Backward    u32 label | f32 eta | u8 apply update
//   Update      f32 eta
//   GetOutput   u8 policy | u8 suppress scores
//   SaveSealed  u64 len + .dtzw bytes of the rich-side layers, sealed alongside as the prefix
//   Teardown: empty
// Replies:
//   LoadSealed  u64 ledger bytes
//   Forward, GetOutput  sanitized output
//   Backward    u64 count | f32 boundary delta (count 0 when the whole model is trusted)
//   SaveSealed  u64 len + sealed container
//   Teardown    u64 ledger high-water
//   Update: empty. Errors: u8 error kind | u64 len + message.

struct TrustedOptions {
  SecureBudget budget;
  bool allow_raw = false;
  Bytes preloaded_sealed;
};

/// The trusted side. All state lives behind handle(); parameters never leave
/// except re-encrypted through SaveSealed.
class TrustedApp {
 public:
  TrustedApp(KeyHandle key, TrustedOptions options)
      : key_(std::move(key)), options_(std::move(options)), ledger_(options_.budget.ta_available()) {
    options_.budget.validate();
  }

  TrustedApp(const TrustedApp&) = delete;
  TrustedApp& operator=(const TrustedApp&) = delete;
  ~TrustedApp() { wipe(); }

  Message handle(const Message& request) noexcept {
    const auto t0 = std::chrono::steady_clock::now();
    Message reply;
    try {
      reply = dispatch(request);
    } catch (const Error& e) {
      reply = error_message(e.kind(), e.what());
    } catch (const std::bad_alloc&) {
      reply = error_message(ErrorKind::out_of_secure_memory, "allocation failed");
    } catch (const std::exception& e) {
      reply = error_message(ErrorKind::protocol, e.what());
    }
    busy_ns_ += std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
    return reply;
  }

  /// Decodes one framed request, handles it, and frames the reply.
  Bytes handle_stream(std::span<const std::uint8_t> stream) {
    Message request;
    try {
      request = decode_single(stream, options_.budget.shared_buffer);
    } catch (const Error& e) {
      return encode_frames(error_message(e.kind(), e.what()), options_.budget.shared_buffer);
    }
    return encode_frames(handle(request), options_.budget.shared_buffer);
  }

  const MemoryLedger& ledger() const { return ledger_; }
  std::uint64_t busy_ns() const { return busy_ns_; }
  bool loaded() const { return net_.has_value(); }
  bool torn_down() const { return torn_down_; }
  std::uint64_t shared_buffer() const { return options_.budget.shared_buffer; }

 private:
  Message dispatch(const Message& m) {
    require(!torn_down_, ErrorKind::session, "trusted session was torn down");
    require(m.tag >= 1 && m.tag <= 7, ErrorKind::protocol, "unknown command tag " + std::to_string(m.tag));
    const auto cmd = static_cast<Command>(m.tag);
    if (cmd != Command::load_sealed && cmd != Command::teardown)
      require(net_.has_value(), ErrorKind::protocol, std::string(to_string(cmd)) + " before LoadSealed");
    ByteReader r(m.payload);
    ByteWriter w;
    switch (cmd) {
      case Command::load_sealed: load_sealed(r, w); break;
      case Command::forward: forward(r, w); break;
      case Command::backward: backward(r, w); break;
      case Command::update: update(r); break;
      case Command::get_output: get_output(r, w); break;
      case Command::save_sealed: save_sealed(r, w); break;
      case Command::teardown: teardown(w); break;
    }
    r.expect_end(to_string(cmd));
    return {reply_tag(cmd), std::move(w).take()};
  }

  void load_sealed(ByteReader& r, ByteWriter& w) {
    require(!net_.has_value(), ErrorKind::protocol, "model already loaded");
    const auto mode = r.get<std::uint8_t>();
    require(mode <= 1, ErrorKind::protocol, "bad mode");
    const auto policy_tag = r.get<std::uint8_t>();
    const bool suppress = r.get<std::uint8_t>() != 0;
    const auto cfg = r.get_string();
    const auto sealed_len = r.get<std::uint64_t>();
    const auto sealed_bytes = r.get_bytes(static_cast<std::size_t>(std::min<std::uint64_t>(sealed_len, r.remaining())));
    require(sealed_bytes.size() == sealed_len, ErrorKind::truncated, "sealed container truncated");

    const BaselineMode token;
    policy_ = Policy::from_wire(policy_tag, suppress, options_.allow_raw ? &token : nullptr);
    mode_ = static_cast<Mode>(mode);

    const auto file = parse_sealed(sealed_bytes.empty() ? std::span<const std::uint8_t>(options_.preloaded_sealed)
                                                        : sealed_bytes);
    auto full = parse_cfg(cfg, false);
    require(file.layer_count == full.layers.size(), ErrorKind::validation,
            "sealed container describes " + std::to_string(file.layer_count) + " layers, architecture has " +
                std::to_string(full.layers.size()));
    const std::size_t boundary = file.boundary;
    const std::size_t L = full.layers.size();

    ledger_.reset();
    std::vector<LayerParams> params;
    auto suffix = slice_network(full, {boundary + 1, L});
    try {
      const auto estimate = estimate_breakdown(full, boundary, Mode::infer);
      for (auto c : {MemoryCategory::runtime, MemoryCategory::parameters, MemoryCategory::reassembly})
        ledger_.set(c, estimate[c]);
      params = unseal_layers(file, key_.get());
      install_params(suffix, params, suffix.all());
    } catch (...) {
      cleanse(params);
      ledger_.reset();
      throw;
    }
    cleanse(params);
    boundary_ = boundary;
    prefix_ = file.prefix;
    net_ = std::move(suffix);
    w.put<std::uint64_t>(ledger_.total());
  }

  void forward(ByteReader& r, ByteWriter& w) {
    auto& net = *net_;
    const auto mode = r.get<std::uint8_t>();
    require(mode <= 1, ErrorKind::protocol, "bad mode");
    const auto x = read_tensor(r, net.input_shape);
    std::uint64_t act = 0;
    for (const auto& l : net.layers) act += 4 * l.output_shape.count();
    ledger_.set(MemoryCategory::activations, act);
    const auto& out = forward_net(net, x, net.all(), static_cast<Mode>(mode));
    probs_ = out;
    forwarded_train_ = mode == 1;
    write_sanitized(w, sanitize(*probs_, policy_));
  }

  void backward(ByteReader& r, ByteWriter& w) {
    auto& net = *net_;
    const auto label = r.get<std::uint32_t>();
    const auto eta = r.get<float>();
    const bool apply = r.get<std::uint8_t>() != 0;
    require(forwarded_train_, ErrorKind::protocol, "Backward without a training Forward");
    require(label < net.class_count, ErrorKind::protocol,
            "label " + std::to_string(label) + " out of range for " + std::to_string(net.class_count) + " classes");
    std::uint64_t grads = 0;
    for (const auto& l : net.layers) grads += 4 * (l.parameter_count() + l.output_shape.count());
    ledger_.set(MemoryCategory::gradients, grads);
    assign_label(net, label);
    const auto delta = backward_net(net, net.all(), Tensor{}, boundary_ > 0);
    forwarded_train_ = false;
    if (apply) apply_gradients(net, net.all(), eta);
    if (boundary_ > 0) {
      write_tensor(w, delta);
    } else {
      w.put<std::uint64_t>(0);
    }
  }

  void update(ByteReader& r) {
    const auto eta = r.get<float>();
    apply_gradients(*net_, net_->all(), eta);
  }

  void get_output(ByteReader& r, ByteWriter& w) {
    const auto tag = r.get<std::uint8_t>();
    const bool suppress = r.get<std::uint8_t>() != 0;
    require(probs_.has_value(), ErrorKind::protocol, "GetOutput before Forward");
    const BaselineMode token;
    write_sanitized(w, sanitize(*probs_, Policy::from_wire(tag, suppress, options_.allow_raw ? &token : nullptr)));
  }

  void save_sealed(ByteReader& r, ByteWriter& w) {
    const auto prefix = decode_weights(r.get_bytes(static_cast<std::size_t>(r.get<std::uint64_t>())));
    std::vector<std::uint32_t> want, got;
    for (std::size_t i = 0; i < prefix_.size(); ++i) want.push_back(prefix_[i].index);
    for (const auto& p : prefix) got.push_back(p.index);
    require(want == got, ErrorKind::count_mismatch, "SaveSealed prefix does not cover the rich-side layers");
    auto suffix = collect_params(*net_, net_->all());
    const auto sealed = seal_params(boundary_, net_->last_index(), prefix, suffix, key_.get());
    cleanse(suffix);
    w.put<std::uint64_t>(sealed.size());
    w.put_bytes(sealed);
  }

  void teardown(ByteWriter& w) {
    w.put<std::uint64_t>(ledger_.high_water());
    wipe();
    torn_down_ = true;
  }

  static void cleanse(std::vector<LayerParams>& params) {
    for (auto& p : params) {
      OPENSSL_cleanse(p.weights.data(), p.weights.size() * sizeof(float));
      OPENSSL_cleanse(p.biases.data(), p.biases.size() * sizeof(float));
    }
  }

  void wipe() {
    if (net_) {
      for (auto& l : net_->layers)
        for (auto* t : {&l.weights, &l.biases, &l.weight_grad_acc, &l.bias_grad_acc, &l.activation_cache,
                        &l.input_cache, &l.delta_cache})
          if (!t->empty()) OPENSSL_cleanse(t->data(), t->size() * sizeof(float));
      net_.reset();
    }
    if (probs_) OPENSSL_cleanse(probs_->data(), probs_->size() * sizeof(float));
    probs_.reset();
    key_.clear();
    ledger_.reset();
  }

  KeyHandle key_;
  TrustedOptions options_;
  MemoryLedger ledger_;
  std::optional<Network<float>> net_;
  std::vector<LayerParams> prefix_;
  std::size_t boundary_ = 0;
  Policy policy_ = Policy::top1();
  Mode mode_ = Mode::infer;
  std::optional<Tensor> probs_;
  bool forwarded_train_ = false;
  bool torn_down_ = false;
  std::uint64_t busy_ns_ = 0;
};

}  // namespace dtz
