#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>

#include "dtz/modelio/cfg.hpp"
#include "dtz/modelio/seal.hpp"
#include "dtz/modelio/weights.hpp"
#include "dtz/privacy/sanitize.hpp"
#include "dtz/worlds/budget.hpp"
#include "dtz/worlds/transport.hpp"

namespace dtz {

struct SessionSpec {
  std::string cfg_text;
  /// Sealed container for plan.boundary; a plain weights file when nothing is trusted.
  Bytes model;
  PartitionPlan plan;
  Policy policy = Policy::top1();
  SecureBudget budget;
  TransportKind transport = TransportKind::in_process;
  bool allow_raw = false;

  std::optional<Key128> key;  // in-process: handed to the trusted side only

  std::string ta_executable;  // two-process
  std::string sealed_path;
  std::string key_path;
};

struct TrainResult {
  SanitizedOutput output;
  std::optional<float> loss;  // present only when the cost layer runs rich-side
};

/// Rich-world half of a partitioned model: runs layers 1..l locally and drives the
/// trusted half through its transport.
class Session {
 public:
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;
  Session(Session&&) = default;
  ~Session() {
    if (transport_ && !closed_) {
      try {
        teardown();
      } catch (...) {
      }
    }
  }

  friend Session open_session(SessionSpec spec);

  const PartitionPlan& plan() const { return plan_; }
  std::size_t boundary() const { return plan_.boundary; }
  bool has_trusted() const { return transport_ != nullptr; }
  const Network<float>& rich() const { return rich_; }
  Transport* transport() { return transport_.get(); }

  ChannelStats stats() const {
    ChannelStats s = transport_ ? transport_->stats() : ChannelStats{};
    s.rich_ns = rich_ns_;
    return s;
  }

  void set_tap(ChannelTap tap) {
    if (transport_) transport_->set_tap(std::move(tap));
  }

  SanitizedOutput infer(const Tensor& input) { return forward(input, Mode::infer); }

  /// Forward, Backward(y) with the trusted update fused in, then the rich backward and
  /// update. Two crossings when any layer is trusted.
  TrainResult train_step(const Tensor& input, std::size_t label, float eta, bool apply_update = true) {
    if (!transport_) {
      const auto t0 = clock();
      forward_net(rich_, input, rich_.all(), Mode::train);
      TrainResult r;
      r.output = sanitize(rich_.layers[probability_index()].activation_cache, policy_);
      r.loss = assign_label(rich_, label);
      backward_net(rich_, rich_.all(), Tensor{}, false);
      if (apply_update) apply_gradients(rich_, rich_.all(), eta);
      rich_ns_ += since(t0);
      return r;
    }
    TrainResult r;
    r.output = forward(input, Mode::train);

    ByteWriter w;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(label));
    w.put<float>(eta);
    w.put<std::uint8_t>(apply_update ? 1 : 0);
    const auto reply = call(Command::backward, std::move(w).take());
    ByteReader rd(reply.payload);
    if (plan_.boundary > 0) {
      const auto delta = read_tensor(rd, rich_.output_shape());
      rd.expect_end("Backward reply");
      const auto t0 = clock();
      backward_net(rich_, rich_.all(), delta, false);
      if (apply_update) apply_gradients(rich_, rich_.all(), eta);
      rich_ns_ += since(t0);
    } else {
      require(rd.get<std::uint64_t>() == 0, ErrorKind::protocol, "boundary delta with nothing rich-side");
      rd.expect_end("Backward reply");
    }
    return r;
  }

  /// Applies gradients accumulated by train_step(..., apply_update=false) in both worlds.
  void update(float eta) {
    if (transport_) {
      ByteWriter w;
      w.put<float>(eta);
      call(Command::update, std::move(w).take());
    }
    if (!rich_.layers.empty()) apply_gradients(rich_, rich_.all(), eta);
  }

  /// Re-sanitizes the last trusted output under another policy.
  SanitizedOutput output(const Policy& policy) {
    require(transport_ != nullptr, ErrorKind::contract, "no trusted layers");
    ByteWriter w;
    w.put<std::uint8_t>(static_cast<std::uint8_t>(policy.kind()));
    w.put<std::uint8_t>(policy.suppress_scores() ? 1 : 0);
    const auto reply = call(Command::get_output, std::move(w).take());
    return deserialize_sanitized(reply.payload);
  }

  /// Current model as a sealed container: the trusted world re-encrypts its suffix
  /// and binds the current rich-side weights in as the cleartext prefix.
  Bytes save_sealed() {
    require(transport_ != nullptr, ErrorKind::contract, "no trusted layers to seal");
    const auto prefix = encode_weights(rich_params());
    ByteWriter w;
    w.put<std::uint64_t>(prefix.size());
    w.put_bytes(prefix);
    const auto reply = call(Command::save_sealed, std::move(w).take());
    ByteReader r(reply.payload);
    const auto sealed = r.get_bytes(static_cast<std::size_t>(r.get<std::uint64_t>()));
    r.expect_end("SaveSealed reply");
    return {sealed.begin(), sealed.end()};
  }

  /// Plain weights of the rich-side layers.
  std::vector<LayerParams> rich_params() const {
    return rich_.layers.empty() ? std::vector<LayerParams>{} : collect_params(rich_, rich_.all());
  }

  /// Ends the trusted session; returns its ledger high-water (0 without trusted layers).
  std::uint64_t teardown() {
    if (!transport_ || closed_) return high_water_;
    const auto reply = call(Command::teardown, {});
    closed_ = true;
    ByteReader r(reply.payload);
    high_water_ = r.get<std::uint64_t>();
    r.expect_end("Teardown reply");
    return high_water_;
  }

 private:
  Session() = default;

  static std::chrono::steady_clock::time_point clock() { return std::chrono::steady_clock::now(); }
  static std::uint64_t since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(clock() - t0).count();
  }

  std::size_t probability_index() const { return probability_layer(rich_) - rich_.first_index; }

  Message call(Command c, Bytes payload) {
    require(!closed_, ErrorKind::session, "session is closed");
    auto reply = transport_->call({static_cast<std::uint32_t>(c), std::move(payload)});
    check_reply(reply, c);
    return reply;
  }

  SanitizedOutput forward(const Tensor& input, Mode mode) {
    require(input.dims() == input_shape_, ErrorKind::contract,
            "input " + input.dims().str() + " does not match network input " + input_shape_.str());
    if (!transport_) {
      const auto t0 = clock();
      forward_net(rich_, input, rich_.all(), mode);
      auto out = sanitize(rich_.layers[probability_index()].activation_cache, policy_);
      rich_ns_ += since(t0);
      return out;
    }
    const Tensor* boundary = &input;
    if (!rich_.layers.empty()) {
      const auto t0 = clock();
      boundary = &forward_net(rich_, input, rich_.all(), mode);
      rich_ns_ += since(t0);
    }
    ByteWriter w;
    w.put<std::uint8_t>(static_cast<std::uint8_t>(mode));
    write_tensor(w, *boundary);
    const auto reply = call(Command::forward, std::move(w).take());
    return deserialize_sanitized(reply.payload);
  }

  PartitionPlan plan_;
  Policy policy_ = Policy::top1();
  Dims input_shape_;
  Network<float> rich_;
  std::unique_ptr<Transport> transport_;
  std::uint64_t rich_ns_ = 0;
  std::uint64_t high_water_ = 0;
  bool closed_ = false;
};

/// Establishes a session. The plan must be valid; the trusted side authenticates and
/// unseals its layers before the session is returned.
inline Session open_session(SessionSpec spec) {
  require(spec.plan.valid, ErrorKind::out_of_secure_memory,
          "plan refused: " + (spec.plan.reason.empty() ? std::string("invalid plan") : spec.plan.reason));
  auto full = parse_cfg(spec.cfg_text, false);
  const auto L = full.layers.size();
  require(spec.plan.layer_count == L, ErrorKind::validation, "plan was made for a different architecture");
  const auto l = spec.plan.boundary;

  Session s;
  s.plan_ = spec.plan;
  s.policy_ = spec.policy;
  s.input_shape_ = full.input_shape;

  if (l == L) {
    load_weights(full, spec.model);
    s.rich_ = std::move(full);
    return s;
  }

  const auto file = parse_sealed(spec.model);
  require(file.boundary == l && file.layer_count == L, ErrorKind::validation,
          "sealed container is for boundary " + std::to_string(file.boundary) + " of " +
              std::to_string(file.layer_count) + " layers, plan needs boundary " + std::to_string(l) + " of " +
              std::to_string(L));
  if (l > 0) {
    s.rich_ = slice_network(full, {1, l});
    install_params(s.rich_, file.prefix, s.rich_.all());
  } else {
    require(file.prefix.empty(), ErrorKind::count_mismatch, "prefix records with an empty rich side");
    s.rich_.input_shape = full.input_shape;
    s.rich_.class_count = full.class_count;
    s.rich_.seed = full.seed;
  }

  const auto transport = resolve_transport(spec.transport);
  if (transport == TransportKind::in_process) {
    require(spec.key.has_value(), ErrorKind::authentication, "no key for the trusted side");
    TrustedOptions opt;
    opt.budget = spec.budget;
    opt.allow_raw = spec.allow_raw;
    s.transport_ = std::make_unique<InProcessTransport>(KeyHandle(*spec.key), std::move(opt));
  } else {
    require(!spec.ta_executable.empty() && !spec.sealed_path.empty() && !spec.key_path.empty(), ErrorKind::session,
            "two-process transport needs the trusted executable, sealed path and key path");
    s.transport_ = std::make_unique<TwoProcessTransport>(TwoProcessTransport::Launch{
        spec.ta_executable, spec.sealed_path, spec.key_path, spec.budget, spec.allow_raw});
  }
  if (spec.key) OPENSSL_cleanse(spec.key->data(), spec.key->size());

  ByteWriter w;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(spec.plan.mode));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(spec.policy.kind()));
  w.put<std::uint8_t>(spec.policy.suppress_scores() ? 1 : 0);
  w.put_string(spec.cfg_text);
  // The two-process trusted side reads its container from --sealed.
  const bool inline_model = transport == TransportKind::in_process;
  w.put<std::uint64_t>(inline_model ? spec.model.size() : 0);
  if (inline_model) w.put_bytes(spec.model);
  try {
    s.call(Command::load_sealed, std::move(w).take());
  } catch (...) {
    s.closed_ = true;
    throw;
  }
  return s;
}

}  // namespace dtz
