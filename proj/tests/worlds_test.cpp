#include <gtest/gtest.h>

#include <cstdlib>

#include "dtz/worlds/session.hpp"
#include "session_support.hpp"
#include "test_support.hpp"

namespace dtz {
namespace {

using test::error_kind;
using test::monolithic_probs;
using test::raw_scores;
using test::session_spec;

Network<float> mini_alexnet() { return load_cfg(std::string(DTZ_MODELS_DIR) + "/mini_alexnet.cfg"); }

Network<float> fc_head(std::size_t fan_in, std::size_t classes) {
  auto net = build_network<float>({1, 1, fan_in}, {Connected{classes}, Softmax{}, Cost{}}, classes, 0.01f, 1);
  initialize_parameters(net);
  return net;
}

TEST(Budget, DefaultsMatchSecureMemoryLayout) {
  const SecureBudget b;
  EXPECT_EQ(b.total, 16 * kMiB);
  EXPECT_EQ(b.reserve, 2 * kMiB);
  EXPECT_EQ(b.ta_available(), 14 * kMiB);
  EXPECT_EQ(b.shared_buffer, 2 * kMiB);
  EXPECT_EQ(SecureBudget::with_available(5 * kMiB).ta_available(), 5 * kMiB);
}

TEST(Budget, ThousandClassOutputLayerIsAboutFourMiB) {
  const auto net = fc_head(1024, 1000);
  const auto m = estimate_breakdown(net, 0, Mode::infer);
  EXPECT_EQ(m[MemoryCategory::parameters], 4u * (1024 * 1000 + 1000));
  EXPECT_NEAR(static_cast<double>(m[MemoryCategory::parameters]) / (4.0 * kMiB), 1.0, 0.05);
}

TEST(Budget, EmptyTrustedSetCostsFixedRuntimeOnly) {
  const auto net = mini_alexnet();
  EXPECT_EQ(estimate_ta_memory(net, net.layers.size(), Mode::train), kFixedRuntimeBytes);
  const auto plan = plan_partition(net, net.layers.size(), SecureBudget{}, Mode::infer);
  EXPECT_TRUE(plan.valid);
  EXPECT_EQ(plan.estimate, kFixedRuntimeBytes);
}

TEST(Budget, DoublingUnitsDoublesParameterTerm) {
  const auto a = estimate_breakdown(fc_head(64, 10), 0, Mode::infer);
  const auto b = estimate_breakdown(fc_head(64, 20), 0, Mode::infer);
  EXPECT_EQ(2 * a[MemoryCategory::parameters], b[MemoryCategory::parameters]);
}

TEST(Budget, ToySuffixOverOneMiBIsInvalid) {
  // 512 -> 600 connected: (512*600 + 600) params * 4 = 1,231,200 bytes > 1 MiB on its own.
  auto net = build_network<float>({1, 1, 512}, {Connected{600}, Connected{4}, Softmax{}, Cost{}}, 4, 0.1f, 1);
  const std::uint64_t by_hand = 1048576 + 4 * (512 * 600 + 600) + 4 * 600 + 4 * (600 * 4 + 4) + 4 * 4 + 4 * 4 +
                                4 * 4 + 4 * 512;
  EXPECT_EQ(estimate_ta_memory(net, 0, Mode::infer), by_hand);
  const auto plan = plan_partition(net, 0, SecureBudget::with_available(kMiB), Mode::infer);
  EXPECT_FALSE(plan.valid);
  EXPECT_EQ(plan.shortfall(), by_hand - kMiB);
  EXPECT_NE(plan.reason.find(std::to_string(by_hand - kMiB)), std::string::npos) << plan.reason;
}

TEST(Budget, TrainingAddsGradientTerm) {
  const auto net = fc_head(8, 3);
  const auto infer = estimate_breakdown(net, 0, Mode::infer);
  const auto train = estimate_breakdown(net, 0, Mode::train);
  EXPECT_EQ(train.total() - infer.total(), 4u * (8 * 3 + 3) + 4u * (3 + 3 + 3));
}

TEST(Grouping, SoftmaxFirstTrustedPullsInConnected) {
  const auto net = load_cfg(std::string(DTZ_MODELS_DIR) + "/alexnet.cfg");
  const auto L = net.layers.size();
  // Only {softmax, cost} requested trusted.
  const auto plan = plan_partition(net, L - 2, SecureBudget{}, Mode::infer);
  EXPECT_EQ(plan.requested, L - 2);
  EXPECT_EQ(plan.boundary, L - 3);
  EXPECT_TRUE(std::holds_alternative<Connected>(net.layer(plan.boundary + 1).kind));
}

TEST(Grouping, MiniAlexNetEffectiveBoundaries) {
  const auto net = mini_alexnet();
  std::vector<std::size_t> eff;
  for (std::size_t l = 0; l <= net.layers.size(); ++l) eff.push_back(effective_boundary(net, l));
  EXPECT_EQ(eff, (std::vector<std::size_t>{0, 0, 2, 2, 4, 4, 6, 6, 6, 9}));
}

TEST(Grouping, PlanDoesNotMutateNetwork) {
  const auto net = mini_alexnet();
  const auto before = save_weights(net);
  for (std::size_t l = 0; l <= net.layers.size(); ++l) plan_partition(net, l, SecureBudget{}, Mode::train);
  EXPECT_EQ(save_weights(net), before);
  EXPECT_FALSE(plan_partition(net, 99, SecureBudget{}, Mode::train).valid);
}

TEST(Ledger, OverflowLeavesLedgerUnchanged) {
  MemoryLedger ledger(100);
  ledger.set(MemoryCategory::parameters, 60);
  EXPECT_EQ(error_kind([&] { ledger.set(MemoryCategory::activations, 41); }), ErrorKind::out_of_secure_memory);
  EXPECT_EQ(ledger.total(), 60u);
  ledger.set(MemoryCategory::activations, 40);
  EXPECT_EQ(ledger.total(), 100u);
  ledger.set(MemoryCategory::activations, 10);
  EXPECT_EQ(ledger.high_water(), 100u);
}

TEST(Wire, ChunkedSizesMatchClosedForm) {
  const std::uint64_t B = 64;
  for (std::uint64_t p : std::vector<std::uint64_t>{0, 1, B - 1, B, B + 1, 10 * B}) {
    Message m{static_cast<std::uint32_t>(Command::forward), Bytes(p)};
    for (std::uint64_t i = 0; i < p; ++i) m.payload[i] = static_cast<std::uint8_t>(i * 31 + 7);
    const auto stream = encode_frames(m, B);
    const std::uint64_t n = p == 0 ? 1 : (p + B - 1) / B;
    EXPECT_EQ(stream.size(), 20 * n + p) << p;
    EXPECT_EQ(framed_size(p, B), 20 * n + p);
    const auto back = decode_single(stream, B);
    EXPECT_EQ(back.tag, m.tag);
    EXPECT_EQ(back.payload, m.payload) << p;
  }
}

TEST(Wire, HeaderLayoutIsLittleEndian) {
  const auto s = encode_frames({0x01020304u, Bytes{9, 8}}, 16);
  ASSERT_EQ(s.size(), 22u);
  EXPECT_EQ((Bytes(s.begin(), s.begin() + 20)),
            (Bytes{4, 3, 2, 1, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0}));
}

TEST(Wire, BoundaryActivationChunking) {
  // 4x4x256 floats = 16384 bytes of values plus the u8 mode and u64 count.
  const std::uint64_t payload = 1 + 8 + 4 * 4 * 4 * 256;
  EXPECT_EQ(chunk_count(payload, 2 * kMiB), 1u);
  EXPECT_EQ(chunk_count(payload, 4096), 5u);
}

TEST(Wire, MalformedChunkSequencesAreFramingErrors) {
  const std::uint64_t B = 8;
  const auto stream = encode_frames({2, Bytes(20, 1)}, B);  // chunks of 8, 8, 4
  auto patch = [&](std::size_t frame_offset, std::size_t field, std::uint32_t v) {
    auto s = stream;
    std::memcpy(s.data() + frame_offset + field, &v, 4);
    return s;
  };
  const std::size_t second = 20 + 8;
  EXPECT_EQ(error_kind([&] { decode_frames(patch(second, 12, 2), B); }), ErrorKind::framing);   // index skip
  EXPECT_EQ(error_kind([&] { decode_frames(patch(second, 16, 4), B); }), ErrorKind::framing);   // count change
  EXPECT_EQ(error_kind([&] { decode_frames(patch(second, 0, 3), B); }), ErrorKind::framing);    // tag change
  EXPECT_EQ(error_kind([&] { decode_frames(patch(0, 16, 0), B); }), ErrorKind::framing);        // zero chunks
  EXPECT_EQ(error_kind([&] { decode_frames(Bytes(stream.begin(), stream.end() - 1), B); }), ErrorKind::framing);
  EXPECT_EQ(error_kind([&] { decode_frames(Bytes(stream.begin(), stream.begin() + second), B); }),
            ErrorKind::framing);
  EXPECT_EQ(error_kind([&] { decode_frames(stream, 4); }), ErrorKind::framing);  // chunk larger than buffer
  const auto short_first = encode_frames({2, Bytes(4, 1)}, B);
  auto lying = short_first;
  const std::uint32_t two = 2;
  std::memcpy(lying.data() + 16, &two, 4);
  lying.insert(lying.end(), short_first.begin(), short_first.end());
  EXPECT_EQ(error_kind([&] { decode_frames(lying, B); }), ErrorKind::framing);  // non-final chunk not full
}

class TrustedAppTest : public ::testing::Test {
 protected:
  Message load(TrustedApp& ta, const Network<float>& net, const Bytes& sealed, OutputPolicy policy = OutputPolicy::raw,
               Mode mode = Mode::train) {
    ByteWriter w;
    w.put<std::uint8_t>(static_cast<std::uint8_t>(mode));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(policy));
    w.put<std::uint8_t>(0);
    w.put_string(emit_cfg(net));
    w.put<std::uint64_t>(sealed.size());
    w.put_bytes(sealed);
    return ta.handle({static_cast<std::uint32_t>(Command::load_sealed), std::move(w).take()});
  }
  Message forward(TrustedApp& ta, const Tensor& x, Mode mode) {
    ByteWriter w;
    w.put<std::uint8_t>(static_cast<std::uint8_t>(mode));
    write_tensor(w, x);
    return ta.handle({static_cast<std::uint32_t>(Command::forward), std::move(w).take()});
  }
  Message backward(TrustedApp& ta, std::uint32_t label, float eta, bool apply) {
    ByteWriter w;
    w.put<std::uint32_t>(label);
    w.put<float>(eta);
    w.put<std::uint8_t>(apply);
    return ta.handle({static_cast<std::uint32_t>(Command::backward), std::move(w).take()});
  }
  static ErrorKind kind_of(const Message& m) {
    EXPECT_EQ(m.tag, kErrorTag);
    return static_cast<ErrorKind>(m.payload.at(0));
  }
  TrustedApp make(const Key128& key, SecureBudget budget = {}) {
    TrustedOptions opt;
    opt.budget = budget;
    opt.allow_raw = true;
    return TrustedApp(KeyHandle(key), std::move(opt));
  }
};

TEST_F(TrustedAppTest, CommandsBeforeLoadAreProtocolErrors) {
  auto ta = make(random_key());
  Rng rng(1);
  EXPECT_EQ(kind_of(forward(ta, test::random_tensor<float>({8, 8, 3}, rng), Mode::infer)), ErrorKind::protocol);
  EXPECT_EQ(kind_of(backward(ta, 0, 0.1f, true)), ErrorKind::protocol);
  EXPECT_EQ(kind_of(ta.handle({static_cast<std::uint32_t>(Command::save_sealed), {}})), ErrorKind::protocol);
  EXPECT_EQ(kind_of(ta.handle({99, {}})), ErrorKind::protocol);
}

TEST_F(TrustedAppTest, ForwardMatchesMonolithicSanitized) {
  const auto net = test::tiny_convnet<float>(3);
  const auto key = random_key();
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    TrustedApp ta(KeyHandle(key), {});
    ASSERT_EQ(load(ta, net, seal_layers(net, l, key), OutputPolicy::top5).tag, reply_tag(Command::load_sealed));
    Rng rng(l);
    const auto x = test::random_tensor<float>({8, 8, 3}, rng);
    auto rich = net;
    const Tensor* a = &x;
    if (l > 0) a = &forward_net(rich, x, {1, l}, Mode::infer);
    const auto reply = forward(ta, *a, Mode::infer);
    ASSERT_EQ(reply.tag, reply_tag(Command::forward));
    const auto probs = monolithic_probs(net, x);
    EXPECT_EQ(deserialize_sanitized(reply.payload), sanitize(probs, Policy::top5())) << l;
  }
}

TEST_F(TrustedAppTest, SoftmaxCostOnlyDeltaIsProbsMinusOneHot) {
  auto net = fc_head(5, 4);
  Rng prng(2);
  test::randomize_parameters(net, prng);
  const auto key = random_key();
  auto ta = make(key);
  // Trust {softmax, cost} only (grouping disabled), so the delta is dL/dlogits.
  ASSERT_EQ(load(ta, net, seal_layers(net, 1, key)).tag, reply_tag(Command::load_sealed));
  auto rich = net;
  Rng rng(3);
  const auto x = test::random_tensor<float>({1, 1, 5}, rng);
  const auto logits = forward_net(rich, x, {1, 1}, Mode::train);
  ASSERT_EQ(forward(ta, logits, Mode::train).tag, reply_tag(Command::forward));
  const std::uint32_t y = 2;
  const auto reply = backward(ta, y, 0.1f, true);
  ASSERT_EQ(reply.tag, reply_tag(Command::backward));
  ByteReader r(reply.payload);
  const auto delta = read_tensor(r, {1, 1, 4});

  // Analytic oracle in double, confirmed by central differences of -log softmax.
  std::vector<double> z(logits.values().begin(), logits.values().end());
  auto nll = [&](const std::vector<double>& v) {
    double m = *std::max_element(v.begin(), v.end()), s = 0;
    for (double t : v) s += std::exp(t - m);
    return -(v[y] - m - std::log(s));
  };
  double m = *std::max_element(z.begin(), z.end()), s = 0;
  for (double t : z) s += std::exp(t - m);
  for (std::size_t i = 0; i < 4; ++i) {
    const double analytic = std::exp(z[i] - m) / s - (i == y ? 1.0 : 0.0);
    auto zp = z, zm = z;
    zp[i] += 1e-5;
    zm[i] -= 1e-5;
    const double numeric = (nll(zp) - nll(zm)) / 2e-5;
    EXPECT_NEAR(analytic, numeric, 1e-6);
    EXPECT_NEAR(delta[i], analytic, 1e-6) << i;
  }
}

TEST_F(TrustedAppTest, SaveSealedRoundTripsUpdatedParameters) {
  const auto net = test::tiny_convnet<float>(4);
  const auto key = random_key();
  auto ta = make(key);
  const std::size_t l = 2;
  ASSERT_EQ(load(ta, net, seal_layers(net, l, key)).tag, reply_tag(Command::load_sealed));
  auto mono = net;
  Rng rng(5);
  const auto x = test::random_tensor<float>({8, 8, 3}, rng);
  train_step(mono, x, 1, 0.05f);
  auto rich = net;
  forward(ta, forward_net(rich, x, {1, l}, Mode::train), Mode::train);
  ASSERT_EQ(backward(ta, 1, 0.05f, true).tag, reply_tag(Command::backward));
  EXPECT_EQ(ta.handle({static_cast<std::uint32_t>(Command::save_sealed), {}}).tag, kErrorTag);
  const auto prefix = encode_weights(collect_params(net, {1, l}));
  ByteWriter w;
  w.put<std::uint64_t>(prefix.size());
  w.put_bytes(prefix);
  const auto reply = ta.handle({static_cast<std::uint32_t>(Command::save_sealed), std::move(w).take()});
  ASSERT_EQ(reply.tag, reply_tag(Command::save_sealed));
  ByteReader r(reply.payload);
  const auto sealed = r.get_bytes(static_cast<std::size_t>(r.get<std::uint64_t>()));
  const auto file = parse_sealed(sealed);
  EXPECT_EQ(file.prefix, collect_params(net, {1, l}));
  EXPECT_EQ(unseal_layers(file, key), collect_params(mono, {l + 1, mono.layers.size()}));
}

TEST_F(TrustedAppTest, LedgerOverflowKeepsSessionAlive) {
  const auto net = test::tiny_convnet<float>(6);
  const auto key = random_key();
  const auto load_bytes = estimate_ta_memory(net, 0, Mode::infer) -
                          estimate_breakdown(net, 0, Mode::infer)[MemoryCategory::activations];
  auto ta = make(key, SecureBudget::with_available(load_bytes + 16));
  ASSERT_EQ(load(ta, net, seal_layers(net, 0, key)).tag, reply_tag(Command::load_sealed));
  EXPECT_EQ(ta.ledger().total(), load_bytes);
  Rng rng(7);
  const auto x = test::random_tensor<float>({8, 8, 3}, rng);
  EXPECT_EQ(kind_of(forward(ta, x, Mode::infer)), ErrorKind::out_of_secure_memory);
  EXPECT_EQ(ta.ledger().total(), load_bytes);
  EXPECT_LE(ta.ledger().high_water(), ta.ledger().limit());
  const auto reply = ta.handle({static_cast<std::uint32_t>(Command::teardown), {}});
  ASSERT_EQ(reply.tag, reply_tag(Command::teardown));
}

TEST_F(TrustedAppTest, TeardownClearsStateAndReportsHighWater) {
  const auto net = test::tiny_convnet<float>(8);
  const auto key = random_key();
  auto ta = make(key);
  load(ta, net, seal_layers(net, 2, key));
  Rng rng(9);
  auto rich = net;
  forward(ta, forward_net(rich, test::random_tensor<float>({8, 8, 3}, rng), {1, 2}, Mode::train), Mode::train);
  backward(ta, 0, 0.1f, true);
  const auto reply = ta.handle({static_cast<std::uint32_t>(Command::teardown), {}});
  ByteReader r(reply.payload);
  EXPECT_EQ(r.get<std::uint64_t>(), estimate_ta_memory(net, 2, Mode::train));
  EXPECT_EQ(ta.ledger().total(), 0u);
  EXPECT_FALSE(ta.loaded());
  EXPECT_EQ(kind_of(forward(ta, Tensor::of({8, 8, 4}), Mode::infer)), ErrorKind::session);
}

TEST_F(TrustedAppTest, RawPolicyNeedsBaselinePermission) {
  const auto net = test::tiny_convnet<float>(10);
  const auto key = random_key();
  TrustedApp ta(KeyHandle(key), {});
  EXPECT_EQ(kind_of(load(ta, net, seal_layers(net, 0, key), OutputPolicy::raw)), ErrorKind::contract);
  EXPECT_FALSE(ta.loaded());
}

TEST_F(TrustedAppTest, FramedStreamErrorsComeBackAsReplies) {
  auto ta = make(random_key());
  auto stream = encode_frames({static_cast<std::uint32_t>(Command::teardown), {}}, ta.shared_buffer());
  stream.pop_back();
  const auto reply = decode_single(ta.handle_stream(stream), ta.shared_buffer());
  EXPECT_EQ(kind_of(reply), ErrorKind::framing);
}

TEST(Session, RefusesInvalidPlanNamingShortfall) {
  const auto net = mini_alexnet();
  const auto key = random_key();
  const auto plan = plan_partition(net, 0, SecureBudget::with_available(64 * 1024), Mode::train);
  ASSERT_FALSE(plan.valid);
  std::string msg;
  EXPECT_EQ(error_kind([&] { open_session(session_spec(net, plan, key)); }, &msg), ErrorKind::out_of_secure_memory);
  EXPECT_NE(msg.find(std::to_string(plan.shortfall())), std::string::npos) << msg;
}

TEST(Session, TamperedContainerIsRefused) {
  const auto net = mini_alexnet();
  const auto key = random_key();
  const auto plan = plan_partition(net, 4, SecureBudget{}, Mode::infer);
  auto spec = session_spec(net, plan, key);
  spec.model[spec.model.size() - 20] ^= 1;
  EXPECT_EQ(error_kind([&] { open_session(spec); }), ErrorKind::authentication);
  auto wrong = session_spec(net, plan, key);
  wrong.key = random_key();
  EXPECT_EQ(error_kind([&] { open_session(wrong); }), ErrorKind::authentication);
}

TEST(Session, InferenceIsOneCrossingWithPredictedBytes) {
  const auto net = mini_alexnet();
  const auto key = random_key();
  for (std::size_t l : {0u, 2u, 4u, 6u}) {
    const auto plan = plan_partition(net, l, SecureBudget{}, Mode::infer);
    auto s = open_session(session_spec(net, plan, key, Policy::top1()));
    const auto before = s.stats();
    Rng rng(l);
    const auto out = s.infer(test::random_tensor<float>({32, 32, 3}, rng, 0, 1));
    const auto d = s.stats() - before;
    EXPECT_EQ(d.crossings, 1u);
    const auto act = l == 0 ? net.input_shape.count() : net.layer(plan.boundary).output_shape.count();
    EXPECT_EQ(d.bytes_to_trusted, framed_size(1 + 8 + 4 * act, kMiB * 2));
    EXPECT_EQ(d.bytes_to_rich, framed_size(serialize(out).size(), kMiB * 2));
  }
}

TEST(Session, TrainStepIsTwoCrossings) {
  const auto net = mini_alexnet();
  const auto key = random_key();
  for (std::size_t l : {0u, 4u}) {
    auto s = open_session(session_spec(net, plan_partition(net, l, SecureBudget{}, Mode::train), key));
    Rng rng(l);
    for (int i = 0; i < 3; ++i) {
      const auto before = s.stats();
      const auto r = s.train_step(test::random_tensor<float>({32, 32, 3}, rng, 0, 1), i % 10, 0.01f);
      EXPECT_EQ((s.stats() - before).crossings, 2u);
      EXPECT_FALSE(r.loss.has_value());
    }
  }
}

TEST(Session, NothingTrustedMatchesMonolithic) {
  const auto net = mini_alexnet();
  const auto plan = plan_partition(net, net.layers.size(), SecureBudget{}, Mode::train);
  auto s = open_session(session_spec(net, plan, random_key(), Policy::top1()));
  EXPECT_FALSE(s.has_trusted());
  Rng rng(1);
  const auto x = test::random_tensor<float>({32, 32, 3}, rng, 0, 1);
  EXPECT_EQ(s.infer(x), sanitize(monolithic_probs(net, x), Policy::top1()));
  auto mono = net;
  const auto loss = train_step(mono, x, 3, 0.01f);
  const auto r = s.train_step(x, 3, 0.01f);
  ASSERT_TRUE(r.loss.has_value());
  EXPECT_EQ(*r.loss, loss);
  EXPECT_EQ(s.rich_params(), collect_params(mono, mono.all()));
  EXPECT_EQ(s.stats().crossings, 0u);
}

TEST(Session, TenStepsOnToyNetMatchMonolithicLoss) {
  auto net = build_network<float>({1, 1, 6}, {Connected{5, Activation::relu}, Connected{3}, Softmax{}, Cost{}}, 3,
                                  0.1f, 4);
  initialize_parameters(net);
  const auto key = random_key();
  auto s = open_session(session_spec(net, plan_partition(net, 1, SecureBudget{}, Mode::train), key));
  auto mono = net;
  Rng rng(11);
  std::vector<Tensor> xs;
  for (int i = 0; i < 11; ++i) xs.push_back(test::random_tensor<float>({1, 1, 6}, rng));
  for (int i = 0; i < 10; ++i) {
    train_step(mono, xs[i], i % 3, 0.1f);
    s.train_step(xs[i], i % 3, 0.1f);
  }
  const auto probs = raw_scores(s.infer(xs[10]));
  const auto expected = monolithic_probs(mono, xs[10]);
  EXPECT_EQ(probs, expected);
  EXPECT_EQ(cross_entropy_unchecked<float>(probs, 1), cross_entropy_unchecked<float>(expected, 1));
}

TEST(Session, ZeroLearningRateLeavesEverythingUnchanged) {
  const auto net = mini_alexnet();
  const auto key = random_key();
  auto s = open_session(session_spec(net, plan_partition(net, 4, SecureBudget{}, Mode::train), key));
  Rng rng(12);
  s.train_step(test::random_tensor<float>({32, 32, 3}, rng, 0, 1), 1, 0.0f);
  const auto file = parse_sealed(s.save_sealed());
  EXPECT_EQ(file.prefix, collect_params(net, {1, 4}));
  EXPECT_EQ(unseal_layers(file, key), collect_params(net, {5, net.layers.size()}));
}

TEST(Session, AccumulatedUpdateMatchesMonolithic) {
  const auto net = test::tiny_convnet<float>(13);
  const auto key = random_key();
  auto s = open_session(session_spec(net, plan_partition(net, 2, SecureBudget{}, Mode::train), key));
  auto mono = net;
  Rng rng(14);
  for (int i = 0; i < 3; ++i) {
    const auto x = test::random_tensor<float>({8, 8, 3}, rng);
    forward_net(mono, x, mono.all(), Mode::train);
    assign_label(mono, i % 3);
    backward_net(mono, mono.all(), Tensor{}, false);
    s.train_step(x, i % 3, 0.05f, false);
  }
  apply_gradients(mono, mono.all(), 0.05f);
  s.update(0.05f);
  const auto file = parse_sealed(s.save_sealed());
  EXPECT_EQ(file.prefix, collect_params(mono, {1, 2}));
  EXPECT_EQ(unseal_layers(file, key), collect_params(mono, {3, mono.layers.size()}));
}

TEST(Session, GetOutputAppliesRequestedPolicy) {
  const auto net = mini_alexnet();
  auto s = open_session(session_spec(net, plan_partition(net, 6, SecureBudget{}, Mode::infer), random_key(),
                                     Policy::top1()));
  Rng rng(15);
  const auto x = test::random_tensor<float>({32, 32, 3}, rng, 0, 1);
  s.infer(x);
  EXPECT_EQ(s.output(Policy::all_ranked()), sanitize(monolithic_probs(net, x), Policy::all_ranked()));
}

TEST(Session, TeardownClosesSession) {
  const auto net = mini_alexnet();
  auto s = open_session(session_spec(net, plan_partition(net, 6, SecureBudget{}, Mode::infer), random_key()));
  Rng rng(16);
  s.infer(test::random_tensor<float>({32, 32, 3}, rng, 0, 1));
  EXPECT_EQ(s.teardown(), estimate_ta_memory(net, 6, Mode::infer));
  EXPECT_EQ(error_kind([&] { s.infer(Tensor::of({32, 32, 3})); }), ErrorKind::session);
}

class TwoProcess : public ::testing::Test {
 protected:
  SessionSpec spec(const Network<float>& net, std::size_t l, const test::TempDir& dir, Mode mode = Mode::train) {
    const auto key = random_key();
    auto s = session_spec(net, plan_partition(net, l, SecureBudget{}, mode), key);
    write_binary_file(dir.file("model.dtzs"), s.model);
    write_binary_file(dir.file("model.key"), key);
    s.transport = TransportKind::two_process;
    s.key.reset();
    s.ta_executable = DTZ_TA_EXECUTABLE;
    s.sealed_path = dir.file("model.dtzs");
    s.key_path = dir.file("model.key");
    return s;
  }
};

TEST_F(TwoProcess, MatchesInProcessBitExact) {
  test::TempDir dir("dtz_two_process");
  const auto net = mini_alexnet();
  auto s = open_session(spec(net, 4, dir));
  auto mono = net;
  Rng rng(17);
  for (int i = 0; i < 2; ++i) {
    const auto x = test::random_tensor<float>({32, 32, 3}, rng, 0, 1);
    train_step(mono, x, i, 0.01f);
    s.train_step(x, i, 0.01f);
  }
  const auto x = test::random_tensor<float>({32, 32, 3}, rng, 0, 1);
  const auto before = s.stats();
  EXPECT_EQ(raw_scores(s.infer(x)), monolithic_probs(mono, x));
  EXPECT_EQ((s.stats() - before).crossings, 1u);
  EXPECT_EQ(s.teardown(), estimate_ta_memory(net, 4, Mode::train));
}

TEST_F(TwoProcess, WrongKeyIsAuthenticationFailure) {
  test::TempDir dir("dtz_two_process_key");
  const auto net = mini_alexnet();
  auto sp = spec(net, 6, dir);
  write_binary_file(sp.key_path, random_key());
  EXPECT_EQ(error_kind([&] { open_session(sp); }), ErrorKind::authentication);
}

TEST_F(TwoProcess, EnvironmentOverridesTransport) {
  test::TempDir dir("dtz_two_process_env");
  const auto net = mini_alexnet();
  auto sp = spec(net, 6, dir);
  sp.transport = TransportKind::in_process;  // no key in the spec: only the override can succeed
  ::setenv("DTZ_TRANSPORT", "two-process", 1);
  std::optional<ErrorKind> kind;
  {
    kind = error_kind([&] {
      auto s = open_session(sp);
      Rng rng(18);
      s.infer(test::random_tensor<float>({32, 32, 3}, rng, 0, 1));
    });
  }
  ::unsetenv("DTZ_TRANSPORT");
  EXPECT_FALSE(kind.has_value());
  EXPECT_EQ(error_kind([&] { open_session(sp); }), ErrorKind::authentication);
}

}  // namespace
}  // namespace dtz
