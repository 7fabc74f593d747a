#include <gtest/gtest.h>

#include "dtz/nncore/rng.hpp"
#include "dtz/privacy/sanitize.hpp"
#include "test_support.hpp"

namespace dtz {
namespace {

using test::error_kind;

std::vector<float> random_probs(Rng& rng, std::size_t n, bool with_ties) {
  std::vector<float> v(n);
  for (auto& x : v) x = with_ties ? static_cast<float>(1 + rng.below(3)) : rng.uniform(0.01f, 1.0f);
  double s = 0;
  for (auto x : v) s += x;
  for (auto& x : v) x = static_cast<float>(x / s);
  return v;
}

TEST(Sanitize, Top1PicksArgmax) {
  const std::vector<float> p{0.1f, 0.7f, 0.2f};
  const auto s = sanitize(p, Policy::top1());
  ASSERT_EQ(s.entries.size(), 1u);
  EXPECT_EQ(s.entries[0], (RankedEntry{1, 0.7f}));
}

TEST(Sanitize, Top1TieGoesToLowerClass) {
  const std::vector<float> p{0.5f, 0.5f};
  const auto s = sanitize(p, Policy::top1());
  EXPECT_EQ(s.entries[0], (RankedEntry{0, 0.5f}));
}

TEST(Sanitize, Top5On100ClassesIsPrefixOfAllRanked) {
  Rng rng(1);
  const auto p = random_probs(rng, 100, false);
  const auto top5 = sanitize(p, Policy::top5());
  const auto all = sanitize(p, Policy::all_ranked());
  ASSERT_EQ(top5.entries.size(), 5u);
  ASSERT_EQ(all.entries.size(), 100u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(top5.entries[i], all.entries[i]);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_GE(*top5.entries[i - 1].score, *top5.entries[i].score);
}

TEST(Sanitize, Top5OnFewClassesDowngradesWithWarning) {
  const std::vector<float> p{0.25f, 0.25f, 0.5f};
  const auto s = sanitize(p, Policy::top5());
  EXPECT_TRUE(s.downgraded);
  EXPECT_EQ(s.policy, OutputPolicy::all_ranked);
  ASSERT_EQ(s.entries.size(), 3u);
  EXPECT_EQ(s.entries[0].cls, 2u);
  EXPECT_EQ(s.entries[1].cls, 0u);
  EXPECT_EQ(s.entries[2].cls, 1u);
}

TEST(Sanitize, RawKeepsClassOrderAndNeedsBaselineToken) {
  const std::vector<float> p{0.2f, 0.8f};
  const auto s = sanitize(p, Policy::raw(BaselineMode{}));
  EXPECT_EQ(s.entries, (std::vector<RankedEntry>{{0, 0.2f}, {1, 0.8f}}));
  EXPECT_EQ(error_kind([] { Policy::from_wire(4, false, nullptr); }), ErrorKind::contract);
  EXPECT_EQ(error_kind([] { Policy::parse("raw", false, nullptr); }), ErrorKind::contract);
  const BaselineMode token;
  EXPECT_EQ(Policy::parse("raw", false, &token).kind(), OutputPolicy::raw);
  EXPECT_EQ(error_kind([] { Policy::parse("top3", false, nullptr); }), ErrorKind::validation);
}

TEST(Sanitize, SuppressionReleasesRanksOnly) {
  Rng rng(2);
  const auto p = random_probs(rng, 10, false);
  const auto s = sanitize(p, Policy::all_ranked(true));
  for (const auto& e : s.entries) EXPECT_FALSE(e.score.has_value());
  const auto with = sanitize(p, Policy::all_ranked());
  for (std::size_t i = 0; i < s.entries.size(); ++i) EXPECT_EQ(s.entries[i].cls, with.entries[i].cls);
}

TEST(Sanitize, RejectsNonDistribution) {
  const std::vector<float> bad{0.5f, 0.6f};
  EXPECT_EQ(error_kind([&] { sanitize(bad, Policy::top1()); }), ErrorKind::contract);
  const std::vector<float> neg{1.5f, -0.5f};
  EXPECT_EQ(error_kind([&] { sanitize(neg, Policy::top1()); }), ErrorKind::contract);
}

TEST(SanitizedWire, RoundTripAndTrailingBytes) {
  Rng rng(3);
  const auto p = random_probs(rng, 12, true);
  for (const auto& policy : {Policy::top1(), Policy::top5(), Policy::all_ranked(), Policy::top5(true),
                             Policy::raw(BaselineMode{})}) {
    const auto s = sanitize(p, policy);
    auto bytes = serialize(s);
    EXPECT_EQ(deserialize_sanitized(bytes), s);
    bytes.push_back(0);
    EXPECT_EQ(error_kind([&] { deserialize_sanitized(bytes); }), ErrorKind::format);
  }
}

TEST(SanitizedWire, Top1Layout) {
  const std::vector<float> p{0.25f, 0.75f};
  const auto bytes = serialize(sanitize(p, Policy::top1()));
  ASSERT_EQ(bytes.size(), 1u + 4 + 4 + 4);
  EXPECT_EQ(bytes[0], 0x81);
  EXPECT_EQ(bytes[1], 1);
  EXPECT_EQ(bytes[5], 1);
}

class SanitizeProperty : public ::testing::TestWithParam<bool> {};

TEST_P(SanitizeProperty, ArgmaxPrefixAndSizeMonotonicity) {
  Rng rng(GetParam() ? 41 : 42);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + rng.below(60);
    const auto p = random_probs(rng, n, GetParam());
    const auto raw_top = argmax<float>(p);
    const auto t1 = sanitize(p, Policy::top1());
    const auto t5 = sanitize(p, Policy::top5());
    const auto all = sanitize(p, Policy::all_ranked());
    const auto raw = sanitize(p, Policy::raw(BaselineMode{}));
    EXPECT_EQ(t1.entries[0].cls, raw_top);
    EXPECT_EQ(t1.entries[0], t5.entries[0]);
    EXPECT_EQ(t5.entries[0], all.entries[0]);
    for (std::size_t i = 1; i < all.entries.size(); ++i) {
      const auto& a = all.entries[i - 1];
      const auto& b = all.entries[i];
      EXPECT_TRUE(*a.score > *b.score || (*a.score == *b.score && a.cls < b.cls));
    }
    const auto s1 = serialize(t1).size(), s5 = serialize(t5).size(), sa = serialize(all).size(),
               sr = serialize(raw).size();
    EXPECT_LE(s1, s5);
    EXPECT_LE(s5, sa);
    EXPECT_LE(sa, sr);
  }
}

INSTANTIATE_TEST_SUITE_P(Ties, SanitizeProperty, ::testing::Bool());

}  // namespace
}  // namespace dtz
