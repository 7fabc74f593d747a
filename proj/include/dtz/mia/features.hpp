#pragma once

#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dtz/common/bytes.hpp"
#include "dtz/mia/exposure.hpp"
#include "dtz/modelio/dataset.hpp"
#include "dtz/modelio/weights.hpp"

namespace dtz {

struct AttackExample {
  std::vector<std::vector<float>> sources;  // one per layout entry
  bool member = false;
  friend bool operator==(const AttackExample&, const AttackExample&) = default;
};

struct AttackData {
  FeatureLayout layout;
  std::vector<AttackExample> examples;

  std::size_t members() const {
    return static_cast<std::size_t>(
        std::count_if(examples.begin(), examples.end(), [](const auto& e) { return e.member; }));
  }
  std::size_t non_members() const { return examples.size() - members(); }

  void check() const {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      require(ex.sources.size() == layout.size(), ErrorKind::contract,
              "example " + std::to_string(i) + " has " + std::to_string(ex.sources.size()) + " sources, layout has " +
                  std::to_string(layout.size()));
      for (std::size_t s = 0; s < layout.size(); ++s)
        require(ex.sources[s].size() == layout[s].size(), ErrorKind::contract,
                "example " + std::to_string(i) + " source " + std::to_string(s) + " has " +
                    std::to_string(ex.sources[s].size()) + " values, layout expects " +
                    std::to_string(layout[s].size()));
    }
  }
};

/// Released prediction as a class_count vector: the score where one is released,
/// (K - rank) / K for ranked entries without scores, 0 for withheld classes.
inline std::vector<float> output_feature(const SanitizedOutput& s, std::size_t classes) {
  std::vector<float> v(classes, 0.0f);
  for (std::size_t r = 0; r < s.entries.size(); ++r) {
    const auto& e = s.entries[r];
    require(e.cls < classes, ErrorKind::contract, "released class out of range");
    v[e.cls] = e.score ? *e.score : static_cast<float>(classes - r) / static_cast<float>(classes);
  }
  return v;
}

/// Observes one record through `exposure`. Gradients are taken from a backward
/// pass whose accumulators are discarded, so parameters are unchanged.
template <typename T>
AttackExample collect_features(Network<T>& net, const BasicTensor<T>& image, std::size_t label,
                               const ExposureSet& exposure) {
  require(!exposure.empty(), ErrorKind::contract, "empty exposure");
  const auto layout = feature_layout(net, exposure);
  const auto step = net.step, micro = net.micro;

  forward_net(net, image, net.all(), Mode::infer);
  T loss{};
  if (exposure.loss || !exposure.gradients.empty()) loss = assign_label(net, label);

  AttackExample ex;
  std::vector<std::pair<BasicTensor<T>, BasicTensor<T>>> saved;
  if (!exposure.gradients.empty()) {
    for (auto& l : net.layers) saved.emplace_back(std::exchange(l.weight_grad_acc, {}), std::exchange(l.bias_grad_acc, {}));
    backward_net(net, net.all(), BasicTensor<T>{}, false);
  }
  for (const auto& s : layout) {
    std::vector<float> v;
    switch (s.kind) {
      case SourceKind::activation: {
        const auto a = net.layer(s.layer).activation_cache.values();
        v.assign(a.begin(), a.end());
        break;
      }
      case SourceKind::gradient: {
        const auto g = net.layer(s.layer).weight_grad_acc.values();
        v.assign(g.begin(), g.end());
        break;
      }
      case SourceKind::output: {
        const auto& probs = net.layer(probability_layer(net)).activation_cache;
        std::vector<float> p(probs.values().begin(), probs.values().end());
        v = output_feature(sanitize(p, *exposure.output), net.class_count);
        break;
      }
      case SourceKind::loss: v = {static_cast<float>(loss)}; break;
    }
    ex.sources.push_back(std::move(v));
  }
  if (!saved.empty())
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      net.layers[i].weight_grad_acc = std::move(saved[i].first);
      net.layers[i].bias_grad_acc = std::move(saved[i].second);
    }
  net.step = step;
  net.micro = micro;
  return ex;
}

/// Features for every record of `members` (labelled member) then `non_members`.
template <typename T>
AttackData collect_attack_data(Network<T>& net, const Dataset& members, const Dataset& non_members,
                               const ExposureSet& exposure) {
  AttackData d;
  d.layout = feature_layout(net, exposure);
  for (const auto* set : {&members, &non_members})
    for (std::size_t i = 0; i < set->size(); ++i) {
      const auto s = set->at(i);
      auto ex = collect_features(net, s.image, s.label, exposure);
      ex.member = set == &members;
      d.examples.push_back(std::move(ex));
    }
  return d;
}

struct AttackSplits {
  Dataset train_members, train_non_members;
  Dataset eval_members, eval_non_members;
};

/// Half of each source trains the attack; eval takes an equal number of members and
/// non-members from the disjoint remainder.
inline AttackSplits build_attack_splits(const Dataset& train_set, const Dataset& test_set, std::uint64_t seed) {
  require(train_set.size() >= 2 && test_set.size() >= 2, ErrorKind::contract,
          "attack splits need at least 2 members and 2 non-members");
  std::unordered_set<std::string> seen;
  auto key = [](const Tensor& t) {
    return std::string(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  };
  for (std::size_t i = 0; i < train_set.size(); ++i) seen.insert(key(train_set.at(i).image));
  for (std::size_t i = 0; i < test_set.size(); ++i)
    require(!seen.count(key(test_set.at(i).image)), ErrorKind::contract,
            "non-member record " + std::to_string(i) + " also appears among the members");

  auto halves = [&](const Dataset& d, std::uint64_t salt) {
    std::vector<std::size_t> pos(d.size());
    std::iota(pos.begin(), pos.end(), 0);
    Rng rng(hash_combine(seed, salt));
    rng.shuffle(pos.begin(), pos.end());
    return pos;
  };
  const auto m = halves(train_set, 1), n = halves(test_set, 2);
  const auto tm = m.size() / 2, tn = n.size() / 2;
  const auto e = std::min(m.size() - tm, n.size() - tn);
  auto take = [](const Dataset& d, const std::vector<std::size_t>& pos, std::size_t from, std::size_t count) {
    return d.subset(std::vector<std::size_t>(pos.begin() + from, pos.begin() + from + count));
  };
  return {take(train_set, m, 0, tm), take(test_set, n, 0, tn), take(train_set, m, tm, e), take(test_set, n, tn, e)};
}

// Attack dataset cache: "DTZA" | u32 version | u32 sources | per source u8 kind, u32 layer,
// u32 rows, u32 cols | u64 examples | per example u8 member, f32 values in layout order.
inline constexpr std::uint32_t kAttackDataVersion = 1;

inline Bytes encode_attack_data(const AttackData& d) {
  d.check();
  ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("DTZA"), 4));
  w.put<std::uint32_t>(kAttackDataVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.layout.size()));
  for (const auto& s : d.layout) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.kind));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.layer));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.rows));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.cols));
  }
  w.put<std::uint64_t>(d.examples.size());
  for (const auto& ex : d.examples) {
    w.put<std::uint8_t>(ex.member ? 1 : 0);
    for (const auto& v : ex.sources) w.put_array<float>(v);
  }
  return std::move(w).take();
}

inline AttackData decode_attack_data(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.get_bytes(4);
  require(std::string_view(reinterpret_cast<const char*>(magic.data()), 4) == "DTZA", ErrorKind::format,
          "not an attack dataset (bad magic)");
  const auto version = r.get<std::uint32_t>();
  require(version == kAttackDataVersion, ErrorKind::version,
          "attack dataset version " + std::to_string(version) + ", expected " + std::to_string(kAttackDataVersion));
  AttackData d;
  const auto n_sources = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_sources; ++i) {
    Source s;
    const auto kind = r.get<std::uint8_t>();
    require(kind >= 1 && kind <= 4, ErrorKind::format, "unknown source kind " + std::to_string(kind));
    s.kind = static_cast<SourceKind>(kind);
    s.layer = r.get<std::uint32_t>();
    s.rows = r.get<std::uint32_t>();
    s.cols = r.get<std::uint32_t>();
    d.layout.push_back(s);
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    AttackExample ex;
    const auto member = r.get<std::uint8_t>();
    require(member <= 1, ErrorKind::format, "example " + std::to_string(i) + " has membership byte " + std::to_string(member));
    ex.member = member == 1;
    for (const auto& s : d.layout) ex.sources.push_back(r.get_array<float>(s.size()));
    d.examples.push_back(std::move(ex));
  }
  r.expect_end("attack dataset");
  return d;
}

inline void save_attack_data(const std::string& path, const AttackData& d) {
  write_binary_file(path, encode_attack_data(d));
}
inline AttackData load_attack_data(const std::string& path) { return decode_attack_data(read_binary_file(path)); }

}  // namespace dtz
