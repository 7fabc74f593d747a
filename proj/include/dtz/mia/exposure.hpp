#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dtz/nncore/network.hpp"
#include "dtz/privacy/sanitize.hpp"

namespace dtz {

/// first_k hides layers 1..k, last_k hides layers L-k+1..L. k = 0 hides nothing.
enum class Setting { first_k, last_k };
enum class Phase { inference, fine_tuning };

inline const char* to_string(Setting s) { return s == Setting::first_k ? "first" : "last"; }
inline const char* to_string(Phase p) { return p == Phase::inference ? "inference" : "fine-tuning"; }

inline Setting parse_setting(const std::string& s) {
  if (s == "first" || s == "first_k") return Setting::first_k;
  if (s == "last" || s == "last_k") return Setting::last_k;
  fail(ErrorKind::validation, "unknown setting '" + s + "' (expected first or last)");
}

inline Phase parse_phase(const std::string& s) {
  if (s == "infer" || s == "inference") return Phase::inference;
  if (s == "train" || s == "fine-tuning") return Phase::fine_tuning;
  fail(ErrorKind::validation, "unknown phase '" + s + "' (expected infer or train)");
}

/// What the attacker observes for each queried record.
struct ExposureSet {
  std::vector<std::size_t> activations;  // trainable layers whose outputs are visible
  std::vector<std::size_t> gradients;    // trainable layers whose weight gradients are visible
  std::optional<Policy> output;          // released prediction, if any
  bool loss = false;
  Phase phase = Phase::inference;

  bool empty() const { return activations.empty() && gradients.empty() && !output && !loss; }
};

namespace detail {

template <typename T>
std::size_t kind_index(const Network<T>& net, bool softmax) {
  for (const auto& l : net.layers)
    if (softmax ? std::holds_alternative<Softmax>(l.kind) : std::holds_alternative<Cost>(l.kind)) return l.index;
  fail(ErrorKind::contract, softmax ? "network has no softmax layer" : "network has no cost layer");
}

}  // namespace detail

/// Exposure left to an attacker when `k` layers are hidden under `setting`.
/// Hidden trailing layers take the output and loss with them; gradients appear only
/// in the fine-tuning phase. Only trainable layers are activation sources: pooling
/// outputs are functions of the convolution before them.
template <typename T>
ExposureSet exposure_for(const Network<T>& net, Setting setting, std::size_t k, Phase phase) {
  const auto L = net.layers.size();
  require(k <= L, ErrorKind::contract, "cannot hide " + std::to_string(k) + " of " + std::to_string(L) + " layers");
  auto visible = [&](std::size_t index) { return setting == Setting::first_k ? index > k : index + k <= L; };

  ExposureSet e;
  e.phase = phase;
  for (const auto& l : net.layers) {
    if (!l.trainable() || !visible(l.index)) continue;
    e.activations.push_back(l.index);
    if (phase == Phase::fine_tuning) e.gradients.push_back(l.index);
  }
  if (setting == Setting::last_k && k > 0) return e;
  if (visible(detail::kind_index(net, true))) e.output = Policy::raw(BaselineMode{});
  if (visible(detail::kind_index(net, false))) e.loss = true;
  return e;
}

/// Every trainable activation visible, the prediction released under `policy`, the
/// loss kept hidden.
template <typename T>
ExposureSet output_control_exposure(const Network<T>& net, const Policy& policy) {
  ExposureSet e;
  for (const auto& l : net.layers)
    if (l.trainable()) e.activations.push_back(l.index);
  e.output = policy;
  return e;
}

enum class SourceKind : std::uint8_t { activation = 1, gradient = 2, output = 3, loss = 4 };

inline const char* to_string(SourceKind k) {
  switch (k) {
    case SourceKind::activation: return "activation";
    case SourceKind::gradient: return "gradient";
    case SourceKind::output: return "output";
    case SourceKind::loss: return "loss";
  }
  return "?";
}

/// One feature block: a rows x cols matrix (gradients: one row per output neuron).
struct Source {
  SourceKind kind = SourceKind::activation;
  std::size_t layer = 0;  // 0 for output and loss
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Source&, const Source&) = default;
};

using FeatureLayout = std::vector<Source>;

/// Activations, then gradients, each by ascending layer, then output, then loss.
template <typename T>
FeatureLayout feature_layout(const Network<T>& net, const ExposureSet& e) {
  FeatureLayout out;
  auto trainable = [&](std::size_t index, const char* what) -> const Layer<T>& {
    require(net.holds(index), ErrorKind::contract,
            std::string(what) + " source references layer " + std::to_string(index) + ", network has " +
                std::to_string(net.layers.size()));
    const auto& l = net.layer(index);
    require(l.trainable(), ErrorKind::contract,
            std::string(what) + " source layer " + std::to_string(index) + " (" + std::string(kind_name(l.kind)) +
                ") has no parameters");
    return l;
  };
  auto ascending = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    require(std::adjacent_find(v.begin(), v.end()) == v.end(), ErrorKind::contract, "duplicate source layer");
    return v;
  };
  for (auto i : ascending(e.activations))
    out.push_back({SourceKind::activation, i, 1, trainable(i, "activation").output_shape.count()});
  for (auto i : ascending(e.gradients)) {
    const auto& l = trainable(i, "gradient");
    out.push_back({SourceKind::gradient, i, bias_count(l.kind), l.fan_in()});
  }
  if (e.output) out.push_back({SourceKind::output, 0, 1, net.class_count});
  if (e.loss) out.push_back({SourceKind::loss, 0, 1, 1});
  return out;
}

}  // namespace dtz
