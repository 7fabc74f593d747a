#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtz/common/error.hpp"
#include "dtz/nncore/layer.hpp"
#include "dtz/nncore/tensor.hpp"

namespace dtz {

/// Inclusive, 1-based range of global layer indices.
struct LayerRange {
  std::size_t first = 1;
  std::size_t last = 0;

  bool empty() const { return last < first; }
  std::size_t size() const { return empty() ? 0 : last - first + 1; }
  friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

/// An ordered layer stack. A network may hold only a contiguous slice of a
/// larger model (e.g. the trusted suffix), in which case `first_index` is the
/// global index of its first layer.
template <typename T>
struct Network {
  Dims input_shape;
  std::size_t class_count = 0;
  float learning_rate = 0.01f;
  std::uint64_t seed = 0;
  std::size_t first_index = 1;
  std::vector<Layer<T>> layers;

  // Dropout masks are keyed by (seed, step, micro); step advances per parameter
  // update and micro per accumulated sample within an update.
  std::uint64_t step = 0;
  std::uint64_t micro = 0;

  std::size_t last_index() const { return first_index + layers.size() - 1; }
  LayerRange all() const { return {first_index, last_index()}; }
  bool holds(std::size_t index) const { return index >= first_index && index <= last_index(); }

  Layer<T>& layer(std::size_t index) {
    require(holds(index), ErrorKind::contract, "layer index " + std::to_string(index) + " not in network");
    return layers[index - first_index];
  }
  const Layer<T>& layer(std::size_t index) const {
    require(holds(index), ErrorKind::contract, "layer index " + std::to_string(index) + " not in network");
    return layers[index - first_index];
  }

  Dims output_shape() const { return layers.empty() ? input_shape : layers.back().output_shape; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  ForwardContext context(Mode mode) const { return {mode, seed, (step << 20) | micro}; }
};

/// Chains layer shapes starting from `input` and allocates parameters (zeroed).
template <typename T>
Network<T> build_network(Dims input, const std::vector<LayerKind>& kinds, std::size_t class_count, float lr,
                         std::uint64_t seed, std::size_t first_index = 1) {
  Network<T> net;
  net.input_shape = input;
  net.class_count = class_count;
  net.learning_rate = lr;
  net.seed = seed;
  net.first_index = first_index;
  Dims d = input;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    try {
      net.layers.push_back(make_layer<T>(kinds[i], d, first_index + i));
    } catch (const Error& e) {
      const std::string prev = i == 0 ? "the input" : "layer " + std::to_string(first_index + i - 1) + " (" +
                                                          std::string(kind_name(kinds[i - 1])) + ")";
      fail(ErrorKind::validation, "layer " + std::to_string(first_index + i) + " (" +
                                      std::string(kind_name(kinds[i])) + ") cannot follow " + prev + " with output " +
                                      d.str() + ": " + e.what());
    }
    d = net.layers.back().output_shape;
  }
  return net;
}

template <typename T>
void initialize_parameters(Network<T>& net) {
  for (auto& l : net.layers) initialize_layer(l, net.seed);
}

template <typename T>
std::vector<LayerKind> layer_kinds(const Network<T>& net) {
  std::vector<LayerKind> out;
  for (const auto& l : net.layers) out.push_back(l.kind);
  return out;
}

/// Copies layers [range] (with parameters, without caches) into a standalone slice.
template <typename T>
Network<T> slice_network(const Network<T>& net, LayerRange range) {
  Network<T> out;
  out.class_count = net.class_count;
  out.learning_rate = net.learning_rate;
  out.seed = net.seed;
  out.step = net.step;
  out.micro = net.micro;
  out.first_index = range.first;
  out.input_shape = range.first == net.first_index ? net.input_shape : net.layer(range.first - 1).output_shape;
  for (std::size_t i = range.first; i <= range.last; ++i) {
    const auto& src = net.layer(i);
    auto l = make_layer<T>(src.kind, src.input_shape, src.index);
    l.weights = src.weights;
    l.biases = src.biases;
    out.layers.push_back(std::move(l));
  }
  return out;
}

inline void check_range(LayerRange range, std::size_t first, std::size_t last) {
  require(!range.empty(), ErrorKind::contract, "empty layer range");
  require(range.first >= first && range.last <= last, ErrorKind::contract,
          "layer range [" + std::to_string(range.first) + ".." + std::to_string(range.last) + "] outside [" +
              std::to_string(first) + ".." + std::to_string(last) + "]");
}

/// Folds forward_layer over `range`; returns the activation of `range.last`.
template <typename T>
const BasicTensor<T>& forward_net(Network<T>& net, const BasicTensor<T>& input, LayerRange range, Mode mode) {
  check_range(range, net.first_index, net.last_index());
  const auto ctx = net.context(mode);
  const BasicTensor<T>* x = &input;
  for (std::size_t i = range.first; i <= range.last; ++i) x = &forward_layer(net.layer(i), *x, ctx);
  require(x->all_finite(), ErrorKind::contract,
          "non-finite activation produced by layers [" + std::to_string(range.first) + ".." +
              std::to_string(range.last) + "]");
  return *x;
}

template <typename T>
const BasicTensor<T>& forward_net(Network<T>& net, const BasicTensor<T>& input, Mode mode) {
  return forward_net(net, input, net.all(), mode);
}

/// Back-propagates `upstream` (dL/da of range.last, empty when range.last is the
/// cost layer) down to range.first, accumulating parameter gradients into each
/// layer. Returns dL/da of the layer before range.first (empty unless requested).
template <typename T>
BasicTensor<T> backward_net(Network<T>& net, LayerRange range, BasicTensor<T> upstream, bool want_input_delta = true) {
  check_range(range, net.first_index, net.last_index());
  for (std::size_t i = range.last; i >= range.first; --i) {
    auto& layer = net.layer(i);
    const bool need_delta = want_input_delta || i > range.first;
    auto g = backward_layer(layer, upstream, need_delta);
    if (layer.trainable()) {
      if (layer.weight_grad_acc.empty()) {
        layer.weight_grad_acc = std::move(g.weight_grad);
        layer.bias_grad_acc = std::move(g.bias_grad);
      } else {
        axpy(T{1}, g.weight_grad.data(), layer.weight_grad_acc.data(), g.weight_grad.size());
        axpy(T{1}, g.bias_grad.data(), layer.bias_grad_acc.data(), g.bias_grad.size());
      }
    }
    upstream = std::move(g.input_delta);
    if (i == range.first) break;
  }
  require(upstream.all_finite(), ErrorKind::contract, "non-finite delta in backward pass");
  ++net.micro;
  return upstream;
}

/// Labels the network's cost layer (which must be its last layer) and returns the loss.
template <typename T>
T assign_label(Network<T>& net, std::size_t label) {
  require(!net.layers.empty(), ErrorKind::contract, "empty network");
  return assign_label(net.layers.back(), label);
}

/// Applies accumulated gradients to layers in `range` and clears the accumulators.
template <typename T>
void apply_gradients(Network<T>& net, LayerRange range, T eta) {
  if (!range.empty()) {
    check_range(range, net.first_index, net.last_index());
    for (std::size_t i = range.first; i <= range.last; ++i) {
      auto& layer = net.layer(i);
      if (!layer.trainable() || layer.weight_grad_acc.empty()) continue;
      sgd_update(layer, layer.weight_grad_acc, layer.bias_grad_acc, eta);
      layer.weight_grad_acc = {};
      layer.bias_grad_acc = {};
    }
  }
  ++net.step;
  net.micro = 0;
}

/// One single-sample SGD step over the whole network; returns the pre-update loss.
template <typename T>
T train_step(Network<T>& net, const BasicTensor<T>& input, std::size_t label, T eta) {
  forward_net(net, input, Mode::train);
  const T loss = assign_label(net, label);
  backward_net(net, net.all(), BasicTensor<T>{}, false);
  apply_gradients(net, net.all(), eta);
  return loss;
}

/// Index of the softmax output in a classifier ending with softmax, cost.
template <typename T>
std::size_t probability_layer(const Network<T>& net) {
  for (std::size_t i = net.last_index(); i >= net.first_index; --i) {
    if (std::holds_alternative<Softmax>(net.layer(i).kind)) return i;
    if (i == net.first_index) break;
  }
  fail(ErrorKind::contract, "network has no softmax layer");
}

template <typename T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace dtz
