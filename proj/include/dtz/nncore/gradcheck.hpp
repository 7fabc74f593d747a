#pragma once

#include <cmath>
#include <cstddef>

#include "dtz/common/error.hpp"
#include "dtz/nncore/network.hpp"

namespace dtz {

/// (f(x + h) - f(x - h)) / 2h. Symmetric in the sign of h.
template <typename F, typename S>
auto central_difference(F&& f, S x, S h) {
  require(h != S{}, ErrorKind::contract, "finite-difference step must be non-zero");
  return (f(x + h) - f(x - h)) / (S{2} * h);
}

enum class ParamKind { weight, bias };

struct ParamCoord {
  std::size_t layer = 1;  // global index
  ParamKind kind = ParamKind::weight;
  std::size_t offset = 0;
};

/// Loss of a full forward pass (the network must end in a cost layer).
template <typename T>
T evaluate_loss(Network<T>& net, const BasicTensor<T>& input, std::size_t label, Mode mode) {
  forward_net(net, input, mode);
  return assign_label(net, label);
}

/// Central-difference estimate of dL/dθ for one parameter coordinate. Works on a
/// copy, so `net` (including its dropout step counters) is left untouched.
template <typename T>
T finite_diff_grad(const Network<T>& net, const BasicTensor<T>& input, std::size_t label, ParamCoord coord, T h,
                   Mode mode = Mode::train) {
  require(std::abs(h) > T{}, ErrorKind::contract, "finite-difference step must be non-zero");
  Network<T> probe = net;
  auto& layer = probe.layer(coord.layer);
  require(layer.trainable(), ErrorKind::contract, "layer " + std::to_string(coord.layer) + " has no parameters");
  auto& params = coord.kind == ParamKind::weight ? layer.weights : layer.biases;
  require(coord.offset < params.size(), ErrorKind::contract, "parameter offset out of range");
  const T original = params[coord.offset];
  auto loss_at = [&](T value) {
    params[coord.offset] = value;
    return evaluate_loss(probe, input, label, mode);
  };
  return central_difference(loss_at, original, h);
}

/// Central-difference estimate of dL/d(input[offset]).
template <typename T>
T finite_diff_input_grad(const Network<T>& net, const BasicTensor<T>& input, std::size_t label, std::size_t offset,
                         T h, Mode mode = Mode::train) {
  Network<T> probe = net;
  BasicTensor<T> x = input;
  auto loss_at = [&](T value) {
    x[offset] = value;
    return evaluate_loss(probe, x, label, mode);
  };
  return central_difference(loss_at, input[offset], h);
}

}  // namespace dtz
