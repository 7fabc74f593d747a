#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <string_view>
#include <utility>

#include "dtz/nncore/gradcheck.hpp"
#include "test_support.hpp"

// Central-difference oracle shared by the unit suite and the acceptance binary.
namespace dtz::test {

inline constexpr double kStep = 1e-3;
inline constexpr double kMaxRelErr = 1e-3;
inline constexpr int kInstances = 20;

/// Rejects instances whose finite differences would straddle a ReLU kink or a
/// max-pool tie; the analytic derivative is undefined there.
inline bool away_from_kinks(const Network<double>& net) {
  constexpr double margin = 10 * kStep;
  for (const auto& l : net.layers) {
    const auto* conv = std::get_if<Convolutional>(&l.kind);
    const auto* fc = std::get_if<Connected>(&l.kind);
    if ((conv && conv->activation == Activation::relu) || (fc && fc->activation == Activation::relu)) {
      LayerKind linear = l.kind;
      if (auto* c = std::get_if<Convolutional>(&linear)) c->activation = Activation::linear;
      if (auto* f = std::get_if<Connected>(&linear)) f->activation = Activation::linear;
      auto probe = make_layer<double>(linear, l.input_shape, l.index);
      probe.weights = l.weights;
      probe.biases = l.biases;
      for (double z : forward_layer(probe, l.input_cache, {}).values())
        if (std::abs(z) < margin) return false;
    }
    if (const auto* mp = std::get_if<Maxpool>(&l.kind)) {
      const Dims id = l.input_shape, od = l.output_shape;
      for (std::size_t oy = 0; oy < od.h; ++oy)
        for (std::size_t ox = 0; ox < od.w; ++ox)
          for (std::size_t c = 0; c < od.c; ++c) {
            std::vector<double> w;
            for (std::size_t ky = 0; ky < mp->size; ++ky)
              for (std::size_t kx = 0; kx < mp->size; ++kx)
                w.push_back(l.input_cache[((oy * mp->stride + ky) * id.w + ox * mp->stride + kx) * id.c + c]);
            std::sort(w.rbegin(), w.rend());
            if (w.size() > 1 && w[0] - w[1] < margin) return false;
          }
    }
  }
  return true;
}

struct CheckResult {
  double worst = 0.0;
  std::size_t coordinates = 0;
};

/// Compares analytic parameter gradients of `checked` and the input delta to central differences.
inline CheckResult check_gradients(Network<double> net, const BasicTensor<double>& x, std::size_t label,
                                   std::optional<std::size_t> checked) {
  CheckResult r;
  const auto pristine = net;
  forward_net(net, x, Mode::train);
  assign_label(net, label);
  const auto input_delta = backward_net(net, net.all(), BasicTensor<double>{}, true);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = finite_diff_input_grad(pristine, x, label, i, kStep);
    r.worst = std::max(r.worst, relative_error(input_delta[i], fd));
    ++r.coordinates;
  }
  if (checked) {
    const auto& l = net.layer(*checked);
    for (std::size_t i = 0; i < l.weights.size(); ++i) {
      const double fd = finite_diff_grad(pristine, x, label, {*checked, ParamKind::weight, i}, kStep);
      r.worst = std::max(r.worst, relative_error(l.weight_grad_acc[i], fd));
      ++r.coordinates;
    }
    for (std::size_t i = 0; i < l.biases.size(); ++i) {
      const double fd = finite_diff_grad(pristine, x, label, {*checked, ParamKind::bias, i}, kStep);
      r.worst = std::max(r.worst, relative_error(l.bias_grad_acc[i], fd));
      ++r.coordinates;
    }
  }
  return r;
}

inline Network<double> classifier_tail(Dims in, std::vector<LayerKind> head, std::size_t classes = 3) {
  head.push_back(Connected{classes, Activation::linear});
  head.push_back(Softmax{});
  head.push_back(Cost{});
  return build_network<double>(in, head, classes, 0.1f, 1);
}

/// A random instance: the network and the layer whose parameters are checked, if any.
using Instance = std::pair<Network<double>, std::optional<std::size_t>>;
using InstanceMaker = std::function<Instance(Rng&)>;

inline constexpr const char* kGradientKinds[] = {"convolutional", "connected", "maxpool", "dropout", "softmax", "cost"};

inline InstanceMaker gradient_instance(std::string_view kind) {
  if (kind == "convolutional")
    return [](Rng& rng) {
      const Dims d{3 + rng.below(3), 3 + rng.below(3), 1 + rng.below(2)};
      const std::size_t size = 1 + rng.below(3);
      Convolutional k{1 + rng.below(3), size, 1 + rng.below(2), rng.below(2),
                      rng.below(2) ? Activation::relu : Activation::linear};
      return Instance{classifier_tail(d, {k}), 1};
    };
  if (kind == "connected")
    return [](Rng& rng) {
      const Dims d{1, 1, 2 + rng.below(5)};
      Connected k{2 + rng.below(4), rng.below(2) ? Activation::relu : Activation::linear};
      return Instance{classifier_tail(d, {k}), 1};
    };
  if (kind == "maxpool")
    return [](Rng& rng) {
      const Dims d{4 + rng.below(3), 4 + rng.below(3), 1 + rng.below(2)};
      Maxpool k{2 + rng.below(2), 1 + rng.below(2)};
      return Instance{classifier_tail(d, {k}), std::nullopt};
    };
  if (kind == "dropout")
    return [](Rng& rng) {
      const Dims d{1, 1, 3 + rng.below(6)};
      Dropout k{0.1f + 0.6f * rng.uniform()};
      auto net = classifier_tail(d, {k});
      net.step = rng.below(1000);
      return Instance{std::move(net), std::nullopt};
    };
  if (kind == "softmax")
    return [](Rng& rng) {
      const Dims d{1, 1, 2 + rng.below(6)};
      return Instance{build_network<double>(d, {Softmax{}, Cost{}}, d.c, 0.1f, 1), std::nullopt};
    };
  return [](Rng& rng) {
    const Dims d{1, 1, 2 + rng.below(6)};
    return Instance{build_network<double>(d, {Cost{}}, d.c, 0.1f, 1), std::nullopt};
  };
}

struct PropertyResult {
  int accepted = 0;
  double worst = 0.0;
  std::size_t coordinates = 0;
};

/// Checks kInstances random instances that keep clear of kinks.
inline PropertyResult run_gradient_property(std::string_view kind, const InstanceMaker& make) {
  Rng rng(std::hash<std::string_view>{}(kind));
  PropertyResult r;
  int attempts = 0;
  while (r.accepted < kInstances && attempts < 50 * kInstances) {
    ++attempts;
    auto [net, checked] = make(rng);
    randomize_parameters(net, rng, 0.8f);
    const auto x = random_tensor<double>(net.input_shape, rng, 0.05f, 1.0f);
    const std::size_t label = rng.below(net.layers.back().input_shape.count());
    auto probe = net;
    forward_net(probe, x, Mode::train);
    if (!away_from_kinks(probe)) continue;
    const auto c = check_gradients(net, x, label, checked);
    r.worst = std::max(r.worst, c.worst);
    r.coordinates += c.coordinates;
    ++r.accepted;
  }
  return r;
}

}  // namespace dtz::test
