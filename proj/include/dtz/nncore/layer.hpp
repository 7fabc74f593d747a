#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "dtz/common/error.hpp"
#include "dtz/nncore/rng.hpp"
#include "dtz/nncore/tensor.hpp"

namespace dtz {

enum class Activation : std::uint8_t { linear, relu };
enum class Mode : std::uint8_t { infer = 0, train = 1 };

struct Convolutional {
  std::size_t filters = 1;
  std::size_t size = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  Activation activation = Activation::linear;
  friend bool operator==(const Convolutional&, const Convolutional&) = default;
};

struct Connected {
  std::size_t units = 1;
  Activation activation = Activation::linear;
  friend bool operator==(const Connected&, const Connected&) = default;
};

struct Maxpool {
  std::size_t size = 2;
  std::size_t stride = 2;
  friend bool operator==(const Maxpool&, const Maxpool&) = default;
};

struct Dropout {
  float rate = 0.5f;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};

struct Softmax {
  friend bool operator==(const Softmax&, const Softmax&) = default;
};

/// Cross-entropy cost. Forward passes probabilities through; the loss is
/// evaluated once a label is assigned.
struct Cost {
  friend bool operator==(const Cost&, const Cost&) = default;
};

using LayerKind = std::variant<Convolutional, Connected, Maxpool, Dropout, Softmax, Cost>;

inline constexpr float kProbabilityFloor = 1e-12f;

inline std::string_view kind_name(const LayerKind& kind) {
  constexpr std::string_view names[] = {"convolutional", "connected", "maxpool", "dropout", "softmax", "cost"};
  return names[kind.index()];
}

inline bool is_trainable(const LayerKind& kind) {
  return std::holds_alternative<Convolutional>(kind) || std::holds_alternative<Connected>(kind);
}

inline void validate_kind(const LayerKind& kind) {
  std::visit(
      [](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Convolutional>) {
          require(k.filters > 0 && k.size > 0 && k.stride > 0, ErrorKind::validation,
                  "convolutional filters, size and stride must be positive");
        } else if constexpr (std::is_same_v<K, Connected>) {
          require(k.units > 0, ErrorKind::validation, "connected output must be positive");
        } else if constexpr (std::is_same_v<K, Maxpool>) {
          require(k.size > 0 && k.stride > 0, ErrorKind::validation, "maxpool size and stride must be positive");
        } else if constexpr (std::is_same_v<K, Dropout>) {
          require(k.rate >= 0.0f && k.rate < 1.0f, ErrorKind::validation, "dropout rate must be in [0, 1)");
        }
      },
      kind);
}

/// Output layout as a pure function of kind and input layout.
inline Dims output_dims(const LayerKind& kind, Dims in) {
  validate_kind(kind);
  return std::visit(
      [&](const auto& k) -> Dims {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Convolutional>) {
          require(in.h + 2 * k.pad >= k.size && in.w + 2 * k.pad >= k.size, ErrorKind::validation,
                  "convolution kernel " + std::to_string(k.size) + " larger than padded input " + in.str());
          return {(in.h + 2 * k.pad - k.size) / k.stride + 1, (in.w + 2 * k.pad - k.size) / k.stride + 1, k.filters};
        } else if constexpr (std::is_same_v<K, Connected>) {
          return {1, 1, k.units};
        } else if constexpr (std::is_same_v<K, Maxpool>) {
          require(in.h >= k.size && in.w >= k.size, ErrorKind::validation,
                  "maxpool window " + std::to_string(k.size) + " larger than input " + in.str());
          return {(in.h - k.size) / k.stride + 1, (in.w - k.size) / k.stride + 1, in.c};
        } else {
          return in;
        }
      },
      kind);
}

inline std::size_t weight_count(const LayerKind& kind, Dims in) {
  if (auto* conv = std::get_if<Convolutional>(&kind)) return conv->filters * conv->size * conv->size * in.c;
  if (auto* fc = std::get_if<Connected>(&kind)) return fc->units * in.count();
  return 0;
}

inline std::size_t bias_count(const LayerKind& kind) {
  if (auto* conv = std::get_if<Convolutional>(&kind)) return conv->filters;
  if (auto* fc = std::get_if<Connected>(&kind)) return fc->units;
  return 0;
}

struct ForwardContext {
  Mode mode = Mode::infer;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

template <typename T>
struct LayerGrads {
  BasicTensor<T> weight_grad;
  BasicTensor<T> bias_grad;
  BasicTensor<T> input_delta;
};

template <typename T>
struct Layer {
  LayerKind kind;
  std::size_t index = 0;  // global, 1-based
  Dims input_shape;
  Dims output_shape;

  BasicTensor<T> weights;  // convolutional: [filters, size, size, in_c]; connected: [units, fan_in]
  BasicTensor<T> biases;

  BasicTensor<T> input_cache;
  BasicTensor<T> activation_cache;
  BasicTensor<T> delta_cache;
  std::vector<T> dropout_mask;
  std::vector<std::uint32_t> argmax;
  bool has_cache = false;

  std::optional<std::size_t> label;  // cost layers only
  T loss{};

  BasicTensor<T> weight_grad_acc;
  BasicTensor<T> bias_grad_acc;

  bool trainable() const { return is_trainable(kind); }
  std::size_t parameter_count() const { return weights.size() + biases.size(); }
  std::size_t fan_in() const {
    if (auto* conv = std::get_if<Convolutional>(&kind)) return conv->size * conv->size * input_shape.c;
    return input_shape.count();
  }
};

template <typename T>
Layer<T> make_layer(const LayerKind& kind, Dims input, std::size_t index) {
  Layer<T> layer;
  layer.kind = kind;
  layer.index = index;
  layer.input_shape = input;
  layer.output_shape = output_dims(kind, input);
  if (auto* conv = std::get_if<Convolutional>(&kind)) {
    layer.weights = BasicTensor<T>({conv->filters, conv->size, conv->size, input.c});
    layer.biases = BasicTensor<T>({conv->filters});
  } else if (auto* fc = std::get_if<Connected>(&kind)) {
    layer.weights = BasicTensor<T>({fc->units, input.count()});
    layer.biases = BasicTensor<T>({fc->units});
  }
  return layer;
}

/// He-uniform weights, zero biases, drawn from a stream keyed by (seed, layer index)
/// so a layer's initial values do not depend on which world builds it.
template <typename T>
void initialize_layer(Layer<T>& layer, std::uint64_t seed) {
  if (!layer.trainable()) return;
  Rng rng(hash_combine(mix64(seed), layer.index));
  const double limit = std::sqrt(6.0 / static_cast<double>(layer.fan_in()));
  for (auto& w : layer.weights.values()) w = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
  layer.biases.fill(T{});
}

template <typename T>
T cross_entropy_unchecked(std::span<const T> probs, std::size_t label) {
  const T p = std::max(probs[label], static_cast<T>(kProbabilityFloor));
  return -std::log(p);
}

/// -log(probs[label]) with the probability clamped at 1e-12.
template <typename T>
T cross_entropy_loss(const BasicTensor<T>& probs, std::size_t label) {
  require(label < probs.size(), ErrorKind::contract,
          "label " + std::to_string(label) + " out of range for " + std::to_string(probs.size()) + " classes");
  double sum = 0.0;
  for (T p : probs.values()) sum += static_cast<double>(p);
  require(std::abs(sum - 1.0) <= 1e-5, ErrorKind::contract,
          "probabilities sum to " + std::to_string(sum) + ", expected 1");
  return cross_entropy_unchecked(probs.values(), label);
}

namespace detail {

template <typename T>
inline T apply_activation(Activation a, T v) {
  return (a == Activation::relu && !(v > T{})) ? T{} : v;
}

template <typename T>
void gather_patch(const T* in, Dims d, const Convolutional& k, std::size_t oy, std::size_t ox, T* patch) {
  const std::size_t row = k.size * d.c;
  for (std::size_t ky = 0; ky < k.size; ++ky) {
    const auto iy = static_cast<std::ptrdiff_t>(oy * k.stride + ky) - static_cast<std::ptrdiff_t>(k.pad);
    T* dst = patch + ky * row;
    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
      std::fill(dst, dst + row, T{});
      continue;
    }
    for (std::size_t kx = 0; kx < k.size; ++kx) {
      const auto ix = static_cast<std::ptrdiff_t>(ox * k.stride + kx) - static_cast<std::ptrdiff_t>(k.pad);
      T* cell = dst + kx * d.c;
      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) {
        std::fill(cell, cell + d.c, T{});
      } else {
        const T* src = in + (static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)) * d.c;
        std::copy(src, src + d.c, cell);
      }
    }
  }
}

template <typename T>
void scatter_patch(const T* patch, Dims d, const Convolutional& k, std::size_t oy, std::size_t ox, T* out) {
  const std::size_t row = k.size * d.c;
  for (std::size_t ky = 0; ky < k.size; ++ky) {
    const auto iy = static_cast<std::ptrdiff_t>(oy * k.stride + ky) - static_cast<std::ptrdiff_t>(k.pad);
    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
    for (std::size_t kx = 0; kx < k.size; ++kx) {
      const auto ix = static_cast<std::ptrdiff_t>(ox * k.stride + kx) - static_cast<std::ptrdiff_t>(k.pad);
      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
      const T* src = patch + ky * row + kx * d.c;
      T* dst = out + (static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)) * d.c;
      for (std::size_t c = 0; c < d.c; ++c) dst[c] += src[c];
    }
  }
}

template <typename T>
void conv_forward(Layer<T>& layer, const Convolutional& k, const T* in, T* out) {
  const Dims id = layer.input_shape, od = layer.output_shape;
  const std::size_t patch_len = k.size * k.size * id.c;
  std::vector<T> patch(patch_len);
  const T* w = layer.weights.data();
  const T* b = layer.biases.data();
  for (std::size_t oy = 0; oy < od.h; ++oy) {
    for (std::size_t ox = 0; ox < od.w; ++ox) {
      gather_patch(in, id, k, oy, ox, patch.data());
      T* o = out + (oy * od.w + ox) * od.c;
      for (std::size_t f = 0; f < k.filters; ++f)
        o[f] = apply_activation(k.activation, dot(w + f * patch_len, patch.data(), patch_len) + b[f]);
    }
  }
}

template <typename T>
void conv_backward(const Layer<T>& layer, const Convolutional& k, const T* dpre, LayerGrads<T>& g,
                   bool want_input_delta) {
  const Dims id = layer.input_shape, od = layer.output_shape;
  const std::size_t patch_len = k.size * k.size * id.c;
  std::vector<T> patch(patch_len), dpatch(patch_len);
  const T* w = layer.weights.data();
  T* dw = g.weight_grad.data();
  T* db = g.bias_grad.data();
  T* din = want_input_delta ? g.input_delta.data() : nullptr;
  for (std::size_t oy = 0; oy < od.h; ++oy) {
    for (std::size_t ox = 0; ox < od.w; ++ox) {
      gather_patch(layer.input_cache.data(), id, k, oy, ox, patch.data());
      const T* d = dpre + (oy * od.w + ox) * od.c;
      if (din) std::fill(dpatch.begin(), dpatch.end(), T{});
      for (std::size_t f = 0; f < k.filters; ++f) {
        const T gf = d[f];
        if (gf == T{}) continue;
        db[f] += gf;
        axpy(gf, patch.data(), dw + f * patch_len, patch_len);
        if (din) axpy(gf, w + f * patch_len, dpatch.data(), patch_len);
      }
      if (din) scatter_patch(dpatch.data(), id, k, oy, ox, din);
    }
  }
}

}  // namespace detail

/// Runs one layer, caching what backward_layer needs. Returns the cached activation.
template <typename T>
const BasicTensor<T>& forward_layer(Layer<T>& layer, const BasicTensor<T>& input, const ForwardContext& ctx) {
  if (input.dims() != layer.input_shape || input.size() != layer.input_shape.count())
    fail(ErrorKind::contract, "layer " + std::to_string(layer.index) + " (" + std::string(kind_name(layer.kind)) +
                                  ") expects input " + layer.input_shape.str() + ", got " + input.shape_string());
  if (layer.trainable())
    require(layer.weights.size() == weight_count(layer.kind, layer.input_shape), ErrorKind::state,
            "layer " + std::to_string(layer.index) + " has no initialized weights");

  layer.input_cache = input;
  layer.activation_cache = BasicTensor<T>::of(layer.output_shape);
  layer.label.reset();
  const T* in = input.data();
  T* out = layer.activation_cache.data();
  const std::size_t n_in = input.size();

  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Convolutional>) {
          detail::conv_forward(layer, k, in, out);
        } else if constexpr (std::is_same_v<K, Connected>) {
          const T* w = layer.weights.data();
          const T* b = layer.biases.data();
          for (std::size_t o = 0; o < k.units; ++o)
            out[o] = detail::apply_activation(k.activation, dot(w + o * n_in, in, n_in) + b[o]);
        } else if constexpr (std::is_same_v<K, Maxpool>) {
          const Dims id = layer.input_shape, od = layer.output_shape;
          layer.argmax.assign(od.count(), 0);
          for (std::size_t oy = 0; oy < od.h; ++oy)
            for (std::size_t ox = 0; ox < od.w; ++ox)
              for (std::size_t c = 0; c < od.c; ++c) {
                std::size_t best = ((oy * k.stride) * id.w + ox * k.stride) * id.c + c;
                for (std::size_t ky = 0; ky < k.size; ++ky)
                  for (std::size_t kx = 0; kx < k.size; ++kx) {
                    const std::size_t idx = ((oy * k.stride + ky) * id.w + ox * k.stride + kx) * id.c + c;
                    if (in[idx] > in[best]) best = idx;
                  }
                const std::size_t o = (oy * od.w + ox) * od.c + c;
                out[o] = in[best];
                layer.argmax[o] = static_cast<std::uint32_t>(best);
              }
        } else if constexpr (std::is_same_v<K, Dropout>) {
          if (ctx.mode == Mode::infer || k.rate == 0.0f) {
            layer.dropout_mask.clear();
            std::copy(in, in + n_in, out);
          } else {
            const T scale = static_cast<T>(1.0 / (1.0 - static_cast<double>(k.rate)));
            layer.dropout_mask.resize(n_in);
            for (std::size_t i = 0; i < n_in; ++i) {
              layer.dropout_mask[i] = counter_uniform(ctx.seed, ctx.step, layer.index, i) < k.rate ? T{} : scale;
              out[i] = in[i] * layer.dropout_mask[i];
            }
          }
        } else if constexpr (std::is_same_v<K, Softmax>) {
          const T m = *std::max_element(in, in + n_in);
          T sum{};
          for (std::size_t i = 0; i < n_in; ++i) {
            out[i] = std::exp(in[i] - m);
            sum += out[i];
          }
          for (std::size_t i = 0; i < n_in; ++i) out[i] /= sum;
        } else {
          std::copy(in, in + n_in, out);
        }
      },
      layer.kind);

  layer.has_cache = true;
  return layer.activation_cache;
}

/// Attaches the target class to a cost layer after its forward pass and evaluates the loss.
template <typename T>
T assign_label(Layer<T>& layer, std::size_t label) {
  require(std::holds_alternative<Cost>(layer.kind), ErrorKind::contract,
          "layer " + std::to_string(layer.index) + " is not a cost layer");
  require(layer.has_cache, ErrorKind::state, "cost layer has no forward cache");
  require(label < layer.input_cache.size(), ErrorKind::contract,
          "label " + std::to_string(label) + " out of range for " + std::to_string(layer.input_cache.size()) +
              " classes");
  layer.label = label;
  layer.loss = cross_entropy_unchecked(std::as_const(layer.input_cache).values(), label);
  return layer.loss;
}

/// Gradients of the loss with respect to this layer's parameters and input.
/// `upstream` is dL/da for this layer's output; for a cost layer it may be empty
/// (treated as dL/dL = 1) or a one-element scale.
template <typename T>
LayerGrads<T> backward_layer(Layer<T>& layer, const BasicTensor<T>& upstream, bool want_input_delta = true) {
  require(layer.has_cache, ErrorKind::state,
          "layer " + std::to_string(layer.index) + " backward without a forward cache");
  const bool is_cost = std::holds_alternative<Cost>(layer.kind);
  if (!is_cost)
    require(upstream.size() == layer.output_shape.count(), ErrorKind::contract,
            "layer " + std::to_string(layer.index) + " upstream delta has " + std::to_string(upstream.size()) +
                " elements, expected " + std::to_string(layer.output_shape.count()));

  LayerGrads<T> g;
  if (layer.trainable()) {
    g.weight_grad = BasicTensor<T>(layer.weights.extents());
    g.bias_grad = BasicTensor<T>(layer.biases.extents());
  }
  if (want_input_delta || !layer.trainable()) g.input_delta = BasicTensor<T>::of(layer.input_shape);
  layer.delta_cache = upstream;

  const T* up = upstream.data();
  const std::size_t n_in = layer.input_shape.count();

  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Convolutional> || std::is_same_v<K, Connected>) {
          const std::size_t n_out = layer.output_shape.count();
          std::vector<T> dpre(up, up + n_out);
          if (k.activation == Activation::relu)
            for (std::size_t i = 0; i < n_out; ++i)
              if (!(layer.activation_cache[i] > T{})) dpre[i] = T{};
          if constexpr (std::is_same_v<K, Convolutional>) {
            detail::conv_backward(layer, k, dpre.data(), g, want_input_delta);
          } else {
            const T* x = layer.input_cache.data();
            const T* w = layer.weights.data();
            T* dw = g.weight_grad.data();
            T* din = want_input_delta ? g.input_delta.data() : nullptr;
            for (std::size_t o = 0; o < k.units; ++o) {
              const T d = dpre[o];
              g.bias_grad[o] = d;
              if (d == T{}) continue;
              axpy(d, x, dw + o * n_in, n_in);
              if (din) axpy(d, w + o * n_in, din, n_in);
            }
          }
        } else if constexpr (std::is_same_v<K, Maxpool>) {
          T* din = g.input_delta.data();
          for (std::size_t o = 0; o < layer.argmax.size(); ++o) din[layer.argmax[o]] += up[o];
        } else if constexpr (std::is_same_v<K, Dropout>) {
          T* din = g.input_delta.data();
          if (layer.dropout_mask.empty())
            std::copy(up, up + n_in, din);
          else
            for (std::size_t i = 0; i < n_in; ++i) din[i] = up[i] * layer.dropout_mask[i];
        } else if constexpr (std::is_same_v<K, Softmax>) {
          const T* p = layer.activation_cache.data();
          const T s = dot(p, up, n_in);
          T* din = g.input_delta.data();
          for (std::size_t i = 0; i < n_in; ++i) din[i] = p[i] * (up[i] - s);
        } else {
          require(layer.label.has_value(), ErrorKind::state,
                  "cost layer " + std::to_string(layer.index) + " backward without a label");
          const T scale = upstream.empty() ? T{1} : upstream[0];
          const T p = layer.input_cache[*layer.label];
          if (p > static_cast<T>(kProbabilityFloor)) g.input_delta[*layer.label] = -scale / p;
        }
      },
      layer.kind);

  return g;
}

/// Plain SGD: parameters -= eta * grad.
template <typename T>
void sgd_update(Layer<T>& layer, const BasicTensor<T>& weight_grad, const BasicTensor<T>& bias_grad, T eta) {
  if (!layer.trainable()) {
    require(weight_grad.empty() && bias_grad.empty(), ErrorKind::contract,
            "non-trainable layer " + std::to_string(layer.index) + " given parameter gradients");
    return;
  }
  require(weight_grad.extents() == layer.weights.extents() && bias_grad.extents() == layer.biases.extents(),
          ErrorKind::contract,
          "layer " + std::to_string(layer.index) + " gradient shape " + weight_grad.shape_string() + "/" +
              bias_grad.shape_string() + " does not match parameters " + layer.weights.shape_string() + "/" +
              layer.biases.shape_string());
  T* w = layer.weights.data();
  const T* gw = weight_grad.data();
  for (std::size_t i = 0; i < layer.weights.size(); ++i) w[i] -= eta * gw[i];
  T* b = layer.biases.data();
  const T* gb = bias_grad.data();
  for (std::size_t i = 0; i < layer.biases.size(); ++i) b[i] -= eta * gb[i];
}

}  // namespace dtz
