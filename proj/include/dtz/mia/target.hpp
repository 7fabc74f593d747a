#pragma once

#include <numeric>

#include "dtz/modelio/dataset.hpp"
#include "dtz/nncore/network.hpp"

namespace dtz {

/// Top-1 accuracy of a classifier over a dataset.
template <typename T>
double accuracy(Network<T>& net, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto p = probability_layer(net);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto s = data.at(i);
    forward_net(net, s.image, net.all(), Mode::infer);
    hits += argmax<T>(net.layer(p).activation_cache.values()) == s.label;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Per-sample SGD for `epochs` passes, visiting records in a seeded order each epoch.
/// Returns the mean loss of the final epoch.
template <typename T>
double train_epochs(Network<T>& net, const Dataset& data, std::size_t epochs, T lr, std::uint64_t seed) {
  require(data.size() > 0, ErrorKind::contract, "empty training set");
  require(data.shape() == net.input_shape, ErrorKind::validation,
          "dataset images are " + data.shape().str() + ", network expects " + net.input_shape.str());
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < data.size(); ++i) samples.push_back(data.at(i));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  double loss = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    loss = 0;
    for (auto i : order) loss += train_step(net, samples[i].image, samples[i].label, lr);
  }
  return loss / static_cast<double>(samples.size());
}

}  // namespace dtz
