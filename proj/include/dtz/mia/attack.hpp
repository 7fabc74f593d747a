#pragma once

#include <cmath>
#include <vector>

#include "dtz/mia/features.hpp"
#include "dtz/nncore/network.hpp"

namespace dtz {

struct AttackHyper {
  std::size_t hidden = 64;     // per-source encoder width
  std::size_t combiner = 256;  // combiner hidden width
  std::size_t epochs = 50;
  float lr = 0.01f;
  std::uint64_t seed = 1;
  bool conv_gradients = true;  // false: gradients go through the flatten + fully connected encoder
};

struct AttackMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double accuracy() const {
    const auto n = tp + fp + fn + tn;
    return n == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(n);
  }
};

inline constexpr float kMemberThreshold = 0.5f;

/// A score of at least 0.5 predicts "member".
inline AttackMetrics score_metrics(const std::vector<float>& scores, const std::vector<bool>& members) {
  require(scores.size() == members.size(), ErrorKind::contract, "score and label counts differ");
  AttackMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= kMemberThreshold;
    if (predicted) (members[i] ? m.tp : m.fp) += 1;
    else (members[i] ? m.fn : m.tn) += 1;
  }
  return m;
}

/// Per-source encoders feeding a combiner that emits P(member).
/// Activation, output and loss sources use one fully connected hidden layer; gradient
/// sources first pass each weight row through a 1 x fan_in convolution.
class AttackModel {
 public:
  const FeatureLayout& layout() const { return layout_; }
  const AttackHyper& hyper() const { return hyper_; }

  float score(const AttackExample& ex) { return run(inputs(ex), Mode::infer); }

  std::vector<float> scores(const AttackData& d) {
    require(d.layout == layout_, ErrorKind::contract, "feature layout differs from the one the attack was trained on");
    std::vector<float> out;
    for (const auto& ex : d.examples) out.push_back(score(ex));
    return out;
  }

  friend AttackModel train_attack(const AttackData& train, const AttackHyper& hyper);

 private:
  std::vector<Tensor> inputs(const AttackExample& ex) const {
    require(ex.sources.size() == layout_.size(), ErrorKind::contract, "example does not match the feature layout");
    std::vector<Tensor> in;
    for (std::size_t s = 0; s < layout_.size(); ++s) {
      require(ex.sources[s].size() == layout_[s].size(), ErrorKind::contract,
              "source " + std::to_string(s) + " width does not match the feature layout");
      Tensor t = Tensor::of(encoders_[s].input_shape);
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = (ex.sources[s][j] - mean_[s][j]) * inv_scale_[s][j];
      in.push_back(std::move(t));
    }
    return in;
  }

  float run(const std::vector<Tensor>& in, Mode mode) {
    Tensor joint = Tensor::of(combiner_.input_shape);
    for (std::size_t s = 0; s < encoders_.size(); ++s) {
      const auto& h = forward_net(encoders_[s], in[s], encoders_[s].all(), mode);
      std::copy(h.data(), h.data() + h.size(), joint.data() + s * hyper_.hidden);
    }
    forward_net(combiner_, joint, combiner_.all(), mode);
    return combiner_.layer(probability_layer(combiner_)).activation_cache[1];
  }

  void step(const std::vector<Tensor>& in, bool member) {
    run(in, Mode::train);
    assign_label(combiner_, member ? 1 : 0);
    const auto delta = backward_net(combiner_, combiner_.all(), Tensor{}, true);
    for (std::size_t s = 0; s < encoders_.size(); ++s) {
      Tensor d = Tensor::of(encoders_[s].output_shape());
      std::copy(delta.data() + s * hyper_.hidden, delta.data() + (s + 1) * hyper_.hidden, d.data());
      backward_net(encoders_[s], encoders_[s].all(), d, false);
      apply_gradients(encoders_[s], encoders_[s].all(), hyper_.lr);
    }
    apply_gradients(combiner_, combiner_.all(), hyper_.lr);
  }

  FeatureLayout layout_;
  AttackHyper hyper_;
  std::vector<std::vector<float>> mean_, inv_scale_;
  std::vector<Network<float>> encoders_;
  Network<float> combiner_;
};

/// Per-sample SGD on cross-entropy. Features are standardized with statistics of the
/// training examples. Deterministic for a given seed.
inline AttackModel train_attack(const AttackData& train, const AttackHyper& hyper) {
  train.check();
  require(!train.layout.empty(), ErrorKind::contract, "empty exposure");
  require(train.members() >= 2 && train.non_members() >= 2, ErrorKind::contract,
          "attack training needs at least 2 members and 2 non-members, got " + std::to_string(train.members()) +
              " and " + std::to_string(train.non_members()));
  require(hyper.hidden > 0 && hyper.combiner > 0 && hyper.epochs > 0 && hyper.lr > 0, ErrorKind::validation,
          "attack hyperparameters must be positive");

  AttackModel m;
  m.layout_ = train.layout;
  m.hyper_ = hyper;
  const double n = static_cast<double>(train.examples.size());
  for (std::size_t s = 0; s < train.layout.size(); ++s) {
    const auto width = train.layout[s].size();
    std::vector<double> sum(width, 0.0), sq(width, 0.0);
    for (const auto& ex : train.examples)
      for (std::size_t j = 0; j < width; ++j) {
        sum[j] += ex.sources[s][j];
        sq[j] += static_cast<double>(ex.sources[s][j]) * ex.sources[s][j];
      }
    std::vector<float> mean(width), inv(width);
    for (std::size_t j = 0; j < width; ++j) {
      const double mu = sum[j] / n;
      const double sd = std::sqrt(std::max(0.0, sq[j] / n - mu * mu));
      mean[j] = static_cast<float>(mu);
      inv[j] = sd > 1e-6 ? static_cast<float>(1.0 / sd) : 1.0f;
    }
    m.mean_.push_back(std::move(mean));
    m.inv_scale_.push_back(std::move(inv));

    const auto& src = train.layout[s];
    std::vector<LayerKind> kinds;
    Dims input{1, 1, width};
    if (src.kind == SourceKind::gradient && hyper.conv_gradients) {
      input = {src.rows, 1, src.cols};
      kinds.push_back(Convolutional{1, 1, 1, 0, Activation::linear});
    }
    kinds.push_back(Connected{hyper.hidden, Activation::relu});
    auto enc = build_network<float>(input, kinds, 2, hyper.lr, hash_combine(hyper.seed, s + 1));
    initialize_parameters(enc);
    m.encoders_.push_back(std::move(enc));
  }
  m.combiner_ = build_network<float>(
      {1, 1, hyper.hidden * train.layout.size()},
      {Connected{hyper.combiner, Activation::relu}, Connected{2, Activation::linear}, Softmax{}, Cost{}}, 2, hyper.lr,
      hash_combine(hyper.seed, 0));
  initialize_parameters(m.combiner_);

  std::vector<std::vector<Tensor>> inputs;
  for (const auto& ex : train.examples) inputs.push_back(m.inputs(ex));
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(hash_combine(hyper.seed, 0x6f72646572));
  for (std::size_t e = 0; e < hyper.epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (auto i : order) m.step(inputs[i], train.examples[i].member);
  }
  return m;
}

inline AttackMetrics evaluate_attack(AttackModel& model, const AttackData& eval) {
  std::vector<bool> members;
  for (const auto& ex : eval.examples) members.push_back(ex.member);
  return score_metrics(model.scores(eval), members);
}

}  // namespace dtz
