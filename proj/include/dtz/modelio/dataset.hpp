#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "dtz/common/bytes.hpp"
#include "dtz/common/error.hpp"
#include "dtz/modelio/weights.hpp"
#include "dtz/nncore/rng.hpp"
#include "dtz/nncore/tensor.hpp"

namespace dtz {

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct Sample {
  Tensor image;
  std::size_t label = 0;
};

/// Class-template images: each class owns a smooth random pattern, every image adds
/// independent Gaussian pixel noise, and a fraction of training labels is flipped.
struct SyntheticSpec {
  std::size_t train = 1000;
  std::size_t test = 1000;
  std::size_t classes = 10;
  std::uint64_t seed = 1;
  Dims shape{32, 32, 3};
  float signal = 0.25f;
  float noise = 0.25f;
  float label_noise = 0.0f;
};

struct CifarSource {
  std::filesystem::path dir;
  bool hundred = false;
  std::size_t limit = 0;  // 0 keeps every record
  std::uint64_t seed = 0;
};

struct DatasetHandle {
  std::variant<SyntheticSpec, CifarSource> source;

  Dims shape() const {
    if (const auto* s = std::get_if<SyntheticSpec>(&source)) return s->shape;
    return {32, 32, 3};
  }
  std::size_t class_count() const {
    if (const auto* s = std::get_if<SyntheticSpec>(&source)) return s->classes;
    return std::get<CifarSource>(source).hundred ? 100 : 10;
  }
  std::uint64_t seed() const {
    if (const auto* s = std::get_if<SyntheticSpec>(&source)) return s->seed;
    return std::get<CifarSource>(source).seed;
  }
};

/// Materialized split. Pixels are kept as bytes for file-backed data and regenerated on
/// demand for synthetic data, so large splits stay compact.
class Dataset {
 public:
  Dims shape() const { return shape_; }
  std::size_t class_count() const { return classes_; }
  std::size_t size() const { return order_.size(); }
  std::size_t label(std::size_t i) const { return labels_.at(order_.at(i)); }
  const std::vector<std::size_t>& order() const { return order_; }

  Sample at(std::size_t i) const {
    const auto r = order_.at(i);
    Tensor img = Tensor::of(shape_);
    if (synthetic_) {
      render_synthetic(r, img);
    } else {
      const auto n = shape_.count();
      const auto* px = pixels_.data() + r * n;
      // CIFAR stores planes (all R, then G, then B); tensors are channel-last.
      const auto plane = shape_.h * shape_.w;
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < shape_.c; ++c) img[p * shape_.c + c] = px[c * plane + p] / 255.0f;
    }
    return {std::move(img), labels_[r]};
  }

  /// Restricts to the listed positions (in current order).
  Dataset subset(const std::vector<std::size_t>& positions) const {
    Dataset d = *this;
    d.order_.clear();
    for (auto p : positions) d.order_.push_back(order_.at(p));
    return d;
  }

  static Dataset from_cifar_bytes(std::span<const std::uint8_t> bytes, bool hundred) {
    const std::size_t label_bytes = hundred ? 2 : 1;
    const std::size_t record = label_bytes + 3072;
    require(bytes.size() % record == 0, ErrorKind::format,
            "CIFAR file length " + std::to_string(bytes.size()) + " is not a multiple of the " +
                std::to_string(record) + "-byte record (record " + std::to_string(bytes.size() / record) +
                " is incomplete)");
    Dataset d;
    d.shape_ = {32, 32, 3};
    d.classes_ = hundred ? 100 : 10;
    const auto n = bytes.size() / record;
    d.labels_.reserve(n);
    d.pixels_.reserve(n * 3072);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* rec = bytes.data() + i * record;
      const std::size_t label = rec[label_bytes - 1];  // CIFAR-100: coarse byte first, fine byte second
      require(label < d.classes_, ErrorKind::format,
              "record " + std::to_string(i) + " has label " + std::to_string(label) + " >= " +
                  std::to_string(d.classes_));
      d.labels_.push_back(label);
      d.pixels_.insert(d.pixels_.end(), rec + label_bytes, rec + record);
    }
    d.order_.resize(n);
    std::iota(d.order_.begin(), d.order_.end(), 0);
    return d;
  }

  static Dataset synthetic(const SyntheticSpec& spec, Split split) {
    require(spec.classes >= 2, ErrorKind::validation, "synthetic data needs at least 2 classes");
    require(spec.shape.count() > 0, ErrorKind::validation, "synthetic image shape must be positive");
    Dataset d;
    d.synthetic_ = true;
    d.spec_ = spec;
    d.split_ = split;
    d.shape_ = spec.shape;
    d.classes_ = spec.classes;
    const auto n = split == Split::train ? spec.train : spec.test;
    const auto salt = hash_combine(spec.seed, split == Split::train ? 0x7472 : 0x7465);
    Rng rng(salt);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t y = i % spec.classes;
      if (split == Split::train && rng.uniform() < spec.label_noise) y = rng.below(spec.classes);
      d.labels_.push_back(y);
    }
    d.order_.resize(n);
    std::iota(d.order_.begin(), d.order_.end(), 0);
    d.templates_ = make_templates(spec);
    return d;
  }

  void shuffle(std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(order_.begin(), order_.end());
  }

 private:
  static std::vector<float> make_templates(const SyntheticSpec& s) {
    constexpr int kWaves = 4;
    constexpr double kTwoPi = 6.283185307179586;
    std::vector<float> t(s.classes * s.shape.count());
    for (std::size_t k = 0; k < s.classes; ++k) {
      Rng rng(hash_combine(s.seed, 0x746d70 + k));
      struct Wave {
        double fy, fx, phase, amp[8];
      };
      std::vector<Wave> waves(kWaves);
      for (auto& w : waves) {
        w.fy = rng.uniform(0.5f, 3.0f);
        w.fx = rng.uniform(0.5f, 3.0f);
        w.phase = rng.uniform(0.0f, static_cast<float>(kTwoPi));
        for (auto& a : w.amp) a = rng.uniform(-1.0f, 1.0f);
      }
      float* out = t.data() + k * s.shape.count();
      for (std::size_t y = 0; y < s.shape.h; ++y)
        for (std::size_t x = 0; x < s.shape.w; ++x)
          for (std::size_t c = 0; c < s.shape.c; ++c) {
            double v = 0;
            for (const auto& w : waves)
              v += w.amp[c % 8] * std::sin(kTwoPi * (w.fy * y / s.shape.h + w.fx * x / s.shape.w) + w.phase);
            out[(y * s.shape.w + x) * s.shape.c + c] = static_cast<float>(v / std::sqrt(double(kWaves)));
          }
    }
    return t;
  }

  void render_synthetic(std::size_t r, Tensor& img) const {
    // The template is picked by the clean class, so flipped labels carry no signal.
    Rng rng(hash_combine(hash_combine(spec_.seed, split_ == Split::train ? 1 : 2), r));
    const auto clean = r % classes_;
    const float* t = templates_.data() + clean * shape_.count();
    for (std::size_t i = 0; i < img.size(); ++i) {
      const float v = 0.5f + spec_.signal * t[i] + spec_.noise * static_cast<float>(rng.normal());
      img[i] = std::clamp(v, 0.0f, 1.0f);
    }
  }

  Dims shape_;
  std::size_t classes_ = 0;
  std::vector<std::size_t> labels_;
  std::vector<std::size_t> order_;
  std::vector<std::uint8_t> pixels_;
  bool synthetic_ = false;
  SyntheticSpec spec_;
  Split split_ = Split::train;
  std::vector<float> templates_;
};

/// Parses "synthetic:n=..,test=..,classes=..,seed=..,h=..,w=..,c=..,signal=..,noise=..,label_noise=.."
/// or "cifar10:<dir>[,n=..,seed=..]" / "cifar100:<dir>[,...]".
inline DatasetHandle parse_dataset_spec(const std::string& text) {
  const auto colon = text.find(':');
  const std::string scheme = text.substr(0, colon);
  std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
  std::vector<std::string> parts;
  for (std::size_t p = 0; p <= rest.size();) {
    auto q = rest.find(',', p);
    if (q == std::string::npos) q = rest.size();
    if (q > p) parts.push_back(rest.substr(p, q - p));
    p = q + 1;
  }
  std::map<std::string, std::string> kv;
  std::string positional;
  for (const auto& part : parts) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) {
      require(positional.empty(), ErrorKind::parse, "dataset spec has more than one path: '" + text + "'");
      positional = part;
    } else {
      kv[part.substr(0, eq)] = part.substr(eq + 1);
    }
  }
  auto take = [&](const std::string& key, auto fallback) {
    using V = decltype(fallback);
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    V v{};
    const auto& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc{} && ptr == s.data() + s.size(), ErrorKind::parse,
            "dataset spec: invalid value '" + s + "' for '" + key + "'");
    kv.erase(it);
    return v;
  };

  DatasetHandle h;
  if (scheme == "synthetic") {
    SyntheticSpec s;
    s.train = take("n", s.train);
    s.test = take("test", s.test);
    s.classes = take("classes", s.classes);
    s.seed = take("seed", s.seed);
    s.shape.h = take("h", s.shape.h);
    s.shape.w = take("w", s.shape.w);
    s.shape.c = take("c", s.shape.c);
    s.signal = take("signal", s.signal);
    s.noise = take("noise", s.noise);
    s.label_noise = take("label_noise", s.label_noise);
    require(positional.empty(), ErrorKind::parse, "synthetic dataset takes no path");
    h.source = s;
  } else if (scheme == "cifar10" || scheme == "cifar100") {
    CifarSource c;
    c.hundred = scheme == "cifar100";
    require(!positional.empty(), ErrorKind::parse, scheme + " dataset needs a directory");
    c.dir = positional;
    c.limit = take("n", std::size_t{0});
    c.seed = take("seed", std::uint64_t{0});
    h.source = c;
  } else {
    fail(ErrorKind::parse, "unknown dataset scheme '" + scheme + "'");
  }
  require(kv.empty(), ErrorKind::parse, "dataset spec: unknown key '" + (kv.empty() ? "" : kv.begin()->first) + "'");
  return h;
}

namespace detail {

inline std::vector<std::filesystem::path> cifar_files(const CifarSource& c, Split split) {
  if (c.hundred) return {c.dir / (split == Split::train ? "train.bin" : "test.bin")};
  if (split == Split::test) return {c.dir / "test_batch.bin"};
  std::vector<std::filesystem::path> out;
  for (int i = 1; i <= 5; ++i) out.push_back(c.dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return out;
}

}  // namespace detail

/// Loads one split. File-backed splits are shuffled by the handle's seed when it is
/// non-zero and then truncated to the limit; synthetic splits keep generation order.
inline Dataset load_dataset(const DatasetHandle& h, Split split) {
  if (const auto* s = std::get_if<SyntheticSpec>(&h.source)) return Dataset::synthetic(*s, split);
  const auto& c = std::get<CifarSource>(h.source);
  Bytes all;
  for (const auto& f : detail::cifar_files(c, split)) {
    auto b = read_binary_file(f.string());
    const std::size_t record = c.hundred ? 3074 : 3073;
    require(b.size() % record == 0, ErrorKind::format,
            f.string() + ": length " + std::to_string(b.size()) + " is not a multiple of " +
                std::to_string(record) + " (record " + std::to_string(b.size() / record) + " is incomplete)");
    all.insert(all.end(), b.begin(), b.end());
  }
  auto d = Dataset::from_cifar_bytes(all, c.hundred);
  if (c.seed != 0) d.shuffle(c.seed);
  if (c.limit != 0 && c.limit < d.size()) {
    std::vector<std::size_t> keep(c.limit);
    std::iota(keep.begin(), keep.end(), 0);
    d = d.subset(keep);
  }
  return d;
}

}  // namespace dtz
