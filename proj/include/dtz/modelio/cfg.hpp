#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dtz/common/error.hpp"
#include "dtz/nncore/network.hpp"

namespace dtz {

// Architecture text format. Sections are `[name]` lines followed by `key=value`
// lines; `#` and `;` start comments. The first section is [net]:
//
//   [net]            height, width, channels, classes, learning_rate, seed
//   [convolutional]  filters, size, stride=1, pad=0, activation=linear|relu
//   [connected]      output, activation=linear|relu
//   [maxpool]        size, stride=1
//   [dropout]        probability
//   [softmax]
//   [cost]           type=cross_entropy
//
// `pad` is an explicit pixel count on each border.

struct CfgSection {
  std::string name;
  std::size_t line = 0;
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<std::size_t> entry_lines;
};

struct CfgDocument {
  std::vector<CfgSection> sections;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

class SectionReader {
 public:
  explicit SectionReader(const CfgSection& s) : s_(s), used_(s.entries.size(), false) {}

  const std::string* find(std::string_view key) {
    for (std::size_t i = 0; i < s_.entries.size(); ++i)
      if (s_.entries[i].first == key) {
        used_[i] = true;
        return &s_.entries[i].second;
      }
    return nullptr;
  }

  template <typename V>
  V number(std::string_view key, std::optional<V> fallback = std::nullopt) {
    const auto* raw = find(key);
    if (!raw) {
      if (fallback) return *fallback;
      fail(ErrorKind::parse, "line " + std::to_string(s_.line) + ": [" + s_.name + "] missing required key '" +
                                 std::string(key) + "'");
    }
    V v{};
    const auto* first = raw->data();
    const auto* last = raw->data() + raw->size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last)
      fail(ErrorKind::parse, "line " + std::to_string(line_of(key)) + ": invalid value '" + *raw + "' for '" +
                                 std::string(key) + "'");
    return v;
  }

  Activation activation() {
    const auto* raw = find("activation");
    if (!raw || *raw == "linear") return Activation::linear;
    if (*raw == "relu") return Activation::relu;
    fail(ErrorKind::parse, "line " + std::to_string(line_of("activation")) + ": unknown activation '" + *raw + "'");
  }

  void finish() const {
    for (std::size_t i = 0; i < used_.size(); ++i)
      if (!used_[i])
        fail(ErrorKind::parse, "line " + std::to_string(s_.entry_lines[i]) + ": unknown key '" +
                                   s_.entries[i].first + "' in [" + s_.name + "]");
  }

 private:
  std::size_t line_of(std::string_view key) const {
    for (std::size_t i = 0; i < s_.entries.size(); ++i)
      if (s_.entries[i].first == key) return s_.entry_lines[i];
    return s_.line;
  }

  const CfgSection& s_;
  std::vector<bool> used_;
};

}  // namespace detail

inline CfgDocument parse_cfg_document(std::string_view text) {
  CfgDocument doc;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto c = raw.find_first_of("#;"); c != std::string_view::npos) raw = raw.substr(0, c);
    const auto line = detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": malformed section header");
      doc.sections.push_back({std::string(detail::trim(line.substr(1, line.size() - 2))), line_no, {}, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": expected key=value");
    if (doc.sections.empty())
      fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": key outside of any section");
    auto& sec = doc.sections.back();
    std::string key(detail::trim(line.substr(0, eq)));
    for (const auto& [k, v] : sec.entries)
      if (k == key) fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    sec.entries.emplace_back(std::move(key), std::string(detail::trim(line.substr(eq + 1))));
    sec.entry_lines.push_back(line_no);
  }
  return doc;
}

/// Checks the classifier invariants a cfg-described network must satisfy.
template <typename T>
void validate_classifier(const Network<T>& net) {
  require(!net.layers.empty(), ErrorKind::validation, "no layers");
  const auto n = net.layers.size();
  require(n >= 2 && std::holds_alternative<Softmax>(net.layers[n - 2].kind) &&
              std::holds_alternative<Cost>(net.layers[n - 1].kind),
          ErrorKind::validation, "network must end with [softmax] then [cost]");
  require(net.layers[n - 2].input_shape.count() == net.class_count, ErrorKind::validation,
          "softmax width " + std::to_string(net.layers[n - 2].input_shape.count()) + " does not match classes=" +
              std::to_string(net.class_count));
}

/// Parses architecture text into a network with seeded initial parameters
/// (or zeroed ones when `initialize` is false).
inline Network<float> parse_cfg(std::string_view text, bool initialize = true) {
  const auto doc = parse_cfg_document(text);
  require(!doc.sections.empty() && doc.sections.front().name == "net", ErrorKind::parse,
          "line " + std::to_string(doc.sections.empty() ? 1 : doc.sections.front().line) +
              ": first section must be [net]");

  detail::SectionReader head(doc.sections.front());
  const Dims input{head.number<std::size_t>("height"), head.number<std::size_t>("width"),
                   head.number<std::size_t>("channels")};
  const auto classes = head.number<std::size_t>("classes");
  const auto lr = head.number<float>("learning_rate", 0.01f);
  const auto seed = head.number<std::uint64_t>("seed", 0);
  head.finish();
  require(input.count() > 0, ErrorKind::validation, "input dimensions must be positive");
  require(lr > 0.0f, ErrorKind::validation, "learning_rate must be positive");

  std::vector<LayerKind> kinds;
  for (std::size_t i = 1; i < doc.sections.size(); ++i) {
    const auto& sec = doc.sections[i];
    detail::SectionReader r(sec);
    if (sec.name == "convolutional") {
      Convolutional k;
      k.filters = r.number<std::size_t>("filters");
      k.size = r.number<std::size_t>("size");
      k.stride = r.number<std::size_t>("stride", 1);
      k.pad = r.number<std::size_t>("pad", 0);
      k.activation = r.activation();
      kinds.emplace_back(k);
    } else if (sec.name == "connected") {
      Connected k;
      k.units = r.number<std::size_t>("output");
      k.activation = r.activation();
      kinds.emplace_back(k);
    } else if (sec.name == "maxpool") {
      Maxpool k;
      k.size = r.number<std::size_t>("size");
      k.stride = r.number<std::size_t>("stride", 1);
      kinds.emplace_back(k);
    } else if (sec.name == "dropout") {
      kinds.emplace_back(Dropout{r.number<float>("probability")});
    } else if (sec.name == "softmax") {
      kinds.emplace_back(Softmax{});
    } else if (sec.name == "cost") {
      if (const auto* type = r.find("type"); type && *type != "cross_entropy")
        fail(ErrorKind::parse, "line " + std::to_string(sec.line) + ": unsupported cost type '" + *type + "'");
      kinds.emplace_back(Cost{});
    } else {
      fail(ErrorKind::parse, "line " + std::to_string(sec.line) + ": unknown section [" + sec.name + "]");
    }
    r.finish();
    try {
      validate_kind(kinds.back());
    } catch (const Error& e) {
      fail(ErrorKind::validation, "line " + std::to_string(sec.line) + ": " + e.what());
    }
  }
  require(!kinds.empty(), ErrorKind::validation, "no layers");

  auto net = build_network<float>(input, kinds, classes, lr, seed);
  validate_classifier(net);
  if (initialize) initialize_parameters(net);
  return net;
}

namespace detail {
template <typename V>
std::string shortest(V v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}
}  // namespace detail

/// Emits cfg text that parse_cfg maps back to the same architecture.
template <typename T>
std::string emit_cfg(const Network<T>& net) {
  std::ostringstream os;
  os << "[net]\nheight=" << net.input_shape.h << "\nwidth=" << net.input_shape.w
     << "\nchannels=" << net.input_shape.c << "\nclasses=" << net.class_count
     << "\nlearning_rate=" << detail::shortest(net.learning_rate) << "\nseed=" << net.seed << "\n";
  auto act = [](Activation a) { return a == Activation::relu ? "relu" : "linear"; };
  for (const auto& l : net.layers) {
    os << "\n[" << kind_name(l.kind) << "]\n";
    std::visit(
        [&](const auto& k) {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Convolutional>) {
            os << "filters=" << k.filters << "\nsize=" << k.size << "\nstride=" << k.stride << "\npad=" << k.pad
               << "\nactivation=" << act(k.activation) << "\n";
          } else if constexpr (std::is_same_v<K, Connected>) {
            os << "output=" << k.units << "\nactivation=" << act(k.activation) << "\n";
          } else if constexpr (std::is_same_v<K, Maxpool>) {
            os << "size=" << k.size << "\nstride=" << k.stride << "\n";
          } else if constexpr (std::is_same_v<K, Dropout>) {
            os << "probability=" << detail::shortest(k.rate) << "\n";
          } else if constexpr (std::is_same_v<K, Cost>) {
            os << "type=cross_entropy\n";
          }
        },
        l.kind);
  }
  return os.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Network<float> load_cfg(const std::string& path) { return parse_cfg(read_text_file(path)); }

}  // namespace dtz
