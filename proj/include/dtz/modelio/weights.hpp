#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>

#include "dtz/common/bytes.hpp"
#include "dtz/common/error.hpp"
#include "dtz/nncore/network.hpp"

namespace dtz {

// .dtzw layout (little-endian):
//   "DTZW" | u32 version | u32 record count
//   per trainable layer: u32 layer index | u64 weight count | u64 bias count | f32 weights | f32 biases

inline constexpr std::array<std::uint8_t, 4> kWeightsMagic = {'D', 'T', 'Z', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

/// Parameters of one trainable layer, detached from the network.
struct LayerParams {
  std::uint32_t index = 0;
  std::vector<float> weights;
  std::vector<float> biases;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

inline std::vector<LayerParams> collect_params(const Network<float>& net, LayerRange range) {
  std::vector<LayerParams> out;
  for (std::size_t i = range.first; i <= range.last && !range.empty(); ++i) {
    const auto& l = net.layer(i);
    if (!l.trainable()) continue;
    out.push_back({static_cast<std::uint32_t>(i), l.weights.storage(), l.biases.storage()});
  }
  return out;
}

/// Installs detached parameters; the record set must be exactly the trainable layers of `range`.
inline void install_params(Network<float>& net, const std::vector<LayerParams>& params, LayerRange range) {
  std::size_t next = 0;
  for (std::size_t i = range.first; i <= range.last && !range.empty(); ++i) {
    auto& l = net.layer(i);
    if (!l.trainable()) continue;
    require(next < params.size(), ErrorKind::count_mismatch,
            "missing parameters for layer " + std::to_string(i));
    const auto& p = params[next++];
    require(p.index == i, ErrorKind::count_mismatch,
            "parameter record for layer " + std::to_string(p.index) + " where layer " + std::to_string(i) +
                " expected");
    require(p.weights.size() == l.weights.size() && p.biases.size() == l.biases.size(), ErrorKind::count_mismatch,
            "layer " + std::to_string(i) + " expects " + std::to_string(l.weights.size()) + "+" +
                std::to_string(l.biases.size()) + " parameters, record has " + std::to_string(p.weights.size()) +
                "+" + std::to_string(p.biases.size()));
    l.weights.storage() = p.weights;
    l.biases.storage() = p.biases;
  }
  require(next == params.size(), ErrorKind::count_mismatch,
          std::to_string(params.size() - next) + " parameter records do not belong to the layer range");
}

inline Bytes encode_weights(const std::vector<LayerParams>& params) {
  ByteWriter w;
  w.put_bytes(kWeightsMagic);
  w.put<std::uint32_t>(kWeightsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put<std::uint32_t>(p.index);
    w.put<std::uint64_t>(p.weights.size());
    w.put<std::uint64_t>(p.biases.size());
    w.put_array<float>(p.weights);
    w.put_array<float>(p.biases);
  }
  return std::move(w).take();
}

inline std::vector<LayerParams> decode_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.get_bytes(4);
  require(std::equal(magic.begin(), magic.end(), kWeightsMagic.begin()), ErrorKind::format,
          "not a weights file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  require(version == kWeightsVersion, ErrorKind::version,
          "weights version " + std::to_string(version) + ", expected " + std::to_string(kWeightsVersion));
  const auto count = r.get<std::uint32_t>();
  std::vector<LayerParams> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerParams p;
    p.index = r.get<std::uint32_t>();
    const auto nw = r.get<std::uint64_t>();
    const auto nb = r.get<std::uint64_t>();
    p.weights = r.get_array<float>(nw);
    p.biases = r.get_array<float>(nb);
    out.push_back(std::move(p));
  }
  r.expect_end("weights file");
  return out;
}

inline Bytes save_weights(const Network<float>& net) { return encode_weights(collect_params(net, net.all())); }

inline void load_weights(Network<float>& net, std::span<const std::uint8_t> bytes) {
  install_params(net, decode_weights(bytes), net.all());
}

inline Bytes read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_binary_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write to " + path + " failed");
}

}  // namespace dtz
