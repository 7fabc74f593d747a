#pragma once

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include <array>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "dtz/common/bytes.hpp"
#include "dtz/common/error.hpp"
#include "dtz/modelio/weights.hpp"

namespace dtz {

// .dtzs layout (little-endian):
//   header: "DTZS" | u32 version | u32 boundary | u32 layer count | u32 record count | u8[16] file id
//   u64 prefix length | prefix (.dtzw bytes for trainable layers 1..boundary)
//   per sealed trainable layer: u32 layer index | u8[12] nonce | u64 ciphertext length | ciphertext | u8[16] tag
//
// Each record is AES-128-GCM over (u64 weight count | u64 bias count | f32 weights | f32 biases)
// with associated data header ‖ u32 record position ‖ u32 layer index ‖ SHA-256(prefix), so the
// cleartext prefix cannot be altered without every record failing authentication.

inline constexpr std::array<std::uint8_t, 4> kSealedMagic = {'D', 'T', 'Z', 'S'};
inline constexpr std::uint32_t kSealedVersion = 1;
inline constexpr std::size_t kSealedHeaderSize = 4 + 4 + 4 + 4 + 4 + 16;
inline constexpr std::size_t kNonceSize = 12;
inline constexpr std::size_t kTagSize = 16;

using Key128 = std::array<std::uint8_t, 16>;
using Nonce = std::array<std::uint8_t, kNonceSize>;
using Tag = std::array<std::uint8_t, kTagSize>;

inline Key128 key_from_bytes(std::span<const std::uint8_t> raw) {
  require(raw.size() == 16, ErrorKind::authentication,
          "key must be exactly 16 bytes, got " + std::to_string(raw.size()));
  Key128 k;
  std::copy(raw.begin(), raw.end(), k.begin());
  return k;
}

inline Key128 load_key(const std::string& path) {
  auto raw = read_binary_file(path);
  auto k = key_from_bytes(raw);
  OPENSSL_cleanse(raw.data(), raw.size());
  return k;
}

inline Key128 random_key() {
  Key128 k;
  require(RAND_bytes(k.data(), static_cast<int>(k.size())) == 1, ErrorKind::integrity, "RAND_bytes failed");
  return k;
}

/// Wipes key material on destruction.
class KeyHandle {
 public:
  KeyHandle() = default;
  explicit KeyHandle(const Key128& k) : key_(k), present_(true) {}
  KeyHandle(const KeyHandle&) = delete;
  KeyHandle& operator=(const KeyHandle&) = delete;
  KeyHandle(KeyHandle&& o) noexcept : key_(o.key_), present_(o.present_) { o.clear(); }
  KeyHandle& operator=(KeyHandle&& o) noexcept {
    if (this != &o) {
      key_ = o.key_;
      present_ = o.present_;
      o.clear();
    }
    return *this;
  }
  ~KeyHandle() { clear(); }

  bool present() const { return present_; }
  const Key128& get() const {
    require(present_, ErrorKind::state, "no key loaded");
    return key_;
  }
  void clear() {
    OPENSSL_cleanse(key_.data(), key_.size());
    present_ = false;
  }

 private:
  Key128 key_{};
  bool present_ = false;
};

namespace detail {

struct CipherCtxDeleter {
  void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter>;

inline CipherCtx new_ctx() {
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  require(ctx != nullptr, ErrorKind::integrity, "EVP_CIPHER_CTX_new failed");
  return ctx;
}

inline Bytes gcm_encrypt(const Key128& key, const Nonce& nonce, std::span<const std::uint8_t> aad,
                         std::span<const std::uint8_t> plain, Tag& tag) {
  auto ctx = new_ctx();
  Bytes out(plain.size());
  int len = 0;
  bool ok = EVP_EncryptInit_ex(ctx.get(), EVP_aes_128_gcm(), nullptr, nullptr, nullptr) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, kNonceSize, nullptr) == 1 &&
            EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) == 1 &&
            EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) == 1 &&
            EVP_EncryptUpdate(ctx.get(), out.data(), &len, plain.data(), static_cast<int>(plain.size())) == 1 &&
            EVP_EncryptFinal_ex(ctx.get(), out.data() + len, &len) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kTagSize, tag.data()) == 1;
  require(ok, ErrorKind::integrity, "AES-GCM encryption failed");
  return out;
}

/// Returns false on authentication failure; `out` is wiped in that case.
inline bool gcm_decrypt(const Key128& key, const Nonce& nonce, std::span<const std::uint8_t> aad,
                        std::span<const std::uint8_t> cipher, const Tag& tag, Bytes& out) {
  auto ctx = new_ctx();
  out.assign(cipher.size(), 0);
  int len = 0;
  Tag t = tag;
  bool ok = EVP_DecryptInit_ex(ctx.get(), EVP_aes_128_gcm(), nullptr, nullptr, nullptr) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, kNonceSize, nullptr) == 1 &&
            EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) == 1 &&
            EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) == 1 &&
            EVP_DecryptUpdate(ctx.get(), out.data(), &len, cipher.data(), static_cast<int>(cipher.size())) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kTagSize, t.data()) == 1 &&
            EVP_DecryptFinal_ex(ctx.get(), out.data() + len, &len) == 1;
  if (!ok) {
    OPENSSL_cleanse(out.data(), out.size());
    out.clear();
  }
  return ok;
}

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest d;
  unsigned int n = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), d.data(), &n, EVP_sha256(), nullptr) == 1 && n == d.size(),
          ErrorKind::integrity, "SHA-256 failed");
  return d;
}

inline Bytes record_aad(std::span<const std::uint8_t> header, std::uint32_t position, std::uint32_t layer,
                        const Digest& prefix) {
  ByteWriter w;
  w.put_bytes(header);
  w.put<std::uint32_t>(position);
  w.put<std::uint32_t>(layer);
  w.put_bytes(prefix);
  return std::move(w).take();
}

inline Bytes encode_layer_plaintext(const LayerParams& p) {
  ByteWriter w;
  w.put<std::uint64_t>(p.weights.size());
  w.put<std::uint64_t>(p.biases.size());
  w.put_array<float>(p.weights);
  w.put_array<float>(p.biases);
  return std::move(w).take();
}

}  // namespace detail

struct SealedRecord {
  std::uint32_t layer = 0;
  Nonce nonce{};
  Bytes ciphertext;
  Tag tag{};
};

/// Parsed container; the suffix is still encrypted.
struct SealedModelFile {
  std::uint32_t boundary = 0;
  std::uint32_t layer_count = 0;
  std::array<std::uint8_t, 16> file_id{};
  Bytes header;  // exact header bytes, bound into every record's associated data
  std::vector<LayerParams> prefix;
  detail::Digest prefix_digest{};  // over the prefix bytes as stored
  std::vector<SealedRecord> records;
};

/// Builds a container from detached parameters: `prefix` is stored in the clear,
/// every `suffix` record is encrypted under `key` with a fresh nonce.
inline Bytes seal_params(std::size_t boundary, std::size_t layer_count, const std::vector<LayerParams>& prefix,
                         const std::vector<LayerParams>& suffix, const Key128& key) {
  require(boundary < layer_count, ErrorKind::contract,
          "boundary " + std::to_string(boundary) + " leaves nothing to seal in a " + std::to_string(layer_count) +
              "-layer network");
  std::array<std::uint8_t, 16> file_id;
  require(RAND_bytes(file_id.data(), static_cast<int>(file_id.size())) == 1, ErrorKind::integrity,
          "RAND_bytes failed");
  ByteWriter hw;
  hw.put_bytes(kSealedMagic);
  hw.put<std::uint32_t>(kSealedVersion);
  hw.put<std::uint32_t>(static_cast<std::uint32_t>(boundary));
  hw.put<std::uint32_t>(static_cast<std::uint32_t>(layer_count));
  hw.put<std::uint32_t>(static_cast<std::uint32_t>(suffix.size()));
  hw.put_bytes(file_id);
  const Bytes header = hw.bytes();

  ByteWriter w;
  w.put_bytes(header);
  const auto prefix_bytes = encode_weights(prefix);
  const auto digest = detail::sha256(prefix_bytes);
  w.put<std::uint64_t>(prefix_bytes.size());
  w.put_bytes(prefix_bytes);

  std::set<Nonce> used;
  for (std::uint32_t pos = 0; pos < suffix.size(); ++pos) {
    const auto& p = suffix[pos];
    Nonce nonce;
    do {
      require(RAND_bytes(nonce.data(), static_cast<int>(nonce.size())) == 1, ErrorKind::integrity,
              "RAND_bytes failed");
    } while (!used.insert(nonce).second);
    auto plain = detail::encode_layer_plaintext(p);
    Tag tag;
    const auto ct = detail::gcm_encrypt(key, nonce, detail::record_aad(header, pos, p.index, digest), plain, tag);
    OPENSSL_cleanse(plain.data(), plain.size());
    w.put<std::uint32_t>(p.index);
    w.put_bytes(nonce);
    w.put<std::uint64_t>(ct.size());
    w.put_bytes(ct);
    w.put_bytes(tag);
  }
  return std::move(w).take();
}

/// Seals layers boundary+1..L under `key`; layers 1..boundary are stored in the clear.
inline Bytes seal_layers(const Network<float>& net, std::size_t boundary, const Key128& key) {
  require(net.first_index == 1, ErrorKind::contract, "sealing needs the whole network");
  const std::size_t total = net.layers.size();
  require(boundary < total, ErrorKind::contract,
          "boundary " + std::to_string(boundary) + " leaves nothing to seal in a " + std::to_string(total) +
              "-layer network");
  return seal_params(boundary, total, collect_params(net, {1, boundary}), collect_params(net, {boundary + 1, total}),
                     key);
}

inline Bytes encode_sealed(const SealedModelFile& f) {
  ByteWriter w;
  w.put_bytes(f.header);
  const auto prefix = encode_weights(f.prefix);
  w.put<std::uint64_t>(prefix.size());
  w.put_bytes(prefix);
  for (const auto& r : f.records) {
    w.put<std::uint32_t>(r.layer);
    w.put_bytes(r.nonce);
    w.put<std::uint64_t>(r.ciphertext.size());
    w.put_bytes(r.ciphertext);
    w.put_bytes(r.tag);
  }
  return std::move(w).take();
}

inline SealedModelFile parse_sealed(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  SealedModelFile f;
  const auto header = r.get_bytes(kSealedHeaderSize);
  f.header.assign(header.begin(), header.end());
  ByteReader h(header);
  const auto magic = h.get_bytes(4);
  require(std::equal(magic.begin(), magic.end(), kSealedMagic.begin()), ErrorKind::format,
          "not a sealed model file (bad magic)");
  const auto version = h.get<std::uint32_t>();
  require(version == kSealedVersion, ErrorKind::version,
          "sealed file version " + std::to_string(version) + ", expected " + std::to_string(kSealedVersion));
  f.boundary = h.get<std::uint32_t>();
  f.layer_count = h.get<std::uint32_t>();
  const auto record_count = h.get<std::uint32_t>();
  const auto id = h.get_bytes(16);
  std::copy(id.begin(), id.end(), f.file_id.begin());
  require(f.boundary < f.layer_count, ErrorKind::format, "sealed boundary beyond layer count");

  const auto prefix_len = r.get<std::uint64_t>();
  require(prefix_len <= r.remaining(), ErrorKind::truncated, "prefix length exceeds file");
  const auto prefix_bytes = r.get_bytes(static_cast<std::size_t>(prefix_len));
  f.prefix_digest = detail::sha256(prefix_bytes);
  f.prefix = decode_weights(prefix_bytes);

  for (std::uint32_t i = 0; i < record_count; ++i) {
    SealedRecord rec;
    rec.layer = r.get<std::uint32_t>();
    const auto nonce = r.get_bytes(kNonceSize);
    std::copy(nonce.begin(), nonce.end(), rec.nonce.begin());
    const auto len = r.get<std::uint64_t>();
    require(len <= r.remaining(), ErrorKind::truncated, "record " + std::to_string(i) + " ciphertext truncated");
    const auto ct = r.get_bytes(static_cast<std::size_t>(len));
    rec.ciphertext.assign(ct.begin(), ct.end());
    const auto tag = r.get_bytes(kTagSize);
    std::copy(tag.begin(), tag.end(), rec.tag.begin());
    f.records.push_back(std::move(rec));
  }
  r.expect_end("sealed model file");
  return f;
}

/// Authenticates and decrypts every sealed record. Either all records verify or
/// an authentication error is raised and no plaintext is returned.
inline std::vector<LayerParams> unseal_layers(const SealedModelFile& f, const Key128& key) {
  std::set<Nonce> seen;
  for (const auto& rec : f.records)
    require(seen.insert(rec.nonce).second, ErrorKind::integrity,
            "duplicate nonce in sealed record for layer " + std::to_string(rec.layer));

  std::vector<LayerParams> out;
  auto wipe = [&] {
    for (auto& p : out) {
      OPENSSL_cleanse(p.weights.data(), p.weights.size() * sizeof(float));
      OPENSSL_cleanse(p.biases.data(), p.biases.size() * sizeof(float));
    }
    out.clear();
  };
  for (std::uint32_t pos = 0; pos < f.records.size(); ++pos) {
    const auto& rec = f.records[pos];
    Bytes plain;
    if (!detail::gcm_decrypt(key, rec.nonce, detail::record_aad(f.header, pos, rec.layer, f.prefix_digest),
                             rec.ciphertext,
                             rec.tag, plain)) {
      wipe();
      fail(ErrorKind::authentication, "sealed record " + std::to_string(pos) + " (layer " +
                                          std::to_string(rec.layer) + ") failed authentication");
    }
    try {
      ByteReader r(plain);
      LayerParams p;
      p.index = rec.layer;
      const auto nw = r.get<std::uint64_t>();
      const auto nb = r.get<std::uint64_t>();
      p.weights = r.get_array<float>(nw);
      p.biases = r.get_array<float>(nb);
      r.expect_end("sealed record");
      out.push_back(std::move(p));
    } catch (...) {
      OPENSSL_cleanse(plain.data(), plain.size());
      wipe();
      throw;
    }
    OPENSSL_cleanse(plain.data(), plain.size());
  }
  return out;
}

inline std::vector<LayerParams> unseal_layers(std::span<const std::uint8_t> bytes, const Key128& key) {
  return unseal_layers(parse_sealed(bytes), key);
}

}  // namespace dtz
