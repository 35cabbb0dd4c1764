#pragma once

#include <concepts>
#include <memory>
#include <optional>
#include <stdexcept>

#include <openssl/evp.h>
#include <openssl/hmac.h>

#include "dsg/bytes.hpp"

namespace dsg {

/// Anything with a static digest(ByteView) -> Digest can back a ledger.
template <typename H>
concept DigestFunction = requires(ByteView b) {
  { H::digest(b) } -> std::same_as<Digest>;
};

namespace detail {

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};
struct CipherCtxDeleter {
  void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
};

[[noreturn]] inline void openssl_failure(const char* what) {
  throw std::runtime_error(std::string("openssl: ") + what);
}

}  // namespace detail

struct Sha256 {
  static Digest digest(ByteView data) {
    // Fetching the algorithm on every call dominates small digests.
    static EVP_MD* const md = EVP_MD_fetch(nullptr, "SHA256", nullptr);
    thread_local std::unique_ptr<EVP_MD_CTX, detail::MdCtxDeleter> ctx(EVP_MD_CTX_new());
    Digest d;
    unsigned int len = 0;
    if (!md || !ctx || EVP_DigestInit_ex(ctx.get(), md, nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), d.bytes.data(), &len) != 1 || len != Digest::size)
      detail::openssl_failure("EVP_Digest");
    return d;
  }
};

/// Incremental SHA-256, used for the event-log determinism digest.
class Sha256Stream {
 public:
  Sha256Stream() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      detail::openssl_failure("EVP_DigestInit_ex");
  }

  void update(ByteView data) {
    if (EVP_DigestUpdate(ctx_.get(), data.data(), data.size()) != 1)
      detail::openssl_failure("EVP_DigestUpdate");
  }
  void update(std::string_view s) {
    update(ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

  /// Digest of everything so far; the stream stays usable.
  Digest peek() const {
    std::unique_ptr<EVP_MD_CTX, detail::MdCtxDeleter> copy(EVP_MD_CTX_new());
    if (!copy || EVP_MD_CTX_copy_ex(copy.get(), ctx_.get()) != 1)
      detail::openssl_failure("EVP_MD_CTX_copy_ex");
    Digest d;
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(copy.get(), d.bytes.data(), &len) != 1)
      detail::openssl_failure("EVP_DigestFinal_ex");
    return d;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, detail::MdCtxDeleter> ctx_;
};

inline Digest hmac_sha256(ByteView key, ByteView data) {
  Digest d;
  unsigned int len = 0;
  if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
            d.bytes.data(), &len) ||
      len != Digest::size)
    detail::openssl_failure("HMAC");
  return d;
}

inline constexpr std::size_t kAeadKeySize = 32;
inline constexpr std::size_t kAeadNonceSize = 12;
inline constexpr std::size_t kAeadTagSize = 16;

struct SealedBox {
  Bytes body;
  Bytes tag;
};

/// AES-256-GCM. `aad` is authenticated but not encrypted.
inline SealedBox aead_seal(ByteView key, ByteView nonce, ByteView aad, ByteView plaintext) {
  if (key.size() != kAeadKeySize || nonce.size() != kAeadNonceSize)
    throw std::invalid_argument("aead_seal: bad key or nonce length");
  std::unique_ptr<EVP_CIPHER_CTX, detail::CipherCtxDeleter> ctx(EVP_CIPHER_CTX_new());
  if (!ctx) detail::openssl_failure("EVP_CIPHER_CTX_new");
  if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()) != 1)
    detail::openssl_failure("EVP_EncryptInit_ex");
  int len = 0;
  if (!aad.empty() &&
      EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) != 1)
    detail::openssl_failure("EVP_EncryptUpdate(aad)");
  SealedBox box;
  box.body.resize(plaintext.size());
  if (!plaintext.empty() &&
      EVP_EncryptUpdate(ctx.get(), box.body.data(), &len, plaintext.data(),
                        static_cast<int>(plaintext.size())) != 1)
    detail::openssl_failure("EVP_EncryptUpdate");
  if (EVP_EncryptFinal_ex(ctx.get(), box.body.data() + plaintext.size(), &len) != 1)
    detail::openssl_failure("EVP_EncryptFinal_ex");
  box.tag.resize(kAeadTagSize);
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, static_cast<int>(kAeadTagSize),
                          box.tag.data()) != 1)
    detail::openssl_failure("EVP_CTRL_GCM_GET_TAG");
  return box;
}

/// Returns nullopt when the tag does not verify.
inline std::optional<Bytes> aead_open(ByteView key, ByteView nonce, ByteView aad, ByteView body,
                                      ByteView tag) {
  if (key.size() != kAeadKeySize || nonce.size() != kAeadNonceSize || tag.size() != kAeadTagSize)
    return std::nullopt;
  std::unique_ptr<EVP_CIPHER_CTX, detail::CipherCtxDeleter> ctx(EVP_CIPHER_CTX_new());
  if (!ctx) detail::openssl_failure("EVP_CIPHER_CTX_new");
  if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()) != 1)
    detail::openssl_failure("EVP_DecryptInit_ex");
  int len = 0;
  if (!aad.empty() &&
      EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) != 1)
    return std::nullopt;
  Bytes out(body.size());
  if (!body.empty() &&
      EVP_DecryptUpdate(ctx.get(), out.data(), &len, body.data(), static_cast<int>(body.size())) != 1)
    return std::nullopt;
  Bytes tag_copy(tag.begin(), tag.end());
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, static_cast<int>(kAeadTagSize),
                          tag_copy.data()) != 1)
    return std::nullopt;
  if (EVP_DecryptFinal_ex(ctx.get(), out.data() + out.size(), &len) != 1) return std::nullopt;
  return out;
}

}  // namespace dsg
