#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "dsg/bytes.hpp"
#include "dsg/crypto.hpp"
#include "dsg/error.hpp"
#include "dsg/policy.hpp"

namespace dsg {

enum class DataClass : std::uint8_t { Generic, LowFreq, HighFreq };

constexpr std::string_view to_string(DataClass c) {
  switch (c) {
    case DataClass::Generic: return "generic";
    case DataClass::LowFreq: return "lf";
    case DataClass::HighFreq: return "hf";
  }
  return "?";
}

struct SharedKey {
  std::string key_id;
  std::array<std::uint8_t, kAeadKeySize> key_bytes{};
  std::set<std::string> holders;
  bool valid = true;
  DataClass data_class = DataClass::Generic;
  std::string subject;  // device whose data the key protects

  friend bool operator==(const SharedKey&, const SharedKey&) = default;
};

struct Ciphertext {
  std::string key_id;
  std::array<std::uint8_t, kAeadNonceSize> nonce{};
  Bytes body;
  Bytes tag;

  Bytes encode() const {
    ByteWriter w;
    w.str(key_id).raw(nonce).bytes(body).raw(tag);
    return w.take();
  }

  static Ciphertext decode(ByteView in) {
    ByteReader r(in);
    Ciphertext ct;
    ct.key_id = r.str();
    auto n = r.raw(kAeadNonceSize);
    std::copy(n.begin(), n.end(), ct.nonce.begin());
    ct.body = r.bytes();
    ct.tag = r.raw(kAeadTagSize);
    r.expect_done();
    return ct;
  }

  friend bool operator==(const Ciphertext&, const Ciphertext&) = default;
};

inline Ciphertext encrypt(const SharedKey& key, ByteView plaintext,
                          const std::array<std::uint8_t, kAeadNonceSize>& nonce) {
  if (!key.valid) throw Error(Errc::KeyInvalid, key.key_id);
  auto aad = to_bytes(key.key_id);
  auto box = aead_seal(key.key_bytes, nonce, aad, plaintext);
  return Ciphertext{key.key_id, nonce, std::move(box.body), std::move(box.tag)};
}

inline Bytes decrypt(const SharedKey& key, const Ciphertext& ct) {
  if (!key.valid) throw Error(Errc::KeyInvalid, key.key_id);
  if (ct.key_id != key.key_id) throw Error(Errc::AuthFailure, "ciphertext names another key");
  auto aad = to_bytes(ct.key_id);
  auto out = aead_open(key.key_bytes, ct.nonce, aad, ct.body, ct.tag);
  if (!out) throw Error(Errc::AuthFailure, "tag mismatch under " + key.key_id);
  return std::move(*out);
}

/// Deterministic randomness for key material, drawn from the scenario RNG.
class KeySource {
 public:
  explicit KeySource(std::mt19937_64& rng) : rng_(&rng) {}

  Bytes random_bytes(std::size_t n) {
    Bytes out;
    out.reserve(n);
    while (out.size() < n) {
      auto v = (*rng_)();
      for (int i = 0; i < 8 && out.size() < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    return out;
  }

  std::string opaque_id(std::string_view prefix) { return std::string(prefix) + to_hex(random_bytes(8)); }

 private:
  std::mt19937_64* rng_;
};

/// Per-party key store. Copies of one SharedKey live in every holder's table.
class KeyTable {
 public:
  explicit KeyTable(std::string owner = {}) : owner_(std::move(owner)) {
    auto d = Sha256::digest(to_bytes(owner_));
    std::copy_n(d.bytes.begin(), nonce_prefix_.size(), nonce_prefix_.begin());
  }

  const std::string& owner() const { return owner_; }

  void insert(const SharedKey& key) {
    for (const auto& b : bindings_of(key))
      if (bound_.contains(b)) throw Error(Errc::KeyAlreadyBound, key.key_id);
    if (by_id_.contains(key.key_id)) throw Error(Errc::KeyAlreadyBound, key.key_id);
    by_id_[key.key_id] = key;
    if (key.valid)
      for (const auto& b : bindings_of(key)) bound_[b] = key.key_id;
  }

  bool has_binding(const std::string& a, const std::string& b, DataClass c,
                   const std::string& subject) const {
    return bound_.contains(binding(a, b, c, subject));
  }

  const SharedKey* find(const std::string& key_id) const {
    auto it = by_id_.find(key_id);
    return it == by_id_.end() ? nullptr : &it->second;
  }

  const SharedKey& get(const std::string& key_id) const {
    if (auto* k = find(key_id)) return *k;
    throw Error(Errc::UnknownKey, key_id);
  }

  /// Marks the key invalid and drops its bindings. False if unknown or already invalid.
  bool invalidate(const std::string& key_id) {
    auto it = by_id_.find(key_id);
    if (it == by_id_.end() || !it->second.valid) return false;
    it->second.valid = false;
    for (const auto& b : bindings_of(it->second)) {
      auto bit = bound_.find(b);
      if (bit != bound_.end() && bit->second == key_id) bound_.erase(bit);
    }
    return true;
  }

  std::vector<std::string> keys_for_subject(const std::string& subject) const {
    std::vector<std::string> out;
    for (const auto& [id, k] : by_id_)
      if (k.subject == subject && k.valid) out.push_back(id);
    return out;
  }

  /// Encrypts with a nonce unique to (this holder, key).
  Ciphertext seal(const std::string& key_id, ByteView plaintext) {
    const auto& key = get(key_id);
    std::array<std::uint8_t, kAeadNonceSize> nonce{};
    std::copy(nonce_prefix_.begin(), nonce_prefix_.end(), nonce.begin());
    auto counter = ++nonce_counters_[key_id];
    for (int i = 0; i < 8; ++i) nonce[4 + i] = static_cast<std::uint8_t>(counter >> (8 * i));
    return encrypt(key, plaintext, nonce);
  }

  Bytes open(const Ciphertext& ct) const {
    auto* key = find(ct.key_id);
    if (!key) throw Error(Errc::UnknownKey, ct.key_id);
    return decrypt(*key, ct);
  }

  const std::map<std::string, SharedKey>& keys() const { return by_id_; }

 private:
  using Binding = std::tuple<std::string, std::string, DataClass, std::string>;

  static Binding binding(const std::string& a, const std::string& b, DataClass c,
                         const std::string& subject) {
    return a < b ? Binding{a, b, c, subject} : Binding{b, a, c, subject};
  }

  static std::vector<Binding> bindings_of(const SharedKey& k) {
    std::vector<Binding> out;
    for (auto i = k.holders.begin(); i != k.holders.end(); ++i)
      for (auto j = std::next(i); j != k.holders.end(); ++j)
        out.push_back(binding(*i, *j, k.data_class, k.subject));
    return out;
  }

  std::string owner_;
  std::array<std::uint8_t, 4> nonce_prefix_{};
  std::map<std::string, SharedKey> by_id_;
  std::map<Binding, std::string> bound_;
  std::map<std::string, std::uint64_t> nonce_counters_;
};

/// Party id -> that party's key table.
using KeyDirectory = std::map<std::string, KeyTable*>;

struct HandshakeMessage {
  std::string from;
  std::string to;
};

namespace detail {

inline KeyTable& party(KeyDirectory& dir, const std::string& id) {
  auto it = dir.find(id);
  if (it == dir.end() || it->second == nullptr) throw Error(Errc::PartyUnknown, id);
  return *it->second;
}

/// Each party contributes a share; every party hashes the same transcript.
inline std::array<std::uint8_t, kAeadKeySize> derive(const std::vector<std::string>& parties,
                                                     const std::vector<Bytes>& shares,
                                                     DataClass c) {
  ByteWriter w;
  w.str("dsg-key-agreement").u8(static_cast<std::uint8_t>(c));
  for (std::size_t i = 0; i < parties.size(); ++i) w.str(parties[i]).bytes(shares[i]);
  auto d = Sha256::digest(w.view());
  return d.bytes;
}

inline SharedKey agree(KeyDirectory& dir, const std::vector<std::string>& parties, DataClass c,
                       const std::string& subject, KeySource& ks,
                       std::vector<HandshakeMessage>& log) {
  for (const auto& p : parties) party(dir, p);
  SharedKey key;
  key.holders = {parties.begin(), parties.end()};
  key.data_class = c;
  key.subject = subject;
  for (const auto& p : parties)
    for (const auto& q : parties)
      if (p < q && party(dir, p).has_binding(p, q, c, subject))
        throw Error(Errc::KeyAlreadyBound, p + "/" + q + " " + std::string(to_string(c)));

  std::vector<Bytes> shares;
  for (std::size_t i = 0; i < parties.size(); ++i) shares.push_back(ks.random_bytes(32));
  // Ring transcript: each party forwards its share to the next one.
  for (std::size_t i = 0; i < parties.size(); ++i) {
    if (parties.size() == 2 && i == 1) {
      log.push_back({parties[1], parties[0]});
      break;
    }
    log.push_back({parties[i], parties[(i + 1) % parties.size()]});
  }
  key.key_id = ks.opaque_id("k");
  key.key_bytes = derive(parties, shares, c);
  for (const auto& p : parties) {
    // Each end recomputes from the transcript; all must agree.
    if (derive(parties, shares, c) != key.key_bytes)
      throw Error(Errc::AuthFailure, "key agreement diverged at " + p);
    party(dir, p).insert(key);
  }
  return key;
}

}  // namespace detail

struct SchemeAKeys {
  SharedKey key_dl;  // device <-> local miner
  SharedKey key_lr;  // local miner <-> remote miner
  std::vector<HandshakeMessage> handshake;
};

/// Two independent two-party agreements.
inline SchemeAKeys establish_scheme_a(KeyDirectory& dir, const std::string& device,
                                      const std::string& local_miner,
                                      const std::string& remote_miner, KeySource& ks,
                                      DataClass c = DataClass::Generic) {
  detail::party(dir, device);
  detail::party(dir, local_miner);
  detail::party(dir, remote_miner);
  SchemeAKeys out;
  out.key_dl = detail::agree(dir, {device, local_miner}, c, device, ks, out.handshake);
  out.key_lr = detail::agree(dir, {local_miner, remote_miner}, c, device, ks, out.handshake);
  return out;
}

struct SchemeBKey {
  SharedKey key;
  std::vector<HandshakeMessage> handshake;
};

/// One agreement among device, local miner and every listed remote.
inline SchemeBKey establish_scheme_b(KeyDirectory& dir, const std::string& device,
                                     const std::string& local_miner,
                                     const std::vector<std::string>& remotes, KeySource& ks,
                                     DataClass c = DataClass::Generic) {
  std::vector<std::string> parties{device, local_miner};
  parties.insert(parties.end(), remotes.begin(), remotes.end());
  SchemeBKey out;
  out.key = detail::agree(dir, parties, c, device, ks, out.handshake);
  return out;
}

inline SchemeBKey establish_scheme_b(KeyDirectory& dir, const std::string& device,
                                     const std::string& local_miner,
                                     const std::string& remote_miner, KeySource& ks,
                                     DataClass c = DataClass::Generic) {
  return establish_scheme_b(dir, device, local_miner, std::vector<std::string>{remote_miner}, ks, c);
}

struct PairKeyDenied {
  DenyReason reason = DenyReason::NoRule;
};

using PairKeyResult = std::variant<SharedKey, PairKeyDenied>;

/// The miner keeps its own copy so it can later revoke the key.
inline PairKeyResult allocate_pair_key(KeyDirectory& dir, const std::string& miner,
                                       const PolicyHeader& policy, const DeviceId& dev_a,
                                       const DeviceId& dev_b, KeySource& ks,
                                       std::int64_t now_ms = 0) {
  auto decision = authorize(policy, AuthRequest{dev_a.value, TxType::Access, dev_b, now_ms});
  if (auto* d = std::get_if<Deny>(&decision)) return PairKeyDenied{d->reason};
  auto& miner_table = detail::party(dir, miner);
  std::vector<HandshakeMessage> log;
  auto key = detail::agree(dir, {dev_a.value, dev_b.value}, DataClass::Generic, dev_a.value, ks, log);
  miner_table.insert(key);
  return key;
}

struct ControlMessage {
  std::string from;
  std::string to;
  std::string key_id;
};

/// Revokes at the miner at once; holders learn through the returned messages.
inline std::vector<ControlMessage> invalidate_key(KeyDirectory& dir, const std::string& miner,
                                                  const std::string& key_id) {
  auto& table = detail::party(dir, miner);
  auto* key = table.find(key_id);
  if (!key || !key->valid) throw Error(Errc::UnknownKey, key_id);
  auto holders = key->holders;
  table.invalidate(key_id);
  std::vector<ControlMessage> out;
  for (const auto& h : holders)
    if (h != miner) out.push_back({miner, h, key_id});
  return out;
}

inline void apply_control_message(KeyDirectory& dir, const ControlMessage& msg) {
  auto it = dir.find(msg.to);
  if (it != dir.end() && it->second) it->second->invalidate(msg.key_id);
}

}  // namespace dsg
