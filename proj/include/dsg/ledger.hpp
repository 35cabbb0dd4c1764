#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dsg/bytes.hpp"
#include "dsg/crypto.hpp"
#include "dsg/error.hpp"

namespace dsg {

enum class TxType : std::uint8_t { Genesis, Store, Access, Monitor, Remove, Ebt, Otft, Ct, At };

inline constexpr std::array<TxType, 9> kAllTxTypes{TxType::Genesis, TxType::Store, TxType::Access,
                                                   TxType::Monitor, TxType::Remove, TxType::Ebt,
                                                   TxType::Otft,    TxType::Ct,     TxType::At};

constexpr std::string_view to_string(TxType t) {
  switch (t) {
    case TxType::Genesis: return "genesis";
    case TxType::Store: return "store";
    case TxType::Access: return "access";
    case TxType::Monitor: return "monitor";
    case TxType::Remove: return "remove";
    case TxType::Ebt: return "ebt";
    case TxType::Otft: return "otft";
    case TxType::Ct: return "ct";
    case TxType::At: return "at";
  }
  return "?";
}

inline std::optional<TxType> parse_tx_type(std::string_view s) {
  for (auto t : kAllTxTypes)
    if (to_string(t) == s) return t;
  return std::nullopt;
}

/// Opaque device (or ledger) identifier. "*" is the policy wildcard.
struct DeviceId {
  std::string value;

  static DeviceId wildcard() { return {"*"}; }
  bool is_wildcard() const { return value == "*"; }
  bool valid() const { return !value.empty(); }

  friend bool operator==(const DeviceId&, const DeviceId&) = default;
  friend auto operator<=>(const DeviceId&, const DeviceId&) = default;
};

struct Transaction {
  Digest prev_tx_digest;
  std::uint64_t tx_number = 0;
  DeviceId device_id;
  TxType tx_type = TxType::Store;
  std::optional<Bytes> signature;
  Bytes payload_cipher;
  Digest payload_digest;
  std::int64_t timestamp_ms = 0;

  friend bool operator==(const Transaction&, const Transaction&) = default;
};

enum class Action : std::uint8_t { Allow, Deny };
enum class LimitDuration : std::uint8_t { Hourly, Daily, Weekly, Monthly };

constexpr std::string_view to_string(Action a) { return a == Action::Allow ? "allow" : "deny"; }

constexpr std::string_view to_string(LimitDuration d) {
  switch (d) {
    case LimitDuration::Hourly: return "hourly";
    case LimitDuration::Daily: return "daily";
    case LimitDuration::Weekly: return "weekly";
    case LimitDuration::Monthly: return "monthly";
  }
  return "?";
}

inline std::optional<LimitDuration> parse_limit_duration(std::string_view s) {
  for (auto d : {LimitDuration::Hourly, LimitDuration::Daily, LimitDuration::Weekly,
                 LimitDuration::Monthly})
    if (to_string(d) == s) return d;
  return std::nullopt;
}

struct PolicyRule {
  std::string requester;
  TxType request_type = TxType::Store;
  DeviceId device_id;
  Action action = Action::Deny;
  std::uint32_t tx_limit = 1;
  LimitDuration limit_duration = LimitDuration::Hourly;

  bool same_target(const PolicyRule& o) const {
    return requester == o.requester && request_type == o.request_type && device_id == o.device_id;
  }
  friend bool operator==(const PolicyRule&, const PolicyRule&) = default;
};

/// First-match rule list; anything unmatched is denied.
struct PolicyHeader {
  std::vector<PolicyRule> rules;

  friend bool operator==(const PolicyHeader&, const PolicyHeader&) = default;
};

struct Block {
  std::uint64_t block_number = 0;
  Digest prev_block_digest;
  PolicyHeader policy_header;
  std::vector<Transaction> transactions;
  bool sealed = false;

  friend bool operator==(const Block&, const Block&) = default;
};

enum class Destination : std::uint8_t { Local, CC, Utility };

constexpr std::string_view to_string(Destination d) {
  switch (d) {
    case Destination::Local: return "local";
    case Destination::CC: return "cc";
    case Destination::Utility: return "utility";
  }
  return "?";
}

/// Types a ledger admits beyond its genesis record.
inline std::set<TxType> allowed_types_for(Destination d) {
  if (d == Destination::Utility) return {TxType::Store, TxType::Access};
  return {kAllTxTypes.begin() + 1, kAllTxTypes.end()};
}

// ---------------------------------------------------------------------------
// Canonical encoding

inline void encode_into(ByteWriter& w, const Transaction& tx) {
  w.digest(tx.prev_tx_digest)
      .u64(tx.tx_number)
      .str(tx.device_id.value)
      .u8(static_cast<std::uint8_t>(tx.tx_type));
  if (tx.signature) {
    w.u8(1).bytes(*tx.signature);
  } else {
    w.u8(0);
  }
  w.bytes(tx.payload_cipher).digest(tx.payload_digest).i64(tx.timestamp_ms);
}

inline void encode_into(ByteWriter& w, const PolicyRule& r) {
  w.str(r.requester)
      .u8(static_cast<std::uint8_t>(r.request_type))
      .str(r.device_id.value)
      .u8(static_cast<std::uint8_t>(r.action))
      .u32(r.tx_limit)
      .u8(static_cast<std::uint8_t>(r.limit_duration));
}

inline void encode_into(ByteWriter& w, const Block& b) {
  w.u64(b.block_number).digest(b.prev_block_digest);
  w.u32(static_cast<std::uint32_t>(b.policy_header.rules.size()));
  for (const auto& r : b.policy_header.rules) encode_into(w, r);
  w.u8(b.sealed ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(b.transactions.size()));
  for (const auto& tx : b.transactions) encode_into(w, tx);
}

template <typename T>
Bytes encode(const T& value) {
  ByteWriter w;
  encode_into(w, value);
  return w.take();
}

namespace detail {

template <typename E>
E enum_from(std::uint8_t v, std::uint8_t max) {
  if (v > max) throw DecodeError("enum out of range");
  return static_cast<E>(v);
}

inline Transaction decode_tx(ByteReader& r) {
  Transaction tx;
  tx.prev_tx_digest = r.digest();
  tx.tx_number = r.u64();
  tx.device_id = DeviceId{r.str()};
  tx.tx_type = enum_from<TxType>(r.u8(), static_cast<std::uint8_t>(TxType::At));
  switch (r.u8()) {
    case 0: break;
    case 1: tx.signature = r.bytes(); break;
    default: throw DecodeError("bad signature flag");
  }
  tx.payload_cipher = r.bytes();
  tx.payload_digest = r.digest();
  tx.timestamp_ms = r.i64();
  return tx;
}

inline PolicyRule decode_rule(ByteReader& r) {
  PolicyRule rule;
  rule.requester = r.str();
  rule.request_type = enum_from<TxType>(r.u8(), static_cast<std::uint8_t>(TxType::At));
  rule.device_id = DeviceId{r.str()};
  rule.action = enum_from<Action>(r.u8(), 1);
  rule.tx_limit = r.u32();
  rule.limit_duration = enum_from<LimitDuration>(r.u8(), 3);
  return rule;
}

}  // namespace detail

inline Block decode_block(ByteView bytes) {
  ByteReader r(bytes);
  Block b;
  b.block_number = r.u64();
  b.prev_block_digest = r.digest();
  auto nrules = r.u32();
  if (nrules > bytes.size()) throw DecodeError("rule count exceeds input");
  for (std::uint32_t i = 0; i < nrules; ++i) b.policy_header.rules.push_back(detail::decode_rule(r));
  switch (r.u8()) {
    case 0: b.sealed = false; break;
    case 1: b.sealed = true; break;
    default: throw DecodeError("bad sealed flag");
  }
  auto ntx = r.u32();
  if (ntx > bytes.size()) throw DecodeError("transaction count exceeds input");
  for (std::uint32_t i = 0; i < ntx; ++i) b.transactions.push_back(detail::decode_tx(r));
  r.expect_done();
  return b;
}

template <DigestFunction H = Sha256>
Digest tx_digest(const Transaction& tx) {
  return H::digest(encode(tx));
}

// ---------------------------------------------------------------------------
// Results

struct TxRef {
  std::uint64_t block_number = 0;
  std::size_t tx_index = 0;
  friend bool operator==(const TxRef&, const TxRef&) = default;
};

struct LastTxRef {
  std::uint64_t block_number = 0;
  Digest tx_digest;
  std::uint64_t tx_number = 0;
  friend bool operator==(const LastTxRef&, const LastTxRef&) = default;
};

enum class BreakReason : std::uint8_t {
  Malformed,
  BlockNumberMismatch,
  PrevBlockDigestMismatch,
  BlockDigestMismatch,  // successor no longer commits to this block's bytes
  SealFlagMismatch,
  EmptySealedBlock,
  CapacityExceeded,
  OwnerMismatch,
  TypeNotAllowed,
  TxNumberMismatch,
  PrevTxDigestMismatch,
  PayloadDigestMismatch,
};

constexpr std::string_view to_string(BreakReason r) {
  switch (r) {
    case BreakReason::Malformed: return "Malformed";
    case BreakReason::BlockNumberMismatch: return "BlockNumberMismatch";
    case BreakReason::PrevBlockDigestMismatch: return "PrevBlockDigestMismatch";
    case BreakReason::BlockDigestMismatch: return "BlockDigestMismatch";
    case BreakReason::SealFlagMismatch: return "SealFlagMismatch";
    case BreakReason::EmptySealedBlock: return "EmptySealedBlock";
    case BreakReason::CapacityExceeded: return "CapacityExceeded";
    case BreakReason::OwnerMismatch: return "OwnerMismatch";
    case BreakReason::TypeNotAllowed: return "TypeNotAllowed";
    case BreakReason::TxNumberMismatch: return "TxNumberMismatch";
    case BreakReason::PrevTxDigestMismatch: return "PrevTxDigestMismatch";
    case BreakReason::PayloadDigestMismatch: return "PayloadDigestMismatch";
  }
  return "?";
}

struct ChainBreak {
  std::uint64_t block_number = 0;
  BreakReason reason = BreakReason::Malformed;
  friend bool operator==(const ChainBreak&, const ChainBreak&) = default;
};

struct ChainStatus {
  std::optional<ChainBreak> broken;

  bool ok() const { return !broken.has_value(); }
  static ChainStatus Ok() { return {}; }
  static ChainStatus Broken(std::uint64_t block, BreakReason reason) {
    return {ChainBreak{block, reason}};
  }
};

enum class Actor : std::uint8_t { HomeOwner, Utility };
enum class PolicyUpdate : std::uint8_t { Ok, Denied };

inline constexpr std::size_t kDefaultBlockCapacity = 10;

// ---------------------------------------------------------------------------

/// One device's append-only chain toward one destination. Sealed blocks are
/// kept only as their canonical bytes; the unsealed tail is a live Block.
template <DigestFunction H = Sha256>
class BasicLedger {
 public:
  BasicLedger(DeviceId owner, Destination destination, PolicyHeader initial_policy = {},
              std::size_t block_capacity = kDefaultBlockCapacity)
      : BasicLedger(owner, destination, allowed_types_for(destination), std::move(initial_policy),
                    block_capacity) {}

  BasicLedger(DeviceId owner, Destination destination, std::set<TxType> allowed,
              PolicyHeader initial_policy, std::size_t block_capacity)
      : owner_(std::move(owner)),
        destination_(destination),
        allowed_(std::move(allowed)),
        capacity_(block_capacity) {
    if (!owner_.valid()) throw std::invalid_argument("ledger owner must be non-empty");
    if (capacity_ == 0) throw std::invalid_argument("block capacity must be positive");
    tail_.policy_header = std::move(initial_policy);
  }

  const DeviceId& owner() const { return owner_; }
  Destination destination() const { return destination_; }
  const std::set<TxType>& allowed_types() const { return allowed_; }
  std::size_t block_capacity() const { return capacity_; }

  bool empty() const { return tail_.transactions.empty() && sealed_.empty(); }
  std::size_t sealed_count() const { return sealed_.size(); }
  const Block& tail() const { return tail_; }
  const Bytes& sealed_bytes(std::size_t k) const { return sealed_.at(k); }
  Block block(std::size_t k) const {
    return k < sealed_.size() ? decode_block(sealed_[k]) : tail_;
  }
  std::size_t block_count() const { return sealed_.size() + 1; }

  TxRef append(Transaction tx) {
    if (tx.device_id != owner_)
      throw Error(Errc::OwnerMismatch, tx.device_id.value + " on ledger of " + owner_.value);
    auto head = head_info();
    if (tx.tx_type == TxType::Genesis) {
      if (head) throw Error(Errc::TypeNotAllowed, "genesis on a non-empty chain");
    } else if (!allowed_.contains(tx.tx_type)) {
      throw Error(Errc::TypeNotAllowed, std::string(to_string(tx.tx_type)) + " not allowed on " +
                                            std::string(to_string(destination_)) + " ledger");
    } else if (!head) {
      throw Error(Errc::ChainLinkMismatch, "chain must begin with a genesis transaction");
    }
    const Digest expected_prev = head ? head->digest : Digest::zero();
    const std::uint64_t expected_number = head ? head->tx_number + 1 : 0;
    if (tx.prev_tx_digest != expected_prev || tx.tx_number != expected_number)
      throw Error(Errc::ChainLinkMismatch, "tx " + std::to_string(tx.tx_number) + " expected " +
                                               std::to_string(expected_number));
    if (H::digest(tx.payload_cipher) != tx.payload_digest)
      throw Error(Errc::PayloadDigestMismatch, "payload digest does not match payload");

    tail_.transactions.push_back(std::move(tx));
    TxRef ref{tail_.block_number, tail_.transactions.size() - 1};
    if (tail_.transactions.size() >= capacity_) seal();
    return ref;
  }

  Digest seal() {
    if (tail_.transactions.empty()) throw Error(Errc::EmptyBlock, "nothing to seal");
    tail_.sealed = true;
    Bytes bytes = encode(tail_);
    Digest d = H::digest(bytes);
    sealed_.push_back(std::move(bytes));
    Block next;
    next.block_number = tail_.block_number + 1;
    next.prev_block_digest = d;
    next.policy_header = tail_.policy_header;
    tail_ = std::move(next);
    return d;
  }

  ChainStatus validate() const {
    Memo st = verified_;
    for (std::size_t k = st.blocks; k < sealed_.size(); ++k) {
      Block b;
      try {
        b = decode_block(sealed_[k]);
      } catch (const DecodeError&) {
        return ChainStatus::Broken(k, BreakReason::Malformed);
      }
      if (auto brk = check_block(b, k, true, st)) return {brk};
      st.last_block_digest = H::digest(sealed_[k]);
      st.blocks = k + 1;
      verified_ = st;
    }
    if (auto brk = check_block(tail_, sealed_.size(), false, st)) return {brk};
    return ChainStatus::Ok();
  }

  /// Walks every block regardless of what has been verified before.
  ChainStatus validate_full() const {
    verified_ = Memo{};
    return validate();
  }

  LastTxRef last_transaction_ref(const DeviceId& device) const {
    if (device != owner_)
      throw Error(Errc::OwnerMismatch, device.value + " is not the owner of this ledger");
    auto head = head_info();
    if (!head) throw Error(Errc::EmptyLedger, "ledger of " + owner_.value + " is empty");
    return LastTxRef{head->block_number, head->digest, head->tx_number};
  }

  std::optional<Transaction> last_transaction() const {
    if (!tail_.transactions.empty()) return tail_.transactions.back();
    if (sealed_.empty()) return std::nullopt;
    try {
      auto b = decode_block(sealed_.back());
      if (b.transactions.empty()) return std::nullopt;
      return b.transactions.back();
    } catch (const DecodeError&) {
      return std::nullopt;
    }
  }

  const PolicyHeader& current_policy() const {
    ++policy_reads_;
    return tail_.policy_header;
  }
  std::uint64_t policy_reads() const { return policy_reads_; }

  PolicyUpdate update_policy(const PolicyRule& rule, Actor actor,
                             const std::function<bool(const DeviceId&)>& is_smart_meter) {
    if (rule.action == Action::Allow && rule.tx_limit < 1)
      throw Error(Errc::InvalidRule, "allow rule needs tx_limit >= 1");
    if (actor == Actor::HomeOwner && (rule.device_id.is_wildcard() || is_smart_meter(rule.device_id)))
      return PolicyUpdate::Denied;
    auto& rules = tail_.policy_header.rules;
    for (auto& r : rules) {
      if (r.same_target(rule)) {
        r = rule;
        return PolicyUpdate::Ok;
      }
    }
    rules.push_back(rule);
    return PolicyUpdate::Ok;
  }

  /// Visits every transaction in chain order. Malformed sealed blocks are skipped.
  template <typename F>
  void for_each_transaction(F&& f) const {
    for (std::size_t k = 0; k < sealed_.size(); ++k) {
      Block b;
      try {
        b = decode_block(sealed_[k]);
      } catch (const DecodeError&) {
        continue;
      }
      for (const auto& tx : b.transactions) f(tx, b.block_number);
    }
    for (const auto& tx : tail_.transactions) f(tx, tail_.block_number);
  }

  std::vector<Transaction> transactions() const {
    std::vector<Transaction> out;
    for_each_transaction([&](const Transaction& tx, std::uint64_t) { out.push_back(tx); });
    return out;
  }

  std::size_t transaction_count() const {
    std::size_t n = 0;
    for_each_transaction([&](const Transaction&, std::uint64_t) { ++n; });
    return n;
  }

  // -------------------------------------------------------------------------
  // Unchecked access. These bypass every invariant and exist so the attack
  // harness can model a compromised store. Each resets the validation memo.

  Bytes& unchecked_sealed_bytes(std::size_t k) {
    forget_from(k);
    return sealed_.at(k);
  }
  Block& unchecked_tail() { return tail_; }

  /// Decoded copy of every block, tail last.
  std::vector<Block> unchecked_blocks() const {
    std::vector<Block> out;
    for (const auto& b : sealed_) out.push_back(decode_block(b));
    out.push_back(tail_);
    return out;
  }

  /// Replaces the whole chain; the last block becomes the tail.
  void unchecked_install(std::vector<Block> blocks) {
    if (blocks.empty()) throw std::invalid_argument("install needs at least a tail block");
    forget_from(0);
    sealed_.clear();
    for (std::size_t k = 0; k + 1 < blocks.size(); ++k) sealed_.push_back(encode(blocks[k]));
    tail_ = std::move(blocks.back());
  }

 private:
  struct Memo {
    std::size_t blocks = 0;
    Digest last_block_digest;
    std::optional<Digest> last_tx_digest;
    std::uint64_t next_tx_number = 0;
  };

  struct HeadInfo {
    std::uint64_t block_number;
    Digest digest;
    std::uint64_t tx_number;
  };

  std::optional<HeadInfo> head_info() const {
    if (!tail_.transactions.empty()) {
      const auto& tx = tail_.transactions.back();
      return HeadInfo{tail_.block_number, tx_digest<H>(tx), tx.tx_number};
    }
    if (sealed_.empty()) return std::nullopt;
    auto tx = last_transaction();
    if (!tx) return std::nullopt;
    return HeadInfo{sealed_.size() - 1, tx_digest<H>(*tx), tx->tx_number};
  }

  void forget_from(std::size_t k) {
    if (verified_.blocks > k) verified_ = Memo{};
  }

  bool type_admissible(const Transaction& tx) const {
    if (tx.tx_type == TxType::Genesis) return tx.tx_number == 0;
    return allowed_.contains(tx.tx_type);
  }

  /// Checks one block against the running chain state, advancing it.
  std::optional<ChainBreak> check_block(const Block& b, std::uint64_t k, bool sealed,
                                        Memo& st) const {
    const Digest expected_prev = k == 0 ? Digest::zero() : st.last_block_digest;
    if (b.prev_block_digest != expected_prev)
      return k == 0 ? ChainBreak{0, BreakReason::PrevBlockDigestMismatch}
                    : ChainBreak{k - 1, BreakReason::BlockDigestMismatch};
    if (b.block_number != k) return ChainBreak{k, BreakReason::BlockNumberMismatch};
    if (b.sealed != sealed) return ChainBreak{k, BreakReason::SealFlagMismatch};
    if (sealed && b.transactions.empty()) return ChainBreak{k, BreakReason::EmptySealedBlock};
    if (b.transactions.size() > capacity_) return ChainBreak{k, BreakReason::CapacityExceeded};
    for (const auto& tx : b.transactions) {
      if (tx.device_id != owner_) return ChainBreak{k, BreakReason::OwnerMismatch};
      if (!type_admissible(tx)) return ChainBreak{k, BreakReason::TypeNotAllowed};
      if (tx.tx_number != st.next_tx_number) return ChainBreak{k, BreakReason::TxNumberMismatch};
      if (tx.prev_tx_digest != st.last_tx_digest.value_or(Digest::zero()))
        return ChainBreak{k, BreakReason::PrevTxDigestMismatch};
      if (H::digest(tx.payload_cipher) != tx.payload_digest)
        return ChainBreak{k, BreakReason::PayloadDigestMismatch};
      st.last_tx_digest = tx_digest<H>(tx);
      st.next_tx_number = tx.tx_number + 1;
    }
    return std::nullopt;
  }

  DeviceId owner_;
  Destination destination_;
  std::set<TxType> allowed_;
  std::size_t capacity_;
  std::vector<Bytes> sealed_;
  Block tail_;
  mutable Memo verified_;
  mutable std::uint64_t policy_reads_ = 0;
};

using Ledger = BasicLedger<Sha256>;

// ---------------------------------------------------------------------------
// Operation-style free functions

template <DigestFunction H>
TxRef append_transaction(BasicLedger<H>& ledger, Transaction tx) {
  return ledger.append(std::move(tx));
}

template <DigestFunction H>
Digest seal_block(BasicLedger<H>& ledger) {
  return ledger.seal();
}

template <DigestFunction H>
ChainStatus validate_chain(const BasicLedger<H>& ledger) {
  return ledger.validate();
}

template <DigestFunction H>
LastTxRef last_transaction_ref(const BasicLedger<H>& ledger, const DeviceId& device) {
  return ledger.last_transaction_ref(device);
}

template <DigestFunction H>
const PolicyHeader& current_policy(const BasicLedger<H>& ledger) {
  return ledger.current_policy();
}

template <DigestFunction H>
PolicyUpdate update_policy(BasicLedger<H>& ledger, const PolicyRule& rule, Actor actor,
                           const std::function<bool(const DeviceId&)>& is_smart_meter) {
  return ledger.update_policy(rule, actor, is_smart_meter);
}

struct LocatedTx {
  std::uint64_t block_number;
  Transaction tx;
};

/// Finds tx_number n. Blocks are normally full, so block n / capacity is tried first.
template <DigestFunction H>
std::optional<LocatedTx> find_transaction(const BasicLedger<H>& ledger, std::uint64_t n) {
  auto search = [&](std::size_t k) -> std::optional<LocatedTx> {
    Block b;
    try {
      b = ledger.block(k);
    } catch (const DecodeError&) {
      return std::nullopt;
    }
    for (auto& tx : b.transactions)
      if (tx.tx_number == n) return LocatedTx{k, std::move(tx)};
    return std::nullopt;
  };
  const std::size_t guess = n / ledger.block_capacity();
  if (guess < ledger.block_count())
    if (auto hit = search(guess)) return hit;
  for (std::size_t k = 0; k < ledger.block_count(); ++k)
    if (k != guess)
      if (auto hit = search(k)) return hit;
  return std::nullopt;
}

template <DigestFunction H>
std::optional<LastTxRef> transaction_ref(const BasicLedger<H>& ledger, std::uint64_t n) {
  auto hit = find_transaction(ledger, n);
  if (!hit) return std::nullopt;
  return LastTxRef{hit->block_number, tx_digest<H>(hit->tx), n};
}

/// Builds the next transaction for `ledger`'s owner, linked to its head.
template <DigestFunction H>
Transaction next_transaction(const BasicLedger<H>& ledger, TxType type, Bytes payload_cipher,
                             std::int64_t timestamp_ms, std::optional<Bytes> signature = {}) {
  Transaction tx;
  if (auto last = ledger.last_transaction()) {
    tx.prev_tx_digest = tx_digest<H>(*last);
    tx.tx_number = last->tx_number + 1;
  }
  tx.device_id = ledger.owner();
  tx.tx_type = type;
  tx.signature = std::move(signature);
  tx.payload_digest = H::digest(payload_cipher);
  tx.payload_cipher = std::move(payload_cipher);
  tx.timestamp_ms = timestamp_ms;
  return tx;
}

}  // namespace dsg
