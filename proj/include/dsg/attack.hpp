#pragma once

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "dsg/miner.hpp"

namespace dsg {

struct DdosAttack {
  std::string device;  // a meter, an RTU, or an HGW miner id
  double rate_per_hour = 1000;
};

enum class Mutation : std::uint8_t { FlipPayload, FlipDigest, DeleteLast };

constexpr std::string_view to_string(Mutation m) {
  switch (m) {
    case Mutation::FlipPayload: return "flip_payload";
    case Mutation::FlipDigest: return "flip_digest";
    case Mutation::DeleteLast: return "delete_last";
  }
  return "?";
}

inline std::optional<Mutation> parse_mutation(std::string_view s) {
  for (auto m : {Mutation::FlipPayload, Mutation::FlipDigest, Mutation::DeleteLast})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct TamperRbcAttack {
  std::string device;
  std::string tx_selector = "last";  // "last", "random", or a tx_number
  Mutation mutation = Mutation::FlipPayload;
  Channel channel = Channel::Hf;
};

struct TamperBothAttack {
  std::string device;
  std::string broadcast_tx_selector = "last";  // index among the chain's broadcast records
};

struct LinkingProbeAttack {};

using AttackKind = std::variant<DdosAttack, TamperRbcAttack, TamperBothAttack, LinkingProbeAttack>;

struct AttackSpec {
  std::string id;
  AttackKind kind;
  std::int64_t start_ms = 0;
  std::int64_t duration_ms = 0;
};

inline std::string_view kind_name(const AttackKind& k) {
  switch (k.index()) {
    case 0: return "ddos";
    case 1: return "tamper_rbc";
    case 2: return "tamper_both";
    default: return "linking_probe";
  }
}

inline const std::string& attack_target(const AttackKind& k) {
  static const std::string none;
  if (auto* d = std::get_if<DdosAttack>(&k)) return d->device;
  if (auto* t = std::get_if<TamperRbcAttack>(&k)) return t->device;
  if (auto* b = std::get_if<TamperBothAttack>(&k)) return b->device;
  return none;
}

enum class Mechanism : std::uint8_t { RateLimit, StoreAuthMismatch, BroadcastAudit, IdentifierLinking };

constexpr std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::RateLimit: return "rate_limit";
    case Mechanism::StoreAuthMismatch: return "store_auth_mismatch";
    case Mechanism::BroadcastAudit: return "broadcast_audit";
    case Mechanism::IdentifierLinking: return "identifier_linking";
  }
  return "?";
}

inline std::optional<Mechanism> parse_mechanism(std::string_view s) {
  for (auto m : {Mechanism::RateLimit, Mechanism::StoreAuthMismatch, Mechanism::BroadcastAudit,
                 Mechanism::IdentifierLinking})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct DetectionRecord {
  std::string attack_id;
  std::string kind;
  std::string target;
  bool detected = false;
  Mechanism mechanism = Mechanism::RateLimit;
  std::int64_t detect_latency_ms = -1;
  std::uint32_t alarms_delivered = 0;
  std::string note;
  std::map<std::int64_t, std::uint32_t> forwarded_per_window;  // ddos only

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

/// Resolves a selector over candidate tx_numbers (ascending).
inline std::uint64_t resolve_selector(const std::vector<std::uint64_t>& candidates, const std::string& selector,
                                      std::mt19937_64& rng) {
  if (candidates.empty()) throw Error(Errc::SelectorUnresolved, "no candidate transactions");
  if (selector == "last") return candidates.back();
  if (selector == "random") return candidates[rng() % candidates.size()];
  try {
    std::size_t pos = 0;
    auto n = std::stoull(selector, &pos);
    if (pos == selector.size())
      for (auto c : candidates)
        if (c == n) return c;
  } catch (const std::exception&) {
  }
  throw Error(Errc::SelectorUnresolved, selector);
}

inline bool selector_syntax_ok(const std::string& s) {
  return s == "last" || s == "random" ||
         (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos);
}

namespace detail {

struct Position {
  std::size_t block;
  std::size_t index;
};

inline std::optional<Position> locate(const std::vector<Block>& blocks, std::uint64_t tx_number) {
  for (std::size_t k = 0; k < blocks.size(); ++k)
    for (std::size_t i = 0; i < blocks[k].transactions.size(); ++i)
      if (blocks[k].transactions[i].tx_number == tx_number) return Position{k, i};
  return std::nullopt;
}

/// Recomputes every digest link, as an attacker holding the whole
/// chain would. The result validates cleanly.
inline void rechain(std::vector<Block>& blocks) {
  std::optional<Digest> prev_tx;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    auto& b = blocks[k];
    for (auto& tx : b.transactions) {
      tx.payload_digest = Sha256::digest(tx.payload_cipher);
      tx.prev_tx_digest = prev_tx.value_or(Digest::zero());
      prev_tx = tx_digest(tx);
    }
    if (k + 1 < blocks.size()) blocks[k + 1].prev_block_digest = Sha256::digest(encode(b));
  }
}

}  // namespace detail

/// Storage compromise: mutates one RBC record in place, bypassing validation.
inline std::uint64_t tamper_rbc(Ledger& rbc, const std::string& selector, Mutation mutation, std::mt19937_64& rng) {
  auto blocks = rbc.unchecked_blocks();
  std::vector<std::uint64_t> candidates;
  for (const auto& b : blocks)
    for (const auto& tx : b.transactions)
      if (tx.tx_type != TxType::Genesis) candidates.push_back(tx.tx_number);
  if (mutation == Mutation::DeleteLast) {
    if (candidates.empty()) throw Error(Errc::SelectorUnresolved, "nothing to delete");
    const auto n = candidates.back();
    if (blocks.back().transactions.empty()) {
      // Reopen the last sealed block so the tail holds the deleted record.
      blocks.pop_back();
      blocks.back().sealed = false;
    }
    blocks.back().transactions.pop_back();
    rbc.unchecked_install(std::move(blocks));
    return n;
  }
  const auto n = resolve_selector(candidates, selector, rng);
  auto pos = detail::locate(blocks, n);
  auto& tx = blocks[pos->block].transactions[pos->index];
  if (mutation == Mutation::FlipPayload) {
    if (tx.payload_cipher.empty()) tx.payload_cipher.push_back(0);
    tx.payload_cipher[rng() % tx.payload_cipher.size()] ^= 0x01;
  } else {
    tx.payload_digest.bytes[rng() % tx.payload_digest.bytes.size()] ^= 0x01;
  }
  rbc.unchecked_install(std::move(blocks));
  return n;
}

/// tx_numbers of broadcast records (signed Access transactions) in a chain.
inline std::vector<std::uint64_t> broadcast_records(const Ledger& l) {
  std::vector<std::uint64_t> out;
  for (const auto& b : l.unchecked_blocks())
    for (const auto& tx : b.transactions)
      if (tx.tx_type == TxType::Access && tx.signature) out.push_back(tx.tx_number);
  return out;
}

/// Flips the final byte of the record's payload and rechains.
inline void mutate_broadcast(Ledger& l, std::uint64_t n) {
  auto blocks = l.unchecked_blocks();
  auto pos = detail::locate(blocks, n);
  if (!pos) throw Error(Errc::SelectorUnresolved, "record " + std::to_string(n) + " absent");
  auto& p = blocks[pos->block].transactions[pos->index].payload_cipher;
  p.back() ^= 0x01;
  detail::rechain(blocks);
  l.unchecked_install(std::move(blocks));
}

/// Consistent rewrite of one broadcast record in both copies of a chain.
/// The selector indexes the chain's broadcast records (0-based), as held by the LBC.
inline std::uint64_t tamper_both(Ledger& lbc, Ledger& rbc, const std::string& selector, std::mt19937_64& rng) {
  auto local = broadcast_records(lbc);
  auto remote = broadcast_records(rbc);
  std::vector<std::uint64_t> common;
  std::set_intersection(local.begin(), local.end(), remote.begin(), remote.end(), std::back_inserter(common));
  std::uint64_t n;
  if (selector == "last" || selector == "random") {
    n = resolve_selector(common, selector, rng);
  } else {
    if (!selector_syntax_ok(selector)) throw Error(Errc::SelectorUnresolved, selector);
    auto i = std::stoull(selector);
    if (i >= common.size()) throw Error(Errc::SelectorUnresolved, "broadcast index " + selector);
    n = common[i];
  }
  mutate_broadcast(lbc, n);
  mutate_broadcast(rbc, n);
  return n;
}

struct LinkReport {
  std::uint64_t pairs_total = 0;
  std::uint64_t pairs_linked = 0;  // true sibling pairs sharing an identifier
  std::uint64_t false_links = 0;   // unrelated pairs that share one
  std::string method = "identifier_key_intersection";

  friend bool operator==(const LinkReport&, const LinkReport&) = default;
};

/// What a storage compromise reveals about one chain: its id and every key id
/// it mentions. No key material.
inline std::set<std::string> adversary_identifiers(const Ledger& l) {
  std::set<std::string> ids{l.owner().value};
  l.for_each_transaction([&](const Transaction& tx, std::uint64_t) {
    if (tx.tx_type == TxType::Genesis) {
      const std::string s(tx.payload_cipher.begin(), tx.payload_cipher.end());
      if (auto p = s.find("key="); p != std::string::npos) ids.insert(s.substr(p + 4));
    } else if (!tx.signature) {
      try {
        ids.insert(Ciphertext::decode(tx.payload_cipher).key_id);
      } catch (const DecodeError&) {
      }
    }
  });
  return ids;
}

/// Tries to pair each HF chain at the CC storage with an LF chain at the
/// utility storage through a shared identifier. `truth` maps HF ledger id to
/// the LF ledger id of the same meter and is used only for scoring.
inline LinkReport linking_probe(const Miner& cc_storage, const Miner& u_storage,
                                const std::map<std::string, std::string>& truth) {
  LinkReport r;
  std::map<std::string, std::set<std::string>> lf_by_identifier;
  for (const auto& [key, l] : u_storage.ledgers) {
    auto meta = u_storage.rbc.find(l.owner().value);
    if (meta == u_storage.rbc.end() || !meta->second.meter) continue;
    for (const auto& id : adversary_identifiers(l)) lf_by_identifier[id].insert(l.owner().value);
  }
  for (const auto& [key, l] : cc_storage.ledgers) {
    auto meta = cc_storage.rbc.find(l.owner().value);
    if (meta == cc_storage.rbc.end() || !meta->second.meter) continue;
    const auto hf = l.owner().value;
    auto sibling = truth.find(hf);
    if (sibling != truth.end()) ++r.pairs_total;
    std::set<std::string> linked;
    for (const auto& id : adversary_identifiers(l))
      if (auto it = lf_by_identifier.find(id); it != lf_by_identifier.end())
        linked.insert(it->second.begin(), it->second.end());
    for (const auto& lf : linked) {
      if (sibling != truth.end() && sibling->second == lf)
        ++r.pairs_linked;
      else
        ++r.false_links;
    }
  }
  return r;
}

}  // namespace dsg
