#include <functional>

#include <gtest/gtest.h>

#include "dsg/attack.hpp"

namespace dsg {
namespace {

const DeviceId kL{"L-1"};

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::IoError;
}

/// Genesis plus n stores; small blocks so mutations land in sealed blocks too.
Ledger chain(std::size_t n, std::size_t capacity = 3) {
  Ledger l(kL, Destination::CC, {}, capacity);
  l.append(next_transaction(l, TxType::Genesis, to_bytes("genesis key=k1"), 0));
  for (std::size_t i = 1; i <= n; ++i)
    l.append(next_transaction(l, TxType::Store, to_bytes("reading-" + std::to_string(i)),
                              static_cast<std::int64_t>(i)));
  return l;
}

TEST(Selector, LastRandomAndNumber) {
  std::mt19937_64 rng(1);
  const std::vector<std::uint64_t> c{1, 2, 5};
  EXPECT_EQ(resolve_selector(c, "last", rng), 5u);
  EXPECT_EQ(resolve_selector(c, "2", rng), 2u);
  for (int i = 0; i < 50; ++i) {
    auto n = resolve_selector(c, "random", rng);
    EXPECT_TRUE(n == 1 || n == 2 || n == 5);
  }
  EXPECT_EQ(code_of([&] { resolve_selector(c, "3", rng); }), Errc::SelectorUnresolved);
  EXPECT_EQ(code_of([&] { resolve_selector(c, "2x", rng); }), Errc::SelectorUnresolved);
  EXPECT_EQ(code_of([&] { resolve_selector({}, "last", rng); }), Errc::SelectorUnresolved);
}

TEST(Selector, Syntax) {
  EXPECT_TRUE(selector_syntax_ok("last"));
  EXPECT_TRUE(selector_syntax_ok("random"));
  EXPECT_TRUE(selector_syntax_ok("17"));
  EXPECT_FALSE(selector_syntax_ok(""));
  EXPECT_FALSE(selector_syntax_ok("-1"));
  EXPECT_FALSE(selector_syntax_ok("first"));
}

TEST(TamperRbc, FlipsBreakValidationAnywhere) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    auto l = chain(11);
    const auto m = trial % 2 ? Mutation::FlipPayload : Mutation::FlipDigest;
    const auto n = tamper_rbc(l, "random", m, rng);
    EXPECT_GE(n, 1u);
    EXPECT_FALSE(l.validate_full().ok()) << to_string(m) << " tx " << n;
  }
}

TEST(TamperRbc, DeleteLastMovesHeadBack) {
  std::mt19937_64 rng(7);
  for (std::size_t n : {3u, 4u, 7u}) {
    auto l = chain(n);
    const auto before = l.last_transaction_ref(kL);
    EXPECT_EQ(tamper_rbc(l, "last", Mutation::DeleteLast, rng), n);
    EXPECT_EQ(l.last_transaction()->tx_number, n - 1);
    EXPECT_NE(l.last_transaction_ref(kL), before);
  }
}

TEST(TamperRbc, GenesisOnlyHasNothingToTamper) {
  std::mt19937_64 rng(7);
  auto l = chain(0);
  EXPECT_EQ(code_of([&] { tamper_rbc(l, "last", Mutation::FlipPayload, rng); }), Errc::SelectorUnresolved);
  EXPECT_EQ(code_of([&] { tamper_rbc(l, "last", Mutation::DeleteLast, rng); }), Errc::SelectorUnresolved);
}

Transaction signed_broadcast(const Ledger& l, std::string_view text, std::int64_t t) {
  auto tx = next_transaction(l, TxType::Access, to_bytes(text), t);
  tx.signature = Bytes(64, 0xAB);
  return tx;
}

TEST(TamperBoth, RewriteKeepsBothChainsValidAndEqual) {
  Ledger lbc(kL, Destination::CC, {}, 3), rbc(kL, Destination::CC, {}, 3);
  for (auto* l : {&lbc, &rbc}) {
    l->append(next_transaction(*l, TxType::Genesis, to_bytes("genesis"), 0));
    l->append(next_transaction(*l, TxType::Store, to_bytes("r1"), 1));
    l->append(signed_broadcast(*l, "bcast-1", 2));
    l->append(next_transaction(*l, TxType::Store, to_bytes("r2"), 3));
    l->append(signed_broadcast(*l, "bcast-2", 4));
  }
  EXPECT_EQ(broadcast_records(lbc), (std::vector<std::uint64_t>{2, 4}));
  const auto before = lbc.transactions()[2].payload_digest;
  std::mt19937_64 rng(2);
  EXPECT_EQ(tamper_both(lbc, rbc, "0", rng), 2u);
  EXPECT_TRUE(lbc.validate_full().ok());
  EXPECT_TRUE(rbc.validate_full().ok());
  EXPECT_EQ(lbc.last_transaction_ref(kL), rbc.last_transaction_ref(kL));
  EXPECT_NE(lbc.transactions()[2].payload_digest, before);
  EXPECT_EQ(code_of([&] { tamper_both(lbc, rbc, "2", rng); }), Errc::SelectorUnresolved);
  EXPECT_EQ(code_of([&] { tamper_both(lbc, rbc, "x", rng); }), Errc::SelectorUnresolved);
}

Topology probe_topology() {
  Topology t;
  t.ngws = 1;
  t.hgws_per_ngw = 2;
  t.devices_per_hgw = 3;
  t.han_pairs_per_hgw = 0;
  return t;
}

std::map<std::string, std::string> truth_of(Grid& g) {
  std::map<std::string, std::string> truth;
  for (auto& [id, sm] : g.meters) {
    const auto& e = g.miner(sm.hgw).devices.at(id);
    truth[e.hf->ledger_id] = e.lf->ledger_id;
  }
  return truth;
}

TEST(Linking, UniqueKeysLinkNothing) {
  auto g = build_grid(probe_topology(), {});
  auto r = linking_probe(g->miner(kCcStorage), g->miner(kUStorage), truth_of(*g));
  EXPECT_EQ(r.pairs_total, 6u);
  EXPECT_EQ(r.pairs_linked, 0u);
  EXPECT_EQ(r.false_links, 0u);
}

TEST(Linking, SingleKeyLinksEveryPair) {
  GridParams p;
  p.unique_class_keys = false;
  auto g = build_grid(probe_topology(), p);
  auto r = linking_probe(g->miner(kCcStorage), g->miner(kUStorage), truth_of(*g));
  EXPECT_EQ(r.pairs_total, 6u);
  EXPECT_EQ(r.pairs_linked, 6u);
  EXPECT_EQ(r.false_links, 0u);
}

TEST(Linking, IdentifiersCarryNoDeviceName) {
  auto g = build_grid(probe_topology(), {});
  for (const auto& [k, l] : g->miner(kCcStorage).ledgers)
    for (const auto& id : adversary_identifiers(l)) EXPECT_EQ(id.find("sm-"), std::string::npos) << id;
}

TEST(Linking, EmptyStoragesGiveZeroPairs) {
  Topology t = probe_topology();
  t.hgws_per_ngw = 0;
  auto g = build_grid(t, {});
  auto r = linking_probe(g->miner(kCcStorage), g->miner(kUStorage), truth_of(*g));
  EXPECT_EQ(r, LinkReport{});
}

TEST(Parse, MutationAndMechanismRoundTrip) {
  for (auto m : {Mutation::FlipPayload, Mutation::FlipDigest, Mutation::DeleteLast})
    EXPECT_EQ(parse_mutation(to_string(m)), m);
  EXPECT_FALSE(parse_mutation("flip"));
  for (auto m : {Mechanism::RateLimit, Mechanism::StoreAuthMismatch, Mechanism::BroadcastAudit,
                 Mechanism::IdentifierLinking})
    EXPECT_EQ(parse_mechanism(to_string(m)), m);
  EXPECT_FALSE(parse_mechanism(""));
}

TEST(AttackSpec, KindAndTarget) {
  AttackKind k = TamperRbcAttack{"sm-1", "last", Mutation::FlipDigest, Channel::Lf};
  EXPECT_EQ(attack_target(k), "sm-1");
  AttackKind d = DdosAttack{"rtu-0-0", 10};
  EXPECT_EQ(attack_target(d), "rtu-0-0");
  EXPECT_NE(kind_name(k), kind_name(d));
}

}  // namespace
}  // namespace dsg
