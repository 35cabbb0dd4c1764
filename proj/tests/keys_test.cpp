#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "dsg/keys.hpp"

namespace dsg {
namespace {

struct Parties {
  std::map<std::string, KeyTable> tables;
  KeyDirectory dir;
  std::mt19937_64 rng{42};
  KeySource ks{rng};

  explicit Parties(std::initializer_list<std::string> ids) {
    for (const auto& id : ids) tables.emplace(id, KeyTable(id));
    for (auto& [id, t] : tables) dir[id] = &t;
  }
  KeyTable& operator[](const std::string& id) { return tables.at(id); }
};

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::IoError;
}

TEST(SchemeA, TwoIndependentHopKeys) {
  Parties p{"sm-7", "hgw-3", "u"};
  auto keys = establish_scheme_a(p.dir, "sm-7", "hgw-3", "u", p.ks);
  EXPECT_EQ(keys.key_dl.holders, (std::set<std::string>{"sm-7", "hgw-3"}));
  EXPECT_EQ(keys.key_lr.holders, (std::set<std::string>{"hgw-3", "u"}));
  EXPECT_NE(keys.key_dl.key_id, keys.key_lr.key_id);
  EXPECT_NE(keys.key_dl.key_bytes, keys.key_lr.key_bytes);
  EXPECT_EQ(keys.handshake.size(), 4u);
  // Both ends hold the same bytes.
  EXPECT_EQ(p["sm-7"].get(keys.key_dl.key_id).key_bytes, p["hgw-3"].get(keys.key_dl.key_id).key_bytes);
  EXPECT_EQ(p["u"].get(keys.key_lr.key_id).key_bytes, p["hgw-3"].get(keys.key_lr.key_id).key_bytes);
  EXPECT_EQ(p["u"].find(keys.key_dl.key_id), nullptr);
}

TEST(SchemeA, RepeatIsAlreadyBound) {
  Parties p{"sm-7", "hgw-3", "u"};
  establish_scheme_a(p.dir, "sm-7", "hgw-3", "u", p.ks);
  EXPECT_EQ(code_of([&] { establish_scheme_a(p.dir, "sm-7", "hgw-3", "u", p.ks); }),
            Errc::KeyAlreadyBound);
}

TEST(SchemeB, OneKeyThreeHolders) {
  Parties p{"sm-7", "hgw-3", "u"};
  auto b = establish_scheme_b(p.dir, "sm-7", "hgw-3", "u", p.ks);
  EXPECT_EQ(b.key.holders.size(), 3u);
  EXPECT_EQ(b.handshake.size(), 3u);
  auto ct = p["sm-7"].seal(b.key.key_id, to_bytes("kWh=3.2"));
  EXPECT_EQ(to_string(p["hgw-3"].open(ct)), "kWh=3.2");
  EXPECT_EQ(to_string(p["u"].open(ct)), "kWh=3.2");
}

TEST(SchemeB, UnknownRemoteIsPartyUnknown) {
  Parties p{"sm-7", "hgw-3"};
  EXPECT_EQ(code_of([&] { establish_scheme_b(p.dir, "sm-7", "hgw-3", "ghost", p.ks); }),
            Errc::PartyUnknown);
  EXPECT_TRUE(p["sm-7"].keys().empty());
}

TEST(Keys, FrequencyClassKeysAreSeparate) {
  Parties p{"sm-7", "hgw-3", "cc", "u"};
  auto hf = establish_scheme_b(p.dir, "sm-7", "hgw-3", "cc", p.ks, DataClass::HighFreq).key;
  auto lf = establish_scheme_b(p.dir, "sm-7", "hgw-3", "u", p.ks, DataClass::LowFreq).key;
  EXPECT_NE(hf.key_id, lf.key_id);
  EXPECT_NE(hf.key_bytes, lf.key_bytes);
  auto ct = p["sm-7"].seal(hf.key_id, to_bytes("hf"));
  EXPECT_EQ(code_of([&] { decrypt(lf, ct); }), Errc::AuthFailure);
  // Even with the header rewritten to name the other key, the tag fails.
  ct.key_id = lf.key_id;
  EXPECT_EQ(code_of([&] { decrypt(lf, ct); }), Errc::AuthFailure);
}

TEST(Keys, SameSeedSameKeys) {
  Parties a{"d", "l", "r"}, b{"d", "l", "r"};
  auto ka = establish_scheme_b(a.dir, "d", "l", "r", a.ks).key;
  auto kb = establish_scheme_b(b.dir, "d", "l", "r", b.ks).key;
  EXPECT_EQ(ka, kb);
}

TEST(Aead, RoundTripRandomPlaintexts) {
  Parties p{"a", "b"};
  auto k = establish_scheme_b(p.dir, "a", "b", std::vector<std::string>{}, p.ks).key;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    Bytes pt(rng() % 300);
    for (auto& c : pt) c = static_cast<std::uint8_t>(rng());
    auto ct = p["a"].seal(k.key_id, pt);
    EXPECT_EQ(decrypt(k, ct), pt);
    EXPECT_EQ(Ciphertext::decode(ct.encode()), ct);
  }
}

TEST(Aead, WrongKeyIsAuthFailure) {
  Parties p{"a", "b", "c"};
  auto k1 = establish_scheme_b(p.dir, "a", "b", std::vector<std::string>{}, p.ks).key;
  auto k2 = establish_scheme_b(p.dir, "a", "c", std::vector<std::string>{}, p.ks).key;
  auto ct = p["a"].seal(k1.key_id, to_bytes("p"));
  EXPECT_EQ(code_of([&] { decrypt(k2, ct); }), Errc::AuthFailure);
}

TEST(Aead, EveryBodyAndTagByteFlipFails) {
  Parties p{"a", "b"};
  auto k = establish_scheme_b(p.dir, "a", "b", std::vector<std::string>{}, p.ks).key;
  auto ct = p["a"].seal(k.key_id, to_bytes("reading=12.75 kWh"));
  for (std::size_t i = 0; i < ct.body.size(); ++i) {
    auto t = ct;
    t.body[i] ^= 0x01;
    EXPECT_EQ(code_of([&] { decrypt(k, t); }), Errc::AuthFailure) << "body byte " << i;
  }
  for (std::size_t i = 0; i < ct.tag.size(); ++i) {
    auto t = ct;
    t.tag[i] ^= 0x80;
    EXPECT_EQ(code_of([&] { decrypt(k, t); }), Errc::AuthFailure) << "tag byte " << i;
  }
  for (std::size_t i = 0; i < ct.nonce.size(); ++i) {
    auto t = ct;
    t.nonce[i] ^= 0x01;
    EXPECT_EQ(code_of([&] { decrypt(k, t); }), Errc::AuthFailure) << "nonce byte " << i;
  }
}

TEST(Aead, NoncesNeverRepeatPerHolder) {
  Parties p{"a", "b"};
  auto k = establish_scheme_b(p.dir, "a", "b", std::vector<std::string>{}, p.ks).key;
  std::set<std::array<std::uint8_t, kAeadNonceSize>> seen;
  for (int i = 0; i < 50; ++i) {
    EXPECT_TRUE(seen.insert(p["a"].seal(k.key_id, to_bytes("x")).nonce).second);
    EXPECT_TRUE(seen.insert(p["b"].seal(k.key_id, to_bytes("x")).nonce).second);
  }
}

struct PairFixture : ::testing::Test {
  Parties p{"hgw", "temp", "ac", "tv"};
  PolicyHeader policy{{PolicyRule{"ac", TxType::Access, DeviceId{"temp"}, Action::Allow, 8,
                                  LimitDuration::Hourly}}};
};

TEST_F(PairFixture, AllowedPairGetsKey) {
  auto r = allocate_pair_key(p.dir, "hgw", policy, DeviceId{"ac"}, DeviceId{"temp"}, p.ks);
  ASSERT_TRUE(std::holds_alternative<SharedKey>(r));
  const auto& k = std::get<SharedKey>(r);
  EXPECT_EQ(k.holders, (std::set<std::string>{"ac", "temp"}));
  auto ct = p["temp"].seal(k.key_id, to_bytes("30"));
  EXPECT_EQ(to_string(p["ac"].open(ct)), "30");
  EXPECT_NE(p["hgw"].find(k.key_id), nullptr);
}

TEST_F(PairFixture, UnlistedPairDenied) {
  auto r = allocate_pair_key(p.dir, "hgw", policy, DeviceId{"tv"}, DeviceId{"temp"}, p.ks);
  ASSERT_TRUE(std::holds_alternative<PairKeyDenied>(r));
  EXPECT_EQ(std::get<PairKeyDenied>(r).reason, DenyReason::NoRule);
  EXPECT_TRUE(p["tv"].keys().empty());
}

TEST_F(PairFixture, InvalidateThenReissue) {
  auto k = std::get<SharedKey>(allocate_pair_key(p.dir, "hgw", policy, DeviceId{"ac"}, DeviceId{"temp"}, p.ks));
  auto in_flight = p["temp"].seal(k.key_id, to_bytes("31"));

  auto msgs = invalidate_key(p.dir, "hgw", k.key_id);
  ASSERT_EQ(msgs.size(), 2u);
  for (const auto& m : msgs) apply_control_message(p.dir, m);

  // Sealed before revocation, received after: rejected at receipt.
  EXPECT_EQ(code_of([&] { p["ac"].open(in_flight); }), Errc::KeyInvalid);
  EXPECT_EQ(code_of([&] { p["temp"].seal(k.key_id, to_bytes("x")); }), Errc::KeyInvalid);
  EXPECT_EQ(code_of([&] { invalidate_key(p.dir, "hgw", k.key_id); }), Errc::UnknownKey);

  auto k2 = std::get<SharedKey>(allocate_pair_key(p.dir, "hgw", policy, DeviceId{"ac"}, DeviceId{"temp"}, p.ks));
  EXPECT_NE(k2.key_id, k.key_id);
  EXPECT_TRUE(p["ac"].get(k2.key_id).valid);
  EXPECT_FALSE(p["ac"].get(k.key_id).valid);
}

TEST(Keys, InvalidateUnknownKey) {
  Parties p{"hgw"};
  EXPECT_EQ(code_of([&] { invalidate_key(p.dir, "hgw", "k-missing"); }), Errc::UnknownKey);
}

}  // namespace
}  // namespace dsg
