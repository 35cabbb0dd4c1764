#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dsg/keys.hpp"
#include "dsg/ledger.hpp"
#include "dsg/policy.hpp"

namespace dsg {

/// HF readings go to the control center, LF readings to the utility.
enum class Channel : std::uint8_t { Hf, Lf };

constexpr Destination destination_of(Channel c) {
  return c == Channel::Hf ? Destination::CC : Destination::Utility;
}

constexpr DataClass data_class_of(Channel c) {
  return c == Channel::Hf ? DataClass::HighFreq : DataClass::LowFreq;
}

constexpr std::string_view to_string(Channel c) { return c == Channel::Hf ? "hf" : "lf"; }

/// What a field device hands to its gateway.
struct DeviceStore {
  DeviceId device;
  Channel channel = Channel::Hf;
  TxType tx_type = TxType::Store;
  Ciphertext ct;
  std::int64_t generated_at_ms = 0;
};

/// Seed for per-device streams; independent of key material draws.
inline std::uint64_t device_seed(std::uint64_t scenario_seed, std::string_view id) {
  auto d = Sha256::digest(to_bytes("dev|" + std::to_string(scenario_seed) + "|" + std::string(id)));
  std::uint64_t s = 0;
  for (int i = 0; i < 8; ++i) s |= static_cast<std::uint64_t>(d.bytes[i]) << (8 * i);
  return s;
}

/// First strictly positive multiple of period after now.
constexpr std::int64_t next_boundary(std::int64_t period_ms, std::int64_t now_ms) {
  return (now_ms / period_ms + 1) * period_ms;
}

constexpr bool on_boundary(std::int64_t period_ms, std::int64_t now_ms) {
  return now_ms > 0 && now_ms % period_ms == 0;
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

struct SmartMeter {
  DeviceId id;
  std::string hgw;
  std::int64_t hf_period_ms = 900'000;
  std::int64_t lf_period_ms = kWeekMs;
  std::string hfuk;
  std::string lfuk;
  double reading = 0.0;  // cumulative kWh
  bool online = true;
  KeyTable keys;
  std::mt19937_64 rng;

  SmartMeter(DeviceId id_, std::string hgw_, std::uint64_t seed)
      : id(std::move(id_)), hgw(std::move(hgw_)), keys(id.value), rng(device_seed(seed, id.value)) {
    reading = 1000.0 + static_cast<double>(rng() % 100'000) / 100.0;
  }

  double advance() {
    reading += 0.05 + static_cast<double>(rng() % 1000) / 1000.0;
    return reading;
  }
};

inline std::string meter_payload(Channel c, std::int64_t t, double kwh) {
  return std::string(to_string(c)) + " t=" + std::to_string(t) + " kwh=" + format_value(kwh);
}

inline DeviceStore meter_emit(SmartMeter& sm, Channel c, TxType type, std::string plaintext,
                              std::int64_t now_ms) {
  const auto& key = c == Channel::Hf ? sm.hfuk : sm.lfuk;
  return DeviceStore{sm.id, c, type, sm.keys.seal(key, to_bytes(plaintext)), now_ms};
}

/// HF at every hf_period boundary, LF at every lf_period boundary; nothing at t=0.
inline std::vector<DeviceStore> sm_tick(SmartMeter& sm, std::int64_t now_ms) {
  std::vector<DeviceStore> out;
  if (!sm.online) return out;
  if (on_boundary(sm.hf_period_ms, now_ms))
    out.push_back(meter_emit(sm, Channel::Hf, TxType::Store,
                             meter_payload(Channel::Hf, now_ms, sm.advance()), now_ms));
  if (on_boundary(sm.lf_period_ms, now_ms))
    out.push_back(meter_emit(sm, Channel::Lf, TxType::Store,
                             meter_payload(Channel::Lf, now_ms, sm.reading), now_ms));
  return out;
}

inline DeviceStore sm_event(SmartMeter& sm, std::string_view event, std::int64_t now_ms) {
  return meter_emit(sm, Channel::Hf, TxType::Ebt,
                    "ebt t=" + std::to_string(now_ms) + " event=" + std::string(event), now_ms);
}

enum class HanRole : std::uint8_t { Sensor, Actuator };

struct HanDevice {
  DeviceId id;
  HanRole role = HanRole::Sensor;
  std::string hgw;
  bool online = true;
  bool actuator_on = false;
  std::string cloud_key;  // empty unless the sensor stores to the CC
  KeyTable keys;

  HanDevice(DeviceId id_, HanRole r, std::string hgw_)
      : id(std::move(id_)), role(r), hgw(std::move(hgw_)), keys(id.value) {}
};

struct HanDevicePair {
  DeviceId sensor;
  DeviceId actuator;
  std::string pair_key;
  double threshold = 25.0;
  std::int64_t period_ms = 900'000;
  double temperature = 22.0;
  std::mt19937_64 rng;
};

struct ActuatorDecision {
  bool on = false;
  bool changed = false;
};

inline double sensor_sample(HanDevicePair& pair) {
  pair.temperature += static_cast<double>(static_cast<int>(pair.rng() % 401) - 200) / 100.0;
  if (pair.temperature < 10.0) pair.temperature = 10.0;
  if (pair.temperature > 40.0) pair.temperature = 40.0;
  return pair.temperature;
}

/// Throws KeyInvalid once the pair key is revoked.
inline Ciphertext sensor_seal(const HanDevicePair& pair, HanDevice& sensor, double value) {
  return sensor.keys.seal(pair.pair_key, to_bytes("temp=" + format_value(value)));
}

inline ActuatorDecision actuator_receive(const HanDevicePair& pair, HanDevice& actuator,
                                         const Ciphertext& ct) {
  auto pt = to_string(actuator.keys.open(ct));
  double value = std::stod(pt.substr(pt.find('=') + 1));
  const bool on = value > pair.threshold;
  ActuatorDecision d{on, on != actuator.actuator_on};
  actuator.actuator_on = on;
  return d;
}

inline ActuatorDecision sensor_report(const HanDevicePair& pair, HanDevice& sensor, HanDevice& actuator,
                                      double value) {
  return actuator_receive(pair, actuator, sensor_seal(pair, sensor, value));
}

struct Rtu {
  DeviceId id;
  std::string ngw;
  std::int64_t report_period_ms = 900'000;
  std::string key;
  double value = 0.0;
  bool online = true;
  KeyTable keys;
  std::mt19937_64 rng;

  Rtu(DeviceId id_, std::string ngw_, std::uint64_t seed)
      : id(std::move(id_)), ngw(std::move(ngw_)), keys(id.value), rng(device_seed(seed, id.value)) {
    value = 230.0;
  }
};

inline std::optional<DeviceStore> rtu_tick(Rtu& rtu, std::int64_t now_ms) {
  if (!rtu.online || !on_boundary(rtu.report_period_ms, now_ms)) return std::nullopt;
  rtu.value = 225.0 + static_cast<double>(rtu.rng() % 1000) / 100.0;
  auto pt = "rtu t=" + std::to_string(now_ms) + " volts=" + format_value(rtu.value);
  return DeviceStore{rtu.id, Channel::Hf, TxType::Store, rtu.keys.seal(rtu.key, to_bytes(pt)), now_ms};
}

}  // namespace dsg
