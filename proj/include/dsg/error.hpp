#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dsg {

enum class Errc {
  ChainLinkMismatch,
  TypeNotAllowed,
  OwnerMismatch,
  PayloadDigestMismatch,
  EmptyBlock,
  EmptyLedger,
  InvalidRule,
  PartyUnknown,
  KeyAlreadyBound,
  UnknownKey,
  KeyInvalid,
  AuthFailure,
  AlreadyOnboarded,
  UnknownDevice,
  SelectorUnresolved,
  ScenarioInvalid,
  ParseError,
  IoError,
};

constexpr std::string_view to_string(Errc e) {
  switch (e) {
    case Errc::ChainLinkMismatch: return "ChainLinkMismatch";
    case Errc::TypeNotAllowed: return "TypeNotAllowed";
    case Errc::OwnerMismatch: return "OwnerMismatch";
    case Errc::PayloadDigestMismatch: return "PayloadDigestMismatch";
    case Errc::EmptyBlock: return "EmptyBlock";
    case Errc::EmptyLedger: return "EmptyLedger";
    case Errc::InvalidRule: return "InvalidRule";
    case Errc::PartyUnknown: return "PartyUnknown";
    case Errc::KeyAlreadyBound: return "KeyAlreadyBound";
    case Errc::UnknownKey: return "UnknownKey";
    case Errc::KeyInvalid: return "KeyInvalid";
    case Errc::AuthFailure: return "AuthFailure";
    case Errc::AlreadyOnboarded: return "AlreadyOnboarded";
    case Errc::UnknownDevice: return "UnknownDevice";
    case Errc::SelectorUnresolved: return "SelectorUnresolved";
    case Errc::ScenarioInvalid: return "ScenarioInvalid";
    case Errc::ParseError: return "ParseError";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace dsg
