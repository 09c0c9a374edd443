#pragma once

// Protocol rules for decoded sessions: validate() reports, enforce() repairs.
//
// Default rules, in repair order:
//   R1  time_since starts at 0 and never decreases
//   R2  ip_version = 4
//   R3  ip_proto = 6
//   R6  header fields inside their wire ranges
//   R10 every packet carries the session's endpoint pair
//   R4  ip_len = 4 ihl + 4 dataofs + payload_size
//   R5  ip_chksum matches the header
//   R7  SYN excludes FIN and RST
//   R8  tcp_urgptr != 0 requires URG
//   R9  first packet carries SYN (report only)
//
// R6 runs before R4 and R5 because both read fields R6 may clamp, and R10
// before R5 because the checksum covers the addresses. R10 keeps a
// reconstructed session a single flow when it is written out and re-read.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "kalrecon/error.hpp"
#include "kalrecon/pcap_io.hpp"
#include "kalrecon/session.hpp"

namespace kalrecon {

enum class Severity { Repairable, ReportOnly };

struct Violation {
  std::string rule;
  std::size_t packet = 0;
  std::string observed;
  std::optional<std::string> repaired;

  bool operator==(const Violation&) const = default;
};

using PacketSequence = std::vector<SessionPacket>;

struct Rule {
  std::string id;
  std::string description;
  Severity severity = Severity::Repairable;
  bool enabled = true;
  // Appends one Violation per offending packet.
  std::function<void(const PacketSequence&, std::vector<Violation>&)> check;
  // Fixes the offending packets in place and records what it changed.
  std::function<void(PacketSequence&, std::vector<Violation>&)> repair;
};

namespace rules {

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

template <typename T>
std::string fmt_int(T v) {
  return std::to_string(static_cast<std::uint64_t>(v));
}

// R1 -----------------------------------------------------------------------

inline void check_time(const PacketSequence& s, std::vector<Violation>& out) {
  double running = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double t = s[i].time_since;
    const bool bad = !std::isfinite(t) || (i == 0 ? t != 0.0 : t < running);
    if (bad) {
      out.push_back({"R1", i, fmt(t), std::nullopt});
    } else {
      running = t;
    }
  }
}

inline void repair_time(PacketSequence& s, std::vector<Violation>& out) {
  double running = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double& t = s[i].time_since;
    const bool bad = !std::isfinite(t) || (i == 0 ? t != 0.0 : t < running);
    if (bad) {
      const double before = t;
      t = running;
      out.push_back({"R1", i, fmt(before), fmt(t)});
    }
    running = t;
  }
}

// R2 / R3 ------------------------------------------------------------------

template <auto Field, std::uint8_t Value>
void check_constant(const char* id, const PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].packet.*Field != Value) out.push_back({id, i, fmt_int(s[i].packet.*Field), std::nullopt});
  }
}

template <auto Field, std::uint8_t Value>
void repair_constant(const char* id, PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& v = s[i].packet.*Field;
    if (v != Value) {
      out.push_back({id, i, fmt_int(v), fmt_int(Value)});
      v = Value;
    }
  }
}

// R6 -----------------------------------------------------------------------

/// Largest payload that still fits the 16-bit ip_len.
inline std::uint32_t max_payload(const ParsedPacket& p) {
  const std::uint32_t headers = 4u * std::clamp<std::uint32_t>(p.ip_ihl, 5, 15) +
                                4u * std::clamp<std::uint32_t>(p.tcp_dataofs, 5, 15);
  return 0xffffu - headers;
}

struct RangeField {
  const char* name;
  std::function<std::uint64_t(const SessionPacket&)> get;
  std::function<void(SessionPacket&, std::uint64_t)> set;
  std::function<std::uint64_t(const SessionPacket&)> lo;
  std::function<std::uint64_t(const SessionPacket&)> hi;
};

inline const std::vector<RangeField>& range_fields() {
  auto constant = [](std::uint64_t v) { return [v](const SessionPacket&) { return v; }; };
  static const std::vector<RangeField> fields = {
      {"ip_ihl", [](const SessionPacket& s) -> std::uint64_t { return s.packet.ip_ihl; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.ip_ihl = static_cast<std::uint8_t>(v); }, constant(5),
       constant(15)},
      {"tcp_dataofs", [](const SessionPacket& s) -> std::uint64_t { return s.packet.tcp_dataofs; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.tcp_dataofs = static_cast<std::uint8_t>(v); },
       constant(5), constant(15)},
      {"ip_flags", [](const SessionPacket& s) -> std::uint64_t { return s.packet.ip_flags; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.ip_flags = static_cast<std::uint8_t>(v); },
       constant(0), constant(7)},
      {"ip_frag", [](const SessionPacket& s) -> std::uint64_t { return s.packet.ip_frag; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.ip_frag = static_cast<std::uint16_t>(v); },
       constant(0), constant(0x1fff)},
      {"src_mac", [](const SessionPacket& s) -> std::uint64_t { return s.packet.src_mac; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.src_mac = v; }, constant(0), constant(kMacMax)},
      {"dst_mac", [](const SessionPacket& s) -> std::uint64_t { return s.packet.dst_mac; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.dst_mac = v; }, constant(0), constant(kMacMax)},
      {"ts_usec", [](const SessionPacket& s) -> std::uint64_t { return s.packet.ts_usec; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.ts_usec = static_cast<std::uint32_t>(v); },
       constant(0), constant(999'999)},
      {"ip_direction", [](const SessionPacket& s) -> std::uint64_t { return s.ip_direction; },
       [](SessionPacket& s, std::uint64_t v) { s.ip_direction = static_cast<std::uint8_t>(v); },
       constant(0), constant(1)},
      {"payload_size", [](const SessionPacket& s) -> std::uint64_t { return s.packet.payload_size; },
       [](SessionPacket& s, std::uint64_t v) { s.packet.payload_size = static_cast<std::uint32_t>(v); },
       constant(0), [](const SessionPacket& s) -> std::uint64_t { return max_payload(s.packet); }},
  };
  return fields;
}

inline void check_ranges(const PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (const auto& f : range_fields()) {
      const auto v = f.get(s[i]);
      if (v < f.lo(s[i]) || v > f.hi(s[i])) {
        out.push_back({"R6", i, std::string(f.name) + "=" + fmt_int(v), std::nullopt});
      }
    }
  }
}

inline void repair_ranges(PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    // Field order matters: payload_size's bound reads the clamped ihl/dataofs.
    for (const auto& f : range_fields()) {
      const auto v = f.get(s[i]);
      const auto fixed = std::clamp(v, f.lo(s[i]), f.hi(s[i]));
      if (fixed != v) {
        f.set(s[i], fixed);
        out.push_back({"R6", i, std::string(f.name) + "=" + fmt_int(v),
                       std::string(f.name) + "=" + fmt_int(fixed)});
      }
    }
  }
}

// R4 -----------------------------------------------------------------------

inline std::uint64_t expected_ip_len(const ParsedPacket& p) {
  return 4ull * p.ip_ihl + 4ull * p.tcp_dataofs + p.payload_size;
}

inline void check_length(const PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].packet.ip_len != expected_ip_len(s[i].packet)) {
      out.push_back({"R4", i, fmt_int(s[i].packet.ip_len), std::nullopt});
    }
  }
}

inline void repair_length(PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& p = s[i].packet;
    const std::uint64_t want = expected_ip_len(p);
    if (p.ip_len != want) {
      // Without R6 having run, `want` may not fit; saturate rather than wrap.
      const auto fixed = static_cast<std::uint16_t>(std::min<std::uint64_t>(want, 0xffff));
      out.push_back({"R4", i, fmt_int(p.ip_len), fmt_int(fixed)});
      p.ip_len = fixed;
    }
  }
}

// R5 -----------------------------------------------------------------------

inline void check_checksum(const PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].packet.ip_chksum != compute_ip_checksum(s[i].packet)) {
      out.push_back({"R5", i, fmt_int(s[i].packet.ip_chksum), std::nullopt});
    }
  }
}

inline void repair_checksum(PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& p = s[i].packet;
    const std::uint16_t want = compute_ip_checksum(p);
    if (p.ip_chksum != want) {
      out.push_back({"R5", i, fmt_int(p.ip_chksum), fmt_int(want)});
      p.ip_chksum = want;
    }
  }
}

// R7 -----------------------------------------------------------------------

inline std::string flag_text(const TcpFlags& f) {
  return "flags=" + fmt_int(f.to_byte());
}

inline void check_flags(const PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& f = s[i].packet.tcp_flags;
    if (f.syn && (f.fin || f.rst)) out.push_back({"R7", i, flag_text(f), std::nullopt});
  }
}

inline void repair_flags(PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& f = s[i].packet.tcp_flags;
    if (f.syn && (f.fin || f.rst)) {
      const std::string before = flag_text(f);
      f.fin = false;
      f.rst = false;
      out.push_back({"R7", i, before, flag_text(f)});
    }
  }
}

// R8 -----------------------------------------------------------------------

inline void check_urgent(const PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& p = s[i].packet;
    if (p.tcp_urgptr != 0 && !p.tcp_flags.urg) out.push_back({"R8", i, fmt_int(p.tcp_urgptr), std::nullopt});
  }
}

inline void repair_urgent(PacketSequence& s, std::vector<Violation>& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& p = s[i].packet;
    if (p.tcp_urgptr != 0 && !p.tcp_flags.urg) {
      out.push_back({"R8", i, fmt_int(p.tcp_urgptr), "0"});
      p.tcp_urgptr = 0;
    }
  }
}

// R9 -----------------------------------------------------------------------

inline void check_opening_syn(const PacketSequence& s, std::vector<Violation>& out) {
  if (!s.empty() && !s.front().packet.tcp_flags.syn) out.push_back({"R9", 0, flag_text(s.front().packet.tcp_flags), std::nullopt});
}

// R10 ----------------------------------------------------------------------

/// (initiator ip, initiator port, responder ip, responder port) as seen from
/// the packet's direction.
using EndpointPair = std::tuple<std::uint32_t, std::uint16_t, std::uint32_t, std::uint16_t>;

inline EndpointPair oriented(const SessionPacket& sp) {
  const auto& p = sp.packet;
  return sp.ip_direction == 0 ? EndpointPair{p.src_ip, p.src_port, p.dst_ip, p.dst_port}
                              : EndpointPair{p.dst_ip, p.dst_port, p.src_ip, p.src_port};
}

/// Most frequent oriented pair; ties go to the earliest first occurrence.
inline EndpointPair majority_pair(const PacketSequence& s) {
  std::map<EndpointPair, std::pair<std::size_t, std::size_t>> tally;  // count, first index
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto [it, fresh] = tally.try_emplace(oriented(s[i]), 0, i);
    ++it->second.first;
  }
  EndpointPair best{};
  std::size_t best_count = 0;
  std::size_t best_first = 0;
  for (const auto& [pair, stat] : tally) {
    if (stat.first > best_count || (stat.first == best_count && stat.second < best_first)) {
      best = pair;
      best_count = stat.first;
      best_first = stat.second;
    }
  }
  return best;
}

inline std::string pair_text(const EndpointPair& e) {
  return fmt_int(std::get<0>(e)) + ":" + fmt_int(std::get<1>(e)) + ">" + fmt_int(std::get<2>(e)) + ":" +
         fmt_int(std::get<3>(e));
}

inline void check_endpoints(const PacketSequence& s, std::vector<Violation>& out) {
  if (s.empty()) return;
  const EndpointPair want = majority_pair(s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (oriented(s[i]) != want) out.push_back({"R10", i, pair_text(oriented(s[i])), std::nullopt});
  }
}

inline void repair_endpoints(PacketSequence& s, std::vector<Violation>& out) {
  if (s.empty()) return;
  const EndpointPair want = majority_pair(s);
  const auto [ii, ip, ri, rp] = want;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (oriented(s[i]) == want) continue;
    const std::string before = pair_text(oriented(s[i]));
    auto& p = s[i].packet;
    if (s[i].ip_direction == 0) {
      std::tie(p.src_ip, p.src_port, p.dst_ip, p.dst_port) = std::tie(ii, ip, ri, rp);
    } else {
      std::tie(p.src_ip, p.src_port, p.dst_ip, p.dst_port) = std::tie(ri, rp, ii, ip);
    }
    out.push_back({"R10", i, before, pair_text(want)});
  }
}

}  // namespace rules

class ConstraintSpec {
 public:
  explicit ConstraintSpec(std::vector<Rule> rules) : rules_(std::move(rules)) {
    for (std::size_t i = 0; i < rules_.size(); ++i) {
      for (std::size_t j = i + 1; j < rules_.size(); ++j) {
        if (rules_[i].id == rules_[j].id) throw Error(Errc::ConfigInvalid, "duplicate rule id " + rules_[i].id);
      }
    }
  }

  static ConstraintSpec defaults() {
    using namespace rules;
    std::vector<Rule> r;
    r.push_back({"R1", "time_since starts at 0 and is non-decreasing", Severity::Repairable, true, check_time,
                 repair_time});
    r.push_back({"R2", "ip_version is 4", Severity::Repairable, true,
                 [](const PacketSequence& s, std::vector<Violation>& v) {
                   check_constant<&ParsedPacket::ip_version, 4>("R2", s, v);
                 },
                 [](PacketSequence& s, std::vector<Violation>& v) {
                   repair_constant<&ParsedPacket::ip_version, 4>("R2", s, v);
                 }});
    r.push_back({"R3", "ip_proto is TCP", Severity::Repairable, true,
                 [](const PacketSequence& s, std::vector<Violation>& v) {
                   check_constant<&ParsedPacket::ip_proto, kIpProtoTcp>("R3", s, v);
                 },
                 [](PacketSequence& s, std::vector<Violation>& v) {
                   repair_constant<&ParsedPacket::ip_proto, kIpProtoTcp>("R3", s, v);
                 }});
    r.push_back({"R6", "header fields lie within their wire ranges", Severity::Repairable, true, check_ranges,
                 repair_ranges});
    r.push_back({"R10", "all packets share the session's endpoint pair", Severity::Repairable, true,
                 check_endpoints, repair_endpoints});
    r.push_back({"R4", "ip_len = 4*ihl + 4*dataofs + payload", Severity::Repairable, true, check_length,
                 repair_length});
    r.push_back({"R5", "ip_chksum matches the header", Severity::Repairable, true, check_checksum,
                 repair_checksum});
    r.push_back({"R7", "SYN is never combined with FIN or RST", Severity::Repairable, true, check_flags,
                 repair_flags});
    r.push_back({"R8", "non-zero urgent pointer requires URG", Severity::Repairable, true, check_urgent,
                 repair_urgent});
    r.push_back({"R9", "session opens with SYN", Severity::ReportOnly, true, check_opening_syn, nullptr});
    return ConstraintSpec(std::move(r));
  }

  const std::vector<Rule>& rules() const { return rules_; }

  const Rule* find(std::string_view id) const {
    for (const auto& r : rules_) {
      if (r.id == id) return &r;
    }
    return nullptr;
  }

  void set_enabled(std::string_view id, bool on) {
    for (auto& r : rules_) {
      if (r.id == id) {
        r.enabled = on;
        return;
      }
    }
    throw Error(Errc::ConfigInvalid, "unknown rule " + std::string(id));
  }

  bool is_repairable(std::string_view id) const {
    const Rule* r = find(id);
    return r != nullptr && r->severity == Severity::Repairable;
  }

 private:
  std::vector<Rule> rules_;
};

/// Every enabled rule's findings, in rule order. Never mutates.
inline std::vector<Violation> validate(const PacketSequence& session,
                                       const ConstraintSpec& spec = ConstraintSpec::defaults()) {
  std::vector<Violation> out;
  for (const auto& r : spec.rules()) {
    if (r.enabled && r.check) r.check(session, out);
  }
  return out;
}

inline std::size_t count_repairable(const std::vector<Violation>& vs, const ConstraintSpec& spec) {
  return static_cast<std::size_t>(
      std::count_if(vs.begin(), vs.end(), [&](const Violation& v) { return spec.is_repairable(v.rule); }));
}

struct EnforceResult {
  PacketSequence session;
  std::vector<Violation> violations;  // repairs made plus report-only findings
};

/// Applies each enabled repair in rule order. Report-only rules are checked
/// on the repaired session and listed without a repaired value.
inline EnforceResult enforce(PacketSequence session, const ConstraintSpec& spec = ConstraintSpec::defaults()) {
  EnforceResult out;
  for (const auto& r : spec.rules()) {
    if (r.enabled && r.severity == Severity::Repairable && r.repair) r.repair(session, out.violations);
  }
  for (const auto& r : spec.rules()) {
    if (r.enabled && r.severity == Severity::ReportOnly && r.check) r.check(session, out.violations);
  }
  out.session = std::move(session);
  return out;
}

struct SessionViolation {
  std::size_t session = 0;
  Violation violation;
};

inline void write_violations_csv(const std::vector<SessionViolation>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  out << "rule,session,packet,before,after\n";
  for (const auto& r : rows) {
    out << r.violation.rule << ',' << r.session << ',' << r.violation.packet << ',' << r.violation.observed << ','
        << r.violation.repaired.value_or("") << '\n';
  }
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

}  // namespace kalrecon
