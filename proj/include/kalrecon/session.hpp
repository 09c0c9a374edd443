#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "kalrecon/error.hpp"
#include "kalrecon/pcap_io.hpp"

namespace kalrecon {

struct Endpoint {
  std::uint32_t ip = 0;
  std::uint16_t port = 0;

  auto operator<=>(const Endpoint&) const = default;
};

/// Direction-free 5-tuple: the lexicographically smaller endpoint comes first.
struct SessionKey {
  Endpoint lo;
  Endpoint hi;
  std::uint8_t proto = kIpProtoTcp;

  static SessionKey of(const ParsedPacket& p) {
    const Endpoint a{p.src_ip, p.src_port};
    const Endpoint b{p.dst_ip, p.dst_port};
    return a <= b ? SessionKey{a, b, p.ip_proto} : SessionKey{b, a, p.ip_proto};
  }

  auto operator<=>(const SessionKey&) const = default;
};

struct SessionPacket {
  ParsedPacket packet;
  std::uint8_t ip_direction = 0;  // 0 = initiator -> responder
  double time_since = 0.0;        // seconds since the session's first packet

  bool operator==(const SessionPacket&) const = default;
};

/// Addressing that is fixed for a whole session and therefore not a model
/// feature. Reconstruction uses it to rebuild addresses and timestamps.
struct SessionContext {
  std::uint32_t initiator_ip = 0;
  std::uint32_t responder_ip = 0;
  std::uint64_t initiator_mac = 0;  // src_mac of initiator -> responder frames
  std::uint64_t responder_mac = 0;  // dst_mac of initiator -> responder frames
  std::uint32_t base_ts_sec = 0;
  std::uint32_t base_ts_usec = 0;
};

struct Session {
  SessionKey key;
  Endpoint initiator;
  std::vector<SessionPacket> packets;
  std::vector<std::size_t> capture_index;  // position of each packet in the input capture

  SessionContext context() const {
    const auto& first = packets.front().packet;
    const bool forward = packets.front().ip_direction == 0;
    SessionContext c;
    c.initiator_ip = forward ? first.src_ip : first.dst_ip;
    c.responder_ip = forward ? first.dst_ip : first.src_ip;
    c.initiator_mac = forward ? first.src_mac : first.dst_mac;
    c.responder_mac = forward ? first.dst_mac : first.src_mac;
    c.base_ts_sec = first.ts_sec;
    c.base_ts_usec = first.ts_usec;
    return c;
  }
};

/// Groups TCP packets by canonical 5-tuple. The initiator is whichever
/// endpoint sent the session's first observed packet, SYN or not.
/// Timestamps that step backwards inside a session are held at the running
/// maximum so time_since stays non-decreasing.
inline std::vector<Session> group_sessions(std::span<const ParsedPacket> packets) {
  std::vector<Session> sessions;
  std::map<SessionKey, std::size_t> index_of;
  std::vector<std::int64_t> last_offset;
  for (std::size_t i = 0; i < packets.size(); ++i) {
    const auto& p = packets[i];
    const SessionKey key = SessionKey::of(p);
    auto [it, inserted] = index_of.try_emplace(key, sessions.size());
    if (inserted) {
      Session s;
      s.key = key;
      s.initiator = Endpoint{p.src_ip, p.src_port};
      sessions.push_back(std::move(s));
      last_offset.push_back(0);
    }
    Session& s = sessions[it->second];
    SessionPacket sp;
    sp.packet = p;
    sp.ip_direction = Endpoint{p.src_ip, p.src_port} == s.initiator ? 0 : 1;
    if (!inserted) {
      const auto base = static_cast<std::int64_t>(s.packets.front().packet.timestamp_usec());
      const auto offset = std::max(static_cast<std::int64_t>(p.timestamp_usec()) - base,
                                   last_offset[it->second]);
      last_offset[it->second] = offset;
      sp.time_since = static_cast<double>(offset) * 1e-6;
    }
    s.packets.push_back(sp);
    s.capture_index.push_back(i);
  }
  // First-packet order equals insertion order because the capture is scanned
  // front to back.
  return sessions;
}

struct SessionSplit {
  std::vector<Session> train;
  std::vector<Session> validation;
};

/// Seeded random partition across sessions. |train| = round(fraction * N),
/// held to at least one session on each side.
inline SessionSplit split_sessions(std::span<const Session> sessions, double train_fraction,
                                   std::uint64_t seed) {
  if (sessions.size() < 2) {
    throw Error(Errc::TooFewSessions, "need at least 2 sessions, got " +
                                          std::to_string(sessions.size()));
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error(Errc::ConfigInvalid, "train fraction must lie in (0, 1)");
  }
  const std::size_t n = sessions.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  SessionSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? split.train : split.validation).push_back(sessions[order[i]]);
  }
  return split;
}

inline std::size_t packet_count(std::span<const Session> sessions) {
  std::size_t n = 0;
  for (const auto& s : sessions) n += s.packets.size();
  return n;
}

/// One JSON object per packet per line, for inspection only.
inline void write_session_dump(std::span<const Session> sessions, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    for (std::size_t i = 0; i < sessions[s].packets.size(); ++i) {
      const auto& sp = sessions[s].packets[i];
      const auto& p = sp.packet;
      nlohmann::json j = {
          {"session", s}, {"index", i}, {"ip_direction", sp.ip_direction},
          {"time_since", sp.time_since}, {"src_ip", p.src_ip}, {"dst_ip", p.dst_ip},
          {"src_port", p.src_port}, {"dst_port", p.dst_port}, {"ip_len", p.ip_len},
          {"ip_id", p.ip_id}, {"ip_ttl", p.ip_ttl}, {"ip_tos", p.ip_tos},
          {"tcp_seq", p.tcp_seq}, {"tcp_ack", p.tcp_ack}, {"tcp_flags", p.tcp_flags.to_byte()},
          {"tcp_window", p.tcp_window}, {"tcp_dataofs", p.tcp_dataofs},
          {"payload_size", p.payload_size}};
      out << j.dump() << '\n';
    }
  }
}

}  // namespace kalrecon
