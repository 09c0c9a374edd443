#pragma once

// Deterministic synthetic TCP captures. Each session opens with a three-way
// handshake, exchanges data with consistent seq/ack arithmetic and closes with
// FIN/ACK or RST, or stays open. All checksums are valid.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "kalrecon/error.hpp"
#include "kalrecon/pcap_io.hpp"

namespace kalrecon {

struct GeneratorConfig {
  std::uint64_t seed = 7;
  std::size_t sessions = 500;
  std::size_t min_packets = 3;
  std::size_t max_packets = 16;
  std::size_t client_hosts = 24;
  std::size_t server_hosts = 6;
  std::size_t server_ports = 8;
  std::size_t client_ports = 56;
  std::vector<std::uint8_t> ttls = {63, 64, 128};
  std::vector<std::uint8_t> tos = {0x00, 0x08, 0x10, 0x28};
  std::vector<std::uint8_t> dataofs = {5, 8};
  double mean_gap_usec = 20'000.0;    // inter-arrival inside a session
  double session_spacing_usec = 200'000.0;
  std::uint32_t max_payload = 1460;
  double ecn_probability = 0.25;
  double close_probability = 0.6;     // FIN close when enough packets remain
  double reset_probability = 0.1;
  double dont_fragment_probability = 0.7;

  void validate() const {
    auto fail = [](const std::string& why) { throw Error(Errc::ConfigInvalid, why); };
    if (sessions == 0) fail("sessions must be positive");
    if (min_packets < 3 || max_packets < min_packets) fail("packets per session must satisfy 3 <= min <= max");
    if (client_hosts == 0 || server_hosts == 0) fail("host pools must be non-empty");
    if (server_ports == 0 || client_ports == 0 || server_ports + client_ports > 64512) fail("bad port pool sizes");
    if (ttls.empty() || tos.empty() || dataofs.empty()) fail("TTL, TOS and dataofs sets must be non-empty");
    for (auto d : dataofs) {
      if (d < 5 || d > 15) fail("dataofs outside 5..15");
    }
    if (max_payload == 0 || max_payload + 20u + 60u > 0xffffu) fail("bad max_payload");
    if (!(mean_gap_usec >= 1.0) || !(session_spacing_usec >= 0.0)) fail("bad timing parameters");
    for (double p : {ecn_probability, close_probability, reset_probability, dont_fragment_probability}) {
      if (!(p >= 0.0 && p <= 1.0)) fail("probabilities must lie in [0, 1]");
    }
    if (static_cast<double>(client_hosts) * static_cast<double>(client_ports) * static_cast<double>(server_hosts) *
            static_cast<double>(server_ports) <
        2.0 * static_cast<double>(sessions)) {
      fail("endpoint pools too small for unique sessions");
    }
  }

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"sessions", sessions},
            {"min_packets", min_packets},
            {"max_packets", max_packets},
            {"client_hosts", client_hosts},
            {"server_hosts", server_hosts},
            {"server_ports", server_ports},
            {"client_ports", client_ports},
            {"ttls", ttls},
            {"tos", tos},
            {"dataofs", dataofs},
            {"mean_gap_usec", mean_gap_usec},
            {"session_spacing_usec", session_spacing_usec},
            {"max_payload", max_payload},
            {"ecn_probability", ecn_probability},
            {"close_probability", close_probability},
            {"reset_probability", reset_probability},
            {"dont_fragment_probability", dont_fragment_probability}};
  }

  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    try {
      c.seed = j.value("seed", c.seed);
      c.sessions = j.value("sessions", c.sessions);
      c.min_packets = j.value("min_packets", c.min_packets);
      c.max_packets = j.value("max_packets", c.max_packets);
      c.client_hosts = j.value("client_hosts", c.client_hosts);
      c.server_hosts = j.value("server_hosts", c.server_hosts);
      c.server_ports = j.value("server_ports", c.server_ports);
      c.client_ports = j.value("client_ports", c.client_ports);
      c.ttls = j.value("ttls", c.ttls);
      c.tos = j.value("tos", c.tos);
      c.dataofs = j.value("dataofs", c.dataofs);
      c.mean_gap_usec = j.value("mean_gap_usec", c.mean_gap_usec);
      c.session_spacing_usec = j.value("session_spacing_usec", c.session_spacing_usec);
      c.max_payload = j.value("max_payload", c.max_payload);
      c.ecn_probability = j.value("ecn_probability", c.ecn_probability);
      c.close_probability = j.value("close_probability", c.close_probability);
      c.reset_probability = j.value("reset_probability", c.reset_probability);
      c.dont_fragment_probability = j.value("dont_fragment_probability", c.dont_fragment_probability);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ConfigInvalid, e.what());
    }
    c.validate();
    return c;
  }
};

namespace synth_detail {

struct Host {
  std::uint32_t ip = 0;
  std::uint64_t mac = 0;
  std::uint8_t ttl = 64;
};

struct Side {
  const Host* host = nullptr;
  std::uint16_t port = 0;
  std::uint32_t next_seq = 0;  // sequence number of the next byte this side sends
  std::uint16_t ip_id = 0;
  std::uint16_t window = 0;
};

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[static_cast<std::size_t>(rng() % v.size())];
}

inline double uniform(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace synth_detail

/// Generated capture, globally ordered by timestamp. Identical configs give
/// identical output.
inline std::vector<ParsedPacket> generate(const GeneratorConfig& cfg) {
  using namespace synth_detail;
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);

  std::vector<Host> clients(cfg.client_hosts), servers(cfg.server_hosts);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    clients[i] = {0x0a000000u + 0x0100u + static_cast<std::uint32_t>(i) * 3u + 1u,
                  0x020000000000ull | (rng() & 0xffffffffull), pick(cfg.ttls, rng)};
  }
  for (std::size_t i = 0; i < servers.size(); ++i) {
    servers[i] = {0xc0a80000u + 0x0a00u + static_cast<std::uint32_t>(i) * 7u + 2u,
                  0x060000000000ull | (rng() & 0xffffffffull), pick(cfg.ttls, rng)};
  }
  // Server ports below 1024 where possible, client ports in the ephemeral range.
  std::vector<std::uint16_t> server_ports, client_ports;
  std::set<std::uint16_t> used;
  static constexpr std::uint16_t kWellKnown[] = {80, 443, 22, 25, 53, 110, 143, 993, 3306, 8080, 21, 23};
  for (std::size_t i = 0; server_ports.size() < cfg.server_ports; ++i) {
    const auto p = i < std::size(kWellKnown) ? kWellKnown[i] : static_cast<std::uint16_t>(1024 + i);
    if (used.insert(p).second) server_ports.push_back(p);
  }
  while (client_ports.size() < cfg.client_ports) {
    const auto p = static_cast<std::uint16_t>(32768 + rng() % 28000);
    if (used.insert(p).second) client_ports.push_back(p);
  }

  std::vector<ParsedPacket> capture;
  std::set<std::tuple<std::uint32_t, std::uint16_t, std::uint32_t, std::uint16_t>> tuples;
  std::uint64_t session_start = 1'700'000'000ull * 1'000'000ull;
  std::exponential_distribution<double> gap(1.0 / cfg.mean_gap_usec);
  std::exponential_distribution<double> spacing(cfg.session_spacing_usec > 0 ? 1.0 / cfg.session_spacing_usec : 1.0);

  for (std::size_t s = 0; s < cfg.sessions; ++s) {
    // Cycling the port pools first guarantees every port occurs in the corpus.
    const std::uint16_t cport = client_ports[s % client_ports.size()];
    const std::uint16_t sport = s < server_ports.size() ? server_ports[s] : pick(server_ports, rng);
    const Host* client = nullptr;
    const Host* server = nullptr;
    do {
      client = &pick(clients, rng);
      server = &pick(servers, rng);
    } while (!tuples.emplace(client->ip, cport, server->ip, sport).second);

    const std::uint8_t tos = pick(cfg.tos, rng);
    const std::uint8_t dataofs = pick(cfg.dataofs, rng);
    const std::uint8_t ip_flags = uniform(rng) < cfg.dont_fragment_probability ? 2 : 0;
    const bool ecn = uniform(rng) < cfg.ecn_probability;
    const std::size_t n = cfg.min_packets + static_cast<std::size_t>(rng() % (cfg.max_packets - cfg.min_packets + 1));

    Side c{client, cport, static_cast<std::uint32_t>(rng()), static_cast<std::uint16_t>(rng()),
           static_cast<std::uint16_t>(8192 + rng() % 57000)};
    Side v{server, sport, static_cast<std::uint32_t>(rng()), static_cast<std::uint16_t>(rng()),
           static_cast<std::uint16_t>(8192 + rng() % 57000)};

    // Plan: handshake (3), data, then an optional close.
    enum class Close { None, Fin, Reset };
    Close close = Close::None;
    const std::size_t after_handshake = n - 3;
    const double roll = uniform(rng);
    if (after_handshake >= 1 && roll < cfg.reset_probability) {
      close = Close::Reset;
    } else if (after_handshake >= 3 && roll < cfg.reset_probability + cfg.close_probability) {
      close = Close::Fin;
    }
    const std::size_t close_len = close == Close::Fin ? 3 : (close == Close::Reset ? 1 : 0);
    const std::size_t data_len = after_handshake - close_len;

    std::uint64_t t = session_start;
    auto emit = [&](Side& from, Side& to, TcpFlags flags, std::uint32_t payload, bool ack_peer) {
      ParsedPacket p;
      p.ts_sec = static_cast<std::uint32_t>(t / 1'000'000);
      p.ts_usec = static_cast<std::uint32_t>(t % 1'000'000);
      p.src_mac = from.host->mac;
      p.dst_mac = to.host->mac;
      p.ip_tos = tos;
      p.ip_id = from.ip_id++;
      p.ip_flags = ip_flags;
      p.ip_ttl = from.host->ttl;
      p.src_ip = from.host->ip;
      p.dst_ip = to.host->ip;
      p.src_port = from.port;
      p.dst_port = to.port;
      p.tcp_seq = from.next_seq;
      p.tcp_ack = ack_peer ? to.next_seq : 0;
      p.tcp_dataofs = dataofs;
      p.tcp_flags = flags;
      // Windows drift a little around each side's base value.
      p.tcp_window = static_cast<std::uint16_t>(std::clamp<int>(from.window + static_cast<int>(rng() % 513) - 256, 1, 0xffff));
      p.payload_size = payload;
      p.ip_len = static_cast<std::uint16_t>(20 + 4 * dataofs + payload);
      p.ip_chksum = compute_ip_checksum(p);
      p.tcp_chksum = compute_tcp_checksum(p);
      from.next_seq += payload + (flags.syn ? 1u : 0u) + (flags.fin ? 1u : 0u);
      capture.push_back(p);
      t += 1 + static_cast<std::uint64_t>(gap(rng));
    };

    TcpFlags syn;
    syn.syn = true;
    syn.ece = ecn;
    syn.cwr = ecn;
    emit(c, v, syn, 0, false);
    TcpFlags synack;
    synack.syn = synack.ack = true;
    synack.ece = ecn;
    emit(v, c, synack, 0, true);
    TcpFlags ack;
    ack.ack = true;
    emit(c, v, ack, 0, true);

    bool client_turn = true;
    for (std::size_t i = 0; i < data_len; ++i) {
      // Requests from the client, responses from the server, occasional pure ACKs.
      if (uniform(rng) < 0.35) client_turn = !client_turn;
      Side& from = client_turn ? c : v;
      Side& to = client_turn ? v : c;
      const bool pure_ack = uniform(rng) < 0.25;
      TcpFlags f;
      f.ack = true;
      f.psh = !pure_ack;
      const std::uint32_t payload =
          pure_ack ? 0u
                   : (client_turn ? 1u + static_cast<std::uint32_t>(rng() % std::min<std::uint32_t>(cfg.max_payload, 600))
                                  : 1u + static_cast<std::uint32_t>(rng() % cfg.max_payload));
      emit(from, to, f, payload, true);
      client_turn = !client_turn;
    }

    if (close == Close::Fin) {
      const bool client_closes = uniform(rng) < 0.5;
      Side& a = client_closes ? c : v;
      Side& b = client_closes ? v : c;
      TcpFlags fin;
      fin.fin = fin.ack = true;
      emit(a, b, fin, 0, true);
      emit(b, a, fin, 0, true);
      emit(a, b, ack, 0, true);
    } else if (close == Close::Reset) {
      const bool client_resets = uniform(rng) < 0.5;
      TcpFlags rst;
      rst.rst = rst.ack = true;
      if (client_resets) {
        emit(c, v, rst, 0, true);
      } else {
        emit(v, c, rst, 0, true);
      }
    }
    session_start += 1 + static_cast<std::uint64_t>(spacing(rng));
  }

  std::stable_sort(capture.begin(), capture.end(), [](const ParsedPacket& a, const ParsedPacket& b) {
    return a.timestamp_usec() < b.timestamp_usec();
  });
  return capture;
}

inline GeneratorConfig load_generator_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  try {
    return GeneratorConfig::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::ConfigInvalid, e.what());
  }
}

}  // namespace kalrecon
