#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "kalrecon/constraints.hpp"
#include "kalrecon/features.hpp"
#include "kalrecon/synth.hpp"
#include "support/expect.hpp"

using namespace kalrecon;

TEST(Generate, SameConfigSameBytes) {
  GeneratorConfig gc;
  gc.sessions = 50;
  EXPECT_EQ(serialize_pcap(generate(gc)), serialize_pcap(generate(gc)));
  auto other = gc;
  other.seed = 8;
  EXPECT_NE(generate(gc), generate(other));
}

TEST(Generate, DefaultCorpusShape) {
  const auto cap = generate(GeneratorConfig{});
  const auto sessions = group_sessions(cap);
  EXPECT_EQ(sessions.size(), 500u);
  std::set<double> ports;
  std::set<int> ttls;
  for (const auto& s : sessions) {
    EXPECT_GE(s.packets.size(), 3u);
    EXPECT_LE(s.packets.size(), 16u);
    for (const auto& sp : s.packets) {
      ports.insert(sp.packet.src_port);
      ports.insert(sp.packet.dst_port);
      ttls.insert(sp.packet.ip_ttl);
    }
  }
  EXPECT_EQ(ports.size(), 64u);
  EXPECT_EQ(ttls, (std::set<int>{63, 64, 128}));
}

TEST(Generate, EverySessionIsProtocolClean) {
  GeneratorConfig gc;
  gc.sessions = 200;
  gc.seed = 3;
  const auto cap = generate(gc);
  for (const auto& p : cap) {
    EXPECT_FALSE(packet_invariant_violation(p).has_value());
    EXPECT_EQ(p.tcp_chksum, compute_tcp_checksum(p));
  }
  for (std::size_t i = 1; i < cap.size(); ++i) EXPECT_LE(cap[i - 1].timestamp_usec(), cap[i].timestamp_usec());
  for (const auto& s : group_sessions(cap)) {
    EXPECT_TRUE(validate(s.packets).empty());
    const auto& f = s.packets;
    EXPECT_TRUE(f[0].packet.tcp_flags.syn && !f[0].packet.tcp_flags.ack);
    EXPECT_TRUE(f[1].packet.tcp_flags.syn && f[1].packet.tcp_flags.ack);
    EXPECT_EQ(f[1].packet.tcp_ack, f[0].packet.tcp_seq + 1);
    EXPECT_EQ(f[1].ip_direction, 1);
    for (std::size_t i = 1; i < f.size(); ++i) EXPECT_GT(f[i].time_since, f[i - 1].time_since);
  }
}

TEST(Generate, SequenceNumbersAdvanceByPayload) {
  GeneratorConfig gc;
  gc.sessions = 40;
  for (const auto& s : group_sessions(generate(gc))) {
    std::uint32_t next[2] = {s.packets[0].packet.tcp_seq + 1, s.packets[1].packet.tcp_seq + 1};
    for (std::size_t i = 2; i < s.packets.size(); ++i) {
      const auto& sp = s.packets[i];
      if (sp.packet.tcp_flags.rst) break;
      EXPECT_EQ(sp.packet.tcp_seq, next[sp.ip_direction]) << "packet " << i;
      next[sp.ip_direction] += sp.packet.payload_size + (sp.packet.tcp_flags.fin ? 1 : 0);
    }
  }
}

TEST(Generate, MinimalSessionsAreHandshakesOnly) {
  GeneratorConfig gc;
  gc.sessions = 10;
  gc.min_packets = gc.max_packets = 3;
  for (const auto& s : group_sessions(generate(gc))) {
    ASSERT_EQ(s.packets.size(), 3u);
    EXPECT_TRUE(s.packets[2].packet.tcp_flags.ack);
    EXPECT_FALSE(s.packets[2].packet.tcp_flags.syn);
    EXPECT_EQ(s.packets[2].packet.payload_size, 0u);
  }
}

TEST(Generate, SchemaFitsWithExpectedCategories) {
  const auto schema = fit_schema(group_sessions(generate(GeneratorConfig{})), SchemaMode::Kal);
  EXPECT_EQ(std::get<OneHotKind>(schema.feature(FeatureId::ip_ttl).kind).categories.size(), 3u);
  EXPECT_EQ(schema.port_vocabulary().size(), 64u);
}

TEST(GeneratorConfig, ValidationAndJson) {
  GeneratorConfig gc;
  gc.min_packets = 2;
  EXPECT_ERRC(gc.validate(), Errc::ConfigInvalid);
  gc = GeneratorConfig{};
  gc.dataofs = {4};
  EXPECT_ERRC(gc.validate(), Errc::ConfigInvalid);
  gc = GeneratorConfig{};
  gc.client_hosts = gc.server_hosts = gc.server_ports = gc.client_ports = 1;
  EXPECT_ERRC(gc.validate(), Errc::ConfigInvalid);

  gc = GeneratorConfig{};
  gc.sessions = 17;
  gc.ttls = {32};
  const auto back = GeneratorConfig::from_json(gc.to_json());
  EXPECT_EQ(back.to_json(), gc.to_json());
  const auto path = std::filesystem::temp_directory_path() / "kalrecon_gen.json";
  std::ofstream(path) << gc.to_json().dump();
  EXPECT_EQ(load_generator_config(path).sessions, 17u);
  std::ofstream(path) << "{\"sessions\": \"many\"}";
  EXPECT_ERRC(load_generator_config(path), Errc::ConfigInvalid);
  std::filesystem::remove(path);
}
