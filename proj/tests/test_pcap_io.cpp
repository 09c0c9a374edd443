#include <gtest/gtest.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <random>

#include "kalrecon/pcap_io.hpp"
#include "support/fuzz.hpp"

using namespace kalrecon;

namespace {

std::vector<std::uint8_t> hex_bytes(std::initializer_list<std::uint16_t> words) {
  std::vector<std::uint8_t> out;
  for (auto w : words) {
    out.push_back(static_cast<std::uint8_t>(w >> 8));
    out.push_back(static_cast<std::uint8_t>(w & 0xff));
  }
  return out;
}

// Straight 16-bit word sum with end-around carry, written independently of
// the library helpers.
std::uint16_t reference_checksum(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i + 1 < bytes.size(); i += 2) sum += (bytes[i] << 8) | bytes[i + 1];
  if (bytes.size() % 2) sum += bytes.back() << 8;
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum & 0xffff);
}

ParsedPacket sample_packet() {
  ParsedPacket p;
  p.ts_sec = 1'700'000'000;
  p.ts_usec = 123'456;
  p.src_mac = 0x0200deadbeefULL;
  p.dst_mac = 0x06000badf00dULL;
  p.ip_tos = 0x10;
  p.ip_id = 0x1c46;
  p.ip_flags = 2;
  p.ip_ttl = 64;
  p.src_ip = 0xc0a80001;
  p.dst_ip = 0xc0a800c7;
  p.src_port = 43512;
  p.dst_port = 443;
  p.tcp_seq = 0x01020304;
  p.tcp_ack = 0xa0b0c0d0;
  p.tcp_dataofs = 8;
  p.tcp_flags.ack = true;
  p.tcp_flags.psh = true;
  p.tcp_window = 501;
  p.payload_size = 100;
  p.ip_len = 20 + 32 + 100;
  p.ip_chksum = compute_ip_checksum(p);
  p.tcp_chksum = compute_tcp_checksum(p);
  return p;
}

}  // namespace

TEST(Checksum, WorkedIpv4HeaderExample) {
  // Header with its checksum field zeroed; the filled-in header carries b861.
  const auto zeroed = hex_bytes({0x4500, 0x0073, 0x0000, 0x4000, 0x4011, 0x0000, 0xc0a8, 0x0001, 0xc0a8, 0x00c7});
  EXPECT_EQ(ipv4_header_checksum(zeroed), 0xb861);
  const auto filled = hex_bytes({0x4500, 0x0073, 0x0000, 0x4000, 0x4011, 0xb861, 0xc0a8, 0x0001, 0xc0a8, 0x00c7});
  EXPECT_EQ(ipv4_header_checksum(filled), 0x0000);
}

TEST(Checksum, OddLengthIsRejected) {
  const std::vector<std::uint8_t> odd(19, 0);
  try {
    ipv4_header_checksum(odd);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::LengthNotMultipleOfTwo);
  }
}

TEST(Checksum, AgreesWithReferenceOnRandomHeaders) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::uint8_t> h(4 * (5 + rng() % 11));
    for (auto& b : h) b = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(ipv4_header_checksum(h), reference_checksum(h));
  }
}

TEST(Checksum, TcpPseudoHeaderMatchesReference) {
  const ParsedPacket p = sample_packet();
  std::vector<std::uint8_t> bytes = {0xc0, 0xa8, 0x00, 0x01, 0xc0, 0xa8, 0x00, 0xc7, 0x00, 0x06};
  const std::uint16_t tcp_len = 32 + 100;
  bytes.push_back(tcp_len >> 8);
  bytes.push_back(tcp_len & 0xff);
  ParsedPacket z = p;
  z.tcp_chksum = 0;
  const auto header = tcp_header_bytes(z);
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.resize(bytes.size() + 100, 0);
  EXPECT_EQ(compute_tcp_checksum(p), reference_checksum(bytes));
}

TEST(Checksum, ValidHeaderSumsToZero) {
  const ParsedPacket p = sample_packet();
  EXPECT_EQ(ipv4_header_checksum(ipv4_header_bytes(p)), 0);
}

TEST(PcapRoundTrip, SamplePacketSurvivesBothByteOrders) {
  const std::vector<ParsedPacket> packets = {sample_packet()};
  auto bytes = serialize_pcap(packets);
  EXPECT_EQ(parse_pcap(bytes).packets, packets);

  // Re-encode the file and record headers in the opposite byte order.
  auto swap32 = [&](std::size_t at) { std::reverse(bytes.begin() + at, bytes.begin() + at + 4); };
  auto swap16 = [&](std::size_t at) { std::reverse(bytes.begin() + at, bytes.begin() + at + 2); };
  swap32(0);
  swap16(4);
  swap16(6);
  for (std::size_t at : {8, 12, 16, 20}) swap32(at);
  for (std::size_t at : {24, 28, 32, 36}) swap32(at);
  const auto swapped = parse_pcap(bytes);
  EXPECT_EQ(swapped.packets, packets);
  EXPECT_EQ(swapped.header.version_major, 2);
}

TEST(PcapRoundTrip, FuzzedCapturesAreFieldExact) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto packets = testkit::random_capture(rng);
    ASSERT_EQ(parse_pcap(serialize_pcap(packets)).packets, packets);
  }
}

TEST(PcapRoundTrip, FileWriteAndRead) {
  const auto path = std::filesystem::temp_directory_path() / "kalrecon_pcap_io_test.pcap";
  const std::vector<ParsedPacket> packets = {sample_packet(), sample_packet()};
  const auto written = write_pcap(packets, path);
  EXPECT_EQ(written, std::filesystem::file_size(path));
  EXPECT_EQ(read_pcap(path).packets, packets);
  std::filesystem::remove(path);
}

TEST(PcapRoundTrip, EmptyCapture) {
  EXPECT_TRUE(parse_pcap(serialize_pcap({})).packets.empty());
}

TEST(PcapErrors, BadMagic) {
  auto bytes = serialize_pcap({});
  bytes[0] ^= 0xff;
  try {
    parse_pcap(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MalformedFileHeader);
  }
}

TEST(PcapErrors, ShortHeader) {
  const std::vector<std::uint8_t> bytes(10, 0);
  try {
    parse_pcap(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MalformedFileHeader);
  }
}

TEST(PcapErrors, RecordOverrunsFile) {
  auto bytes = serialize_pcap(std::vector<ParsedPacket>{sample_packet()});
  bytes.resize(bytes.size() - 5);
  try {
    parse_pcap(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TruncatedRecord);
  }
}

TEST(PcapErrors, SnapTruncatedRecordIsSkipped) {
  auto bytes = serialize_pcap(std::vector<ParsedPacket>{sample_packet(), sample_packet()});
  // Raise orig_len of the first record above incl_len.
  std::uint32_t orig;
  std::memcpy(&orig, bytes.data() + 24 + 12, 4);
  ++orig;
  std::memcpy(bytes.data() + 24 + 12, &orig, 4);
  const auto r = parse_pcap(bytes);
  EXPECT_EQ(r.skipped_truncated, 1u);
  EXPECT_EQ(r.packets.size(), 1u);
}

TEST(PcapErrors, NonTcpFramesAreSkipped) {
  auto bytes = serialize_pcap(std::vector<ParsedPacket>{sample_packet()});
  bytes[24 + 16 + 14 + 9] = 17;  // protocol byte -> UDP
  const auto r = parse_pcap(bytes);
  EXPECT_EQ(r.skipped_non_tcp, 1u);
  EXPECT_TRUE(r.packets.empty());
}

TEST(PcapErrors, InconsistentHeaderLength) {
  auto bytes = serialize_pcap(std::vector<ParsedPacket>{sample_packet()});
  bytes[24 + 16 + 14] = 0x43;  // ihl 3
  try {
    parse_pcap(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::HeaderFieldOutOfRange);
  }
}

TEST(PcapErrors, WriterRejectsInvalidPackets) {
  ParsedPacket p = sample_packet();
  p.ip_len = 99;
  EXPECT_THROW(serialize_frame(p), Error);
  p = sample_packet();
  p.ts_usec = 1'000'000;
  EXPECT_TRUE(packet_invariant_violation(p).has_value());
  p = sample_packet();
  p.ip_frag = 0x2000;
  EXPECT_TRUE(packet_invariant_violation(p).has_value());
}

TEST(PcapFuzz, RandomBytesNeverCrash) {
  std::mt19937_64 rng(99);
  const auto valid = serialize_pcap(std::vector<ParsedPacket>{sample_packet(), sample_packet()});
  for (int i = 0; i < 2000; ++i) {
    std::vector<std::uint8_t> bytes;
    if (i % 2 == 0) {
      bytes.resize(rng() % 300);
      for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
      if (bytes.size() >= 4 && i % 4 == 0) std::memcpy(bytes.data(), &kPcapMagic, 4);
    } else {
      bytes = valid;
      for (int k = 0; k < 4; ++k) bytes[rng() % bytes.size()] = static_cast<std::uint8_t>(rng());
      bytes.resize(rng() % (bytes.size() + 1));
    }
    try {
      parse_pcap(bytes);
    } catch (const Error&) {
    }
  }
  SUCCEED();
}

TEST(TcpFlags, ByteRoundTrip) {
  for (int b = 0; b < 256; ++b) EXPECT_EQ(TcpFlags::from_byte(static_cast<std::uint8_t>(b)).to_byte(), b);
}
