#pragma once

// Classic PCAP reading/writing and Ethernet II / IPv4 / TCP header codec.
//
// Only the header fields are retained; payloads are reduced to their size and
// zero-filled on emission. IP options and TCP options are not modeled: their
// bytes are skipped on read and written as zero padding.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kalrecon/error.hpp"

namespace kalrecon {

inline constexpr std::uint32_t kPcapMagic = 0xa1b2c3d4;
inline constexpr std::uint32_t kPcapMagicSwapped = 0xd4c3b2a1;
inline constexpr std::uint32_t kLinkTypeEthernet = 1;
inline constexpr std::uint32_t kDefaultSnaplen = 65535;
inline constexpr std::size_t kPcapHeaderSize = 24;
inline constexpr std::size_t kPcapRecordHeaderSize = 16;
inline constexpr std::size_t kEthernetHeaderSize = 14;
inline constexpr std::uint16_t kEtherTypeIpv4 = 0x0800;
inline constexpr std::uint8_t kIpProtoTcp = 6;
inline constexpr std::uint64_t kMacMax = (std::uint64_t{1} << 48) - 1;

struct PcapFileHeader {
  std::uint32_t magic = kPcapMagic;
  std::uint16_t version_major = 2;
  std::uint16_t version_minor = 4;
  std::uint32_t snaplen = kDefaultSnaplen;
  std::uint32_t linktype = kLinkTypeEthernet;
};

struct TcpFlags {
  bool fin = false;
  bool syn = false;
  bool rst = false;
  bool psh = false;
  bool ack = false;
  bool urg = false;
  bool ece = false;
  bool cwr = false;

  constexpr std::uint8_t to_byte() const {
    return static_cast<std::uint8_t>((fin ? 0x01 : 0) | (syn ? 0x02 : 0) | (rst ? 0x04 : 0) |
                                     (psh ? 0x08 : 0) | (ack ? 0x10 : 0) | (urg ? 0x20 : 0) |
                                     (ece ? 0x40 : 0) | (cwr ? 0x80 : 0));
  }

  static constexpr TcpFlags from_byte(std::uint8_t b) {
    TcpFlags f;
    f.fin = b & 0x01;
    f.syn = b & 0x02;
    f.rst = b & 0x04;
    f.psh = b & 0x08;
    f.ack = b & 0x10;
    f.urg = b & 0x20;
    f.ece = b & 0x40;
    f.cwr = b & 0x80;
    return f;
  }

  bool operator==(const TcpFlags&) const = default;
};

/// Decoded header fields of one Ethernet/IPv4/TCP frame.
struct ParsedPacket {
  std::uint32_t ts_sec = 0;
  std::uint32_t ts_usec = 0;
  std::uint64_t src_mac = 0;  // 48 bits, most significant octet first on the wire
  std::uint64_t dst_mac = 0;
  std::uint8_t ip_version = 4;
  std::uint8_t ip_ihl = 5;  // 32-bit words
  std::uint8_t ip_tos = 0;
  std::uint16_t ip_len = 40;
  std::uint16_t ip_id = 0;
  std::uint8_t ip_flags = 0;   // 3 bits
  std::uint16_t ip_frag = 0;   // 13 bits
  std::uint8_t ip_ttl = 64;
  std::uint8_t ip_proto = kIpProtoTcp;
  std::uint16_t ip_chksum = 0;
  std::uint32_t src_ip = 0;
  std::uint32_t dst_ip = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t tcp_seq = 0;
  std::uint32_t tcp_ack = 0;
  std::uint8_t tcp_dataofs = 5;  // 32-bit words
  TcpFlags tcp_flags;
  std::uint16_t tcp_window = 0;
  std::uint16_t tcp_chksum = 0;
  std::uint16_t tcp_urgptr = 0;
  std::uint32_t payload_size = 0;

  std::uint64_t timestamp_usec() const {
    return std::uint64_t{ts_sec} * 1'000'000 + ts_usec;
  }

  bool operator==(const ParsedPacket&) const = default;
};

struct PcapReadResult {
  PcapFileHeader header;
  std::vector<ParsedPacket> packets;
  std::size_t skipped_non_tcp = 0;    // non-IPv4 or non-TCP frames
  std::size_t skipped_truncated = 0;  // incl_len < orig_len
};

namespace detail {

inline std::uint16_t load_be16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>((b[at] << 8) | b[at + 1]);
}

inline std::uint32_t load_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

inline std::uint32_t load_u32(std::span<const std::uint8_t> b, std::size_t at, bool big) {
  if (big) return load_be32(b, at);
  return std::uint32_t{b[at]} | (std::uint32_t{b[at + 1]} << 8) |
         (std::uint32_t{b[at + 2]} << 16) | (std::uint32_t{b[at + 3]} << 24);
}

inline std::uint16_t load_u16(std::span<const std::uint8_t> b, std::size_t at, bool big) {
  if (big) return load_be16(b, at);
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

inline void store_be16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void store_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

inline void store_native32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    store_be32(out, v);
  } else {
    for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
  }
}

inline void store_native16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    store_be16(out, v);
  } else {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
}

inline void store_mac(std::vector<std::uint8_t>& out, std::uint64_t mac) {
  for (int shift = 40; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(mac >> shift));
}

inline std::uint64_t load_mac(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint64_t mac = 0;
  for (std::size_t i = 0; i < 6; ++i) mac = (mac << 8) | b[at + i];
  return mac;
}

// 32-bit accumulation of big-endian 16-bit words; an odd trailing byte is
// padded with zero.
inline std::uint32_t ones_complement_accumulate(std::span<const std::uint8_t> bytes,
                                                std::uint32_t sum = 0) {
  std::size_t i = 0;
  for (; i + 1 < bytes.size(); i += 2) {
    sum += (std::uint32_t{bytes[i]} << 8) | bytes[i + 1];
    sum = (sum & 0xffff) + (sum >> 16);
  }
  if (i < bytes.size()) {
    sum += std::uint32_t{bytes[i]} << 8;
    sum = (sum & 0xffff) + (sum >> 16);
  }
  return sum;
}

inline std::uint16_t fold_complement(std::uint32_t sum) {
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum & 0xffff);
}

}  // namespace detail

/// Internet checksum of an IPv4 header whose checksum field is zeroed.
inline std::uint16_t ipv4_header_checksum(std::span<const std::uint8_t> header) {
  if (header.size() % 2 != 0) {
    throw Error(Errc::LengthNotMultipleOfTwo,
                "header length " + std::to_string(header.size()) + " is odd");
  }
  return detail::fold_complement(detail::ones_complement_accumulate(header));
}

/// IPv4 header (4*ihl bytes, options zero) exactly as it is put on the wire.
inline std::vector<std::uint8_t> ipv4_header_bytes(const ParsedPacket& p) {
  std::vector<std::uint8_t> h;
  h.reserve(std::size_t{p.ip_ihl} * 4);
  h.push_back(static_cast<std::uint8_t>(((p.ip_version & 0x0f) << 4) | (p.ip_ihl & 0x0f)));
  h.push_back(p.ip_tos);
  detail::store_be16(h, p.ip_len);
  detail::store_be16(h, p.ip_id);
  detail::store_be16(h, static_cast<std::uint16_t>(((p.ip_flags & 0x7) << 13) | (p.ip_frag & 0x1fff)));
  h.push_back(p.ip_ttl);
  h.push_back(p.ip_proto);
  detail::store_be16(h, p.ip_chksum);
  detail::store_be32(h, p.src_ip);
  detail::store_be32(h, p.dst_ip);
  const std::size_t words = p.ip_ihl & 0x0fu;
  h.resize(std::max<std::size_t>(words * 4, 20), 0);
  return h;
}

/// Checksum the IPv4 header of `p` would carry, ignoring its current ip_chksum.
inline std::uint16_t compute_ip_checksum(const ParsedPacket& p) {
  ParsedPacket zeroed = p;
  zeroed.ip_chksum = 0;
  return ipv4_header_checksum(ipv4_header_bytes(zeroed));
}

/// TCP header (4*dataofs bytes, options zero) with the given checksum value.
inline std::vector<std::uint8_t> tcp_header_bytes(const ParsedPacket& p) {
  std::vector<std::uint8_t> t;
  t.reserve(std::size_t{p.tcp_dataofs} * 4);
  detail::store_be16(t, p.src_port);
  detail::store_be16(t, p.dst_port);
  detail::store_be32(t, p.tcp_seq);
  detail::store_be32(t, p.tcp_ack);
  t.push_back(static_cast<std::uint8_t>((p.tcp_dataofs & 0x0f) << 4));
  t.push_back(p.tcp_flags.to_byte());
  detail::store_be16(t, p.tcp_window);
  detail::store_be16(t, p.tcp_chksum);
  detail::store_be16(t, p.tcp_urgptr);
  const std::size_t words = p.tcp_dataofs & 0x0fu;
  t.resize(std::max<std::size_t>(words * 4, 20), 0);
  return t;
}

/// TCP checksum over the pseudo-header, the header, and a zero-filled payload.
/// Zero payload bytes add nothing to the sum, so only the length matters.
inline std::uint16_t compute_tcp_checksum(const ParsedPacket& p) {
  ParsedPacket zeroed = p;
  zeroed.tcp_chksum = 0;
  const auto header = tcp_header_bytes(zeroed);
  const std::uint32_t tcp_length = static_cast<std::uint32_t>(header.size()) + p.payload_size;
  std::vector<std::uint8_t> pseudo;
  detail::store_be32(pseudo, p.src_ip);
  detail::store_be32(pseudo, p.dst_ip);
  pseudo.push_back(0);
  pseudo.push_back(p.ip_proto);
  detail::store_be16(pseudo, static_cast<std::uint16_t>(tcp_length & 0xffff));
  std::uint32_t sum = detail::ones_complement_accumulate(pseudo);
  sum = detail::ones_complement_accumulate(header, sum);
  return detail::fold_complement(sum);
}

/// Reason `p` cannot be serialized, or nullopt when it satisfies every
/// ParsedPacket invariant.
inline std::optional<std::string> packet_invariant_violation(const ParsedPacket& p) {
  if (p.ts_usec >= 1'000'000) return "ts_usec >= 1000000";
  if (p.src_mac > kMacMax || p.dst_mac > kMacMax) return "MAC exceeds 48 bits";
  if (p.ip_version != 4) return "ip_version != 4";
  if (p.ip_proto != kIpProtoTcp) return "ip_proto != 6";
  if (p.ip_ihl < 5 || p.ip_ihl > 15) return "ip_ihl outside [5, 15]";
  if (p.tcp_dataofs < 5 || p.tcp_dataofs > 15) return "tcp_dataofs outside [5, 15]";
  if (p.ip_flags > 0x7) return "ip_flags exceeds 3 bits";
  if (p.ip_frag > 0x1fff) return "ip_frag exceeds 13 bits";
  const std::uint64_t expected = 4u * p.ip_ihl + 4u * p.tcp_dataofs + std::uint64_t{p.payload_size};
  if (expected != p.ip_len) {
    return "ip_len " + std::to_string(p.ip_len) + " != 4*ihl + 4*dataofs + payload_size (" +
           std::to_string(expected) + ")";
  }
  return std::nullopt;
}

/// Ethernet II frame carrying `p`, payload zero-filled.
inline std::vector<std::uint8_t> serialize_frame(const ParsedPacket& p) {
  if (auto why = packet_invariant_violation(p)) throw Error(Errc::InvariantViolation, *why);
  std::vector<std::uint8_t> frame;
  frame.reserve(kEthernetHeaderSize + p.ip_len);
  detail::store_mac(frame, p.dst_mac);
  detail::store_mac(frame, p.src_mac);
  detail::store_be16(frame, kEtherTypeIpv4);
  const auto ip = ipv4_header_bytes(p);
  const auto tcp = tcp_header_bytes(p);
  frame.insert(frame.end(), ip.begin(), ip.end());
  frame.insert(frame.end(), tcp.begin(), tcp.end());
  frame.resize(frame.size() + p.payload_size, 0);
  return frame;
}

enum class FrameStatus { Tcp, NotTcp };

/// Decodes one captured frame. Non-IPv4 and non-TCP frames report NotTcp;
/// inconsistent IPv4/TCP headers throw HeaderFieldOutOfRange.
inline FrameStatus parse_frame(std::span<const std::uint8_t> frame, ParsedPacket& out) {
  auto out_of_range = [](const std::string& what) {
    return Error(Errc::HeaderFieldOutOfRange, what);
  };
  if (frame.size() < kEthernetHeaderSize) throw out_of_range("frame shorter than Ethernet header");
  if (detail::load_be16(frame, 12) != kEtherTypeIpv4) return FrameStatus::NotTcp;
  const auto ip = frame.subspan(kEthernetHeaderSize);
  if (ip.size() < 20) throw out_of_range("IPv4 header truncated");
  const std::uint8_t version = ip[0] >> 4;
  if (version != 4) return FrameStatus::NotTcp;
  if (ip[9] != kIpProtoTcp) return FrameStatus::NotTcp;

  ParsedPacket p;
  p.dst_mac = detail::load_mac(frame, 0);
  p.src_mac = detail::load_mac(frame, 6);
  p.ip_version = version;
  p.ip_ihl = ip[0] & 0x0f;
  p.ip_tos = ip[1];
  p.ip_len = detail::load_be16(ip, 2);
  p.ip_id = detail::load_be16(ip, 4);
  const std::uint16_t flags_frag = detail::load_be16(ip, 6);
  p.ip_flags = static_cast<std::uint8_t>(flags_frag >> 13);
  p.ip_frag = flags_frag & 0x1fff;
  p.ip_ttl = ip[8];
  p.ip_proto = ip[9];
  p.ip_chksum = detail::load_be16(ip, 10);
  p.src_ip = detail::load_be32(ip, 12);
  p.dst_ip = detail::load_be32(ip, 16);

  const std::size_t ip_header_len = std::size_t{p.ip_ihl} * 4;
  if (p.ip_ihl < 5) throw out_of_range("ip_ihl < 5");
  if (p.ip_len > ip.size()) throw out_of_range("ip_len exceeds captured bytes");
  if (ip_header_len + 20 > p.ip_len) throw out_of_range("ip_len too small for IPv4 + TCP headers");
  const auto tcp = ip.subspan(ip_header_len, p.ip_len - ip_header_len);

  p.src_port = detail::load_be16(tcp, 0);
  p.dst_port = detail::load_be16(tcp, 2);
  p.tcp_seq = detail::load_be32(tcp, 4);
  p.tcp_ack = detail::load_be32(tcp, 8);
  p.tcp_dataofs = tcp[12] >> 4;
  p.tcp_flags = TcpFlags::from_byte(tcp[13]);
  p.tcp_window = detail::load_be16(tcp, 14);
  p.tcp_chksum = detail::load_be16(tcp, 16);
  p.tcp_urgptr = detail::load_be16(tcp, 18);

  const std::size_t tcp_header_len = std::size_t{p.tcp_dataofs} * 4;
  if (p.tcp_dataofs < 5) throw out_of_range("tcp_dataofs < 5");
  if (tcp_header_len > tcp.size()) throw out_of_range("tcp_dataofs exceeds segment length");
  p.payload_size = static_cast<std::uint32_t>(tcp.size() - tcp_header_len);
  out = p;
  return FrameStatus::Tcp;
}

/// Parses a complete classic PCAP image held in memory.
inline PcapReadResult parse_pcap(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPcapHeaderSize) {
    throw Error(Errc::MalformedFileHeader, "file shorter than the 24-byte global header");
  }
  PcapReadResult result;
  const std::uint32_t raw_magic = detail::load_u32(bytes, 0, false);
  bool big = false;
  if (raw_magic == kPcapMagic) {
    big = false;
  } else if (raw_magic == kPcapMagicSwapped) {
    big = true;
  } else {
    throw Error(Errc::MalformedFileHeader, "unrecognized magic");
  }
  result.header.magic = kPcapMagic;
  result.header.version_major = detail::load_u16(bytes, 4, big);
  result.header.version_minor = detail::load_u16(bytes, 6, big);
  result.header.snaplen = detail::load_u32(bytes, 16, big);
  result.header.linktype = detail::load_u32(bytes, 20, big);
  if (result.header.linktype != kLinkTypeEthernet) {
    throw Error(Errc::MalformedFileHeader,
                "linktype " + std::to_string(result.header.linktype) + " is not Ethernet");
  }

  std::size_t pos = kPcapHeaderSize;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < kPcapRecordHeaderSize) {
      throw Error(Errc::TruncatedRecord, "record header at offset " + std::to_string(pos));
    }
    const std::uint32_t ts_sec = detail::load_u32(bytes, pos, big);
    const std::uint32_t ts_usec = detail::load_u32(bytes, pos + 4, big);
    const std::uint32_t incl_len = detail::load_u32(bytes, pos + 8, big);
    const std::uint32_t orig_len = detail::load_u32(bytes, pos + 12, big);
    pos += kPcapRecordHeaderSize;
    if (incl_len > bytes.size() - pos) {
      throw Error(Errc::TruncatedRecord, "record at offset " + std::to_string(pos) +
                                             " claims " + std::to_string(incl_len) + " bytes");
    }
    const auto frame = bytes.subspan(pos, incl_len);
    pos += incl_len;
    if (incl_len < orig_len) {
      ++result.skipped_truncated;
      continue;
    }
    if (ts_usec >= 1'000'000) throw Error(Errc::HeaderFieldOutOfRange, "ts_usec >= 1000000");
    ParsedPacket p;
    if (parse_frame(frame, p) == FrameStatus::NotTcp) {
      ++result.skipped_non_tcp;
      continue;
    }
    p.ts_sec = ts_sec;
    p.ts_usec = ts_usec;
    result.packets.push_back(p);
  }
  return result;
}

inline PcapReadResult read_pcap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_pcap(bytes);
}

/// Native-endian classic PCAP image of `packets`.
inline std::vector<std::uint8_t> serialize_pcap(std::span<const ParsedPacket> packets) {
  std::vector<std::uint8_t> out;
  detail::store_native32(out, kPcapMagic);
  detail::store_native16(out, 2);
  detail::store_native16(out, 4);
  detail::store_native32(out, 0);  // thiszone
  detail::store_native32(out, 0);  // sigfigs
  detail::store_native32(out, kDefaultSnaplen);
  detail::store_native32(out, kLinkTypeEthernet);
  for (const auto& p : packets) {
    const auto frame = serialize_frame(p);
    detail::store_native32(out, p.ts_sec);
    detail::store_native32(out, p.ts_usec);
    detail::store_native32(out, static_cast<std::uint32_t>(frame.size()));
    detail::store_native32(out, static_cast<std::uint32_t>(frame.size()));
    out.insert(out.end(), frame.begin(), frame.end());
  }
  return out;
}

/// Writes `packets` verbatim (checksums as stored) and returns the byte count.
inline std::size_t write_pcap(std::span<const ParsedPacket> packets,
                              const std::filesystem::path& path) {
  const auto bytes = serialize_pcap(packets);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoFailure, "short write to " + path.string());
  return bytes.size();
}

/// Sets each packet's TCP checksum to the value computed over a zero payload.
inline void recompute_tcp_checksums(std::span<ParsedPacket> packets) {
  for (auto& p : packets) p.tcp_chksum = compute_tcp_checksum(p);
}

}  // namespace kalrecon
