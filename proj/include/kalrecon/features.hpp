#pragma once

// Per-feature encodings fitted on training sessions.
//
// Feature order is fixed (see kFeatureOrder). Every feature owns one slot in
// three layouts:
//   encoded  - what EncodedSession::values holds: Numeric 1, Binary 1,
//              OneHot K, Embedded 1 (the vocabulary id, -1 when unseen)
//   decoded  - what a model emits and decode_outputs consumes: Numeric 1,
//              Binary 1, OneHot K, Embedded embed_dim
//   the model input uses the decoded layout, with each Embedded id replaced by
//   its frozen embedding row.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "json.hpp"

#include "kalrecon/error.hpp"
#include "kalrecon/matrix.hpp"
#include "kalrecon/pcap_io.hpp"
#include "kalrecon/session.hpp"

namespace kalrecon {

enum class SchemaMode { MseOnly, Kal };

inline std::string_view mode_name(SchemaMode m) { return m == SchemaMode::Kal ? "kal" : "mse_only"; }

inline SchemaMode parse_mode(std::string_view s) {
  if (s == "kal") return SchemaMode::Kal;
  if (s == "mse_only" || s == "mse-only") return SchemaMode::MseOnly;
  throw Error(Errc::ConfigInvalid, "unknown schema mode '" + std::string(s) + "'");
}

enum class FeatureId : std::uint8_t {
  tcp_ack,
  ip_chksum,
  tcp_seq,
  ip_id,
  tcp_window,
  time_since,
  ip_len,
  payload_size,
  ip_direction,
  tcp_flag_ECE,
  tcp_flag_ACK,
  tcp_flag_CWR,
  tcp_flag_URG,
  tcp_flag_PSH,
  tcp_flag_SYN,
  ip_frag,
  ip_ihl,
  ip_flags,
  ip_version,
  tcp_flag_RST,
  tcp_urgptr,
  ip_proto,
  tcp_flag_FIN,
  ip_tos,
  tcp_dataofs,
  ip_ttl,
  dst_port,
  src_port,
};

inline constexpr std::size_t kFeatureCount = 28;
inline constexpr std::size_t kDefaultEmbedDim = 32;
inline constexpr std::size_t kDefaultMaxLen = 32;

inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "tcp_ack",      "ip_chksum",    "tcp_seq",      "ip_id",        "tcp_window",
    "time_since",   "ip_len",       "payload_size", "ip_direction", "tcp_flag_ECE",
    "tcp_flag_ACK", "tcp_flag_CWR", "tcp_flag_URG", "tcp_flag_PSH", "tcp_flag_SYN",
    "ip_frag",      "ip_ihl",       "ip_flags",     "ip_version",   "tcp_flag_RST",
    "tcp_urgptr",   "ip_proto",     "tcp_flag_FIN", "ip_tos",       "tcp_dataofs",
    "ip_ttl",       "dst_port",     "src_port"};

inline std::string_view feature_name(FeatureId id) { return kFeatureNames[static_cast<std::size_t>(id)]; }

inline std::optional<FeatureId> feature_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    if (kFeatureNames[i] == name) return static_cast<FeatureId>(i);
  }
  return std::nullopt;
}

/// The four blocks features fall into under the knowledge-augmented encoding.
enum class KindTag { Numeric, Binary, OneHot, Embedded };

inline std::string_view kind_name(KindTag k) {
  switch (k) {
    case KindTag::Numeric: return "numeric";
    case KindTag::Binary: return "binary";
    case KindTag::OneHot: return "onehot";
    case KindTag::Embedded: return "embedded";
  }
  return "?";
}

inline KindTag kal_block(FeatureId id) {
  const auto i = static_cast<std::size_t>(id);
  if (i <= static_cast<std::size_t>(FeatureId::payload_size)) return KindTag::Numeric;
  if (i <= static_cast<std::size_t>(FeatureId::tcp_flag_FIN)) return KindTag::Binary;
  if (i <= static_cast<std::size_t>(FeatureId::ip_ttl)) return KindTag::OneHot;
  return KindTag::Embedded;
}

/// In MSE-only mode the binary block stays binary and everything else is
/// min-max scaled.
inline KindTag mse_only_block(FeatureId id) {
  return kal_block(id) == KindTag::Binary ? KindTag::Binary : KindTag::Numeric;
}

inline bool is_categorical(KindTag k) { return k != KindTag::Numeric; }

/// Raw value of a feature; exact for every integral field.
inline double feature_value(const SessionPacket& sp, FeatureId id) {
  const auto& p = sp.packet;
  switch (id) {
    case FeatureId::tcp_ack: return p.tcp_ack;
    case FeatureId::ip_chksum: return p.ip_chksum;
    case FeatureId::tcp_seq: return p.tcp_seq;
    case FeatureId::ip_id: return p.ip_id;
    case FeatureId::tcp_window: return p.tcp_window;
    case FeatureId::time_since: return sp.time_since;
    case FeatureId::ip_len: return p.ip_len;
    case FeatureId::payload_size: return p.payload_size;
    case FeatureId::ip_direction: return sp.ip_direction;
    case FeatureId::tcp_flag_ECE: return p.tcp_flags.ece;
    case FeatureId::tcp_flag_ACK: return p.tcp_flags.ack;
    case FeatureId::tcp_flag_CWR: return p.tcp_flags.cwr;
    case FeatureId::tcp_flag_URG: return p.tcp_flags.urg;
    case FeatureId::tcp_flag_PSH: return p.tcp_flags.psh;
    case FeatureId::tcp_flag_SYN: return p.tcp_flags.syn;
    case FeatureId::ip_frag: return p.ip_frag;
    case FeatureId::ip_ihl: return p.ip_ihl;
    case FeatureId::ip_flags: return p.ip_flags;
    case FeatureId::ip_version: return p.ip_version;
    case FeatureId::tcp_flag_RST: return p.tcp_flags.rst;
    case FeatureId::tcp_urgptr: return p.tcp_urgptr;
    case FeatureId::ip_proto: return p.ip_proto;
    case FeatureId::tcp_flag_FIN: return p.tcp_flags.fin;
    case FeatureId::ip_tos: return p.ip_tos;
    case FeatureId::tcp_dataofs: return p.tcp_dataofs;
    case FeatureId::ip_ttl: return p.ip_ttl;
    case FeatureId::dst_port: return p.dst_port;
    case FeatureId::src_port: return p.src_port;
  }
  return 0.0;
}

namespace detail {

template <typename T>
T saturate(double v) {
  if (!(v > 0.0)) return T{0};  // also catches NaN
  if (v >= static_cast<double>(std::numeric_limits<T>::max())) return std::numeric_limits<T>::max();
  return static_cast<T>(std::llround(v));
}

}  // namespace detail

/// Stores a decoded value, rounding to the nearest integer and saturating to
/// the field's storage type. Sub-byte bit widths are left to the constraint
/// checks; time_since is kept as a real.
inline void set_feature_value(SessionPacket& sp, FeatureId id, double v) {
  auto& p = sp.packet;
  using detail::saturate;
  switch (id) {
    case FeatureId::tcp_ack: p.tcp_ack = saturate<std::uint32_t>(v); break;
    case FeatureId::ip_chksum: p.ip_chksum = saturate<std::uint16_t>(v); break;
    case FeatureId::tcp_seq: p.tcp_seq = saturate<std::uint32_t>(v); break;
    case FeatureId::ip_id: p.ip_id = saturate<std::uint16_t>(v); break;
    case FeatureId::tcp_window: p.tcp_window = saturate<std::uint16_t>(v); break;
    case FeatureId::time_since: sp.time_since = v; break;
    case FeatureId::ip_len: p.ip_len = saturate<std::uint16_t>(v); break;
    case FeatureId::payload_size: p.payload_size = saturate<std::uint32_t>(v); break;
    case FeatureId::ip_direction: sp.ip_direction = saturate<std::uint8_t>(v); break;
    case FeatureId::tcp_flag_ECE: p.tcp_flags.ece = v >= 0.5; break;
    case FeatureId::tcp_flag_ACK: p.tcp_flags.ack = v >= 0.5; break;
    case FeatureId::tcp_flag_CWR: p.tcp_flags.cwr = v >= 0.5; break;
    case FeatureId::tcp_flag_URG: p.tcp_flags.urg = v >= 0.5; break;
    case FeatureId::tcp_flag_PSH: p.tcp_flags.psh = v >= 0.5; break;
    case FeatureId::tcp_flag_SYN: p.tcp_flags.syn = v >= 0.5; break;
    case FeatureId::ip_frag: p.ip_frag = saturate<std::uint16_t>(v); break;
    case FeatureId::ip_ihl: p.ip_ihl = saturate<std::uint8_t>(v); break;
    case FeatureId::ip_flags: p.ip_flags = saturate<std::uint8_t>(v); break;
    case FeatureId::ip_version: p.ip_version = saturate<std::uint8_t>(v); break;
    case FeatureId::tcp_flag_RST: p.tcp_flags.rst = v >= 0.5; break;
    case FeatureId::tcp_urgptr: p.tcp_urgptr = saturate<std::uint16_t>(v); break;
    case FeatureId::ip_proto: p.ip_proto = saturate<std::uint8_t>(v); break;
    case FeatureId::tcp_flag_FIN: p.tcp_flags.fin = v >= 0.5; break;
    case FeatureId::ip_tos: p.ip_tos = saturate<std::uint8_t>(v); break;
    case FeatureId::tcp_dataofs: p.tcp_dataofs = saturate<std::uint8_t>(v); break;
    case FeatureId::ip_ttl: p.ip_ttl = saturate<std::uint8_t>(v); break;
    case FeatureId::dst_port: p.dst_port = saturate<std::uint16_t>(v); break;
    case FeatureId::src_port: p.src_port = saturate<std::uint16_t>(v); break;
  }
}

/// Exact-match test used for scoring: integers compare exactly, time_since
/// within one microsecond.
inline bool feature_matches(FeatureId id, double decoded, double original) {
  if (id == FeatureId::time_since) return std::abs(decoded - original) <= 1e-6 + 1e-12;
  return decoded == original;
}

struct NumericKind {
  double min = 0.0;
  double max = 0.0;
};

struct BinaryKind {
  double zero_value = 0.0;
  double one_value = 0.0;
};

struct OneHotKind {
  std::vector<double> categories;
};

struct EmbeddedKind {
  std::vector<double> vocabulary;
  std::size_t embed_dim = kDefaultEmbedDim;
};

using FeatureKind = std::variant<NumericKind, BinaryKind, OneHotKind, EmbeddedKind>;

inline KindTag kind_tag(const FeatureKind& k) { return static_cast<KindTag>(k.index()); }

struct FeatureSlot {
  std::size_t offset = 0;
  std::size_t width = 0;
};

struct FeatureSpec {
  FeatureId id{};
  FeatureKind kind;
  FeatureSlot encoded;
  FeatureSlot decoded;

  std::string_view name() const { return feature_name(id); }
  KindTag tag() const { return kind_tag(kind); }

  /// Numeric scale factor (max - min); 0 for constant features.
  double range() const {
    if (const auto* n = std::get_if<NumericKind>(&kind)) return n->max - n->min;
    return 0.0;
  }
};

struct FeatureSchema {
  static constexpr int kFormatVersion = 1;

  SchemaMode mode = SchemaMode::Kal;
  std::vector<FeatureSpec> features;
  std::size_t encoded_width = 0;
  std::size_t decoded_width = 0;
  std::vector<std::string> audit;  // cardinality warnings recorded at fit time

  const FeatureSpec& feature(FeatureId id) const {
    for (const auto& f : features) {
      if (f.id == id) return f;
    }
    throw Error(Errc::SchemaMismatch, "feature " + std::string(feature_name(id)) + " missing");
  }

  /// Shared port vocabulary, empty when the schema has no embedded feature.
  std::vector<double> port_vocabulary() const {
    for (const auto& f : features) {
      if (const auto* e = std::get_if<EmbeddedKind>(&f.kind)) return e->vocabulary;
    }
    return {};
  }

  std::size_t embed_dim() const {
    for (const auto& f : features) {
      if (const auto* e = std::get_if<EmbeddedKind>(&f.kind)) return e->embed_dim;
    }
    return kDefaultEmbedDim;
  }

  /// Recomputes slot offsets from the feature kinds.
  void rebuild_layout() {
    encoded_width = 0;
    decoded_width = 0;
    for (auto& f : features) {
      std::size_t enc = 1;
      std::size_t dec = 1;
      if (const auto* o = std::get_if<OneHotKind>(&f.kind)) enc = dec = o->categories.size();
      if (const auto* e = std::get_if<EmbeddedKind>(&f.kind)) dec = e->embed_dim;
      f.encoded = {encoded_width, enc};
      f.decoded = {decoded_width, dec};
      encoded_width += enc;
      decoded_width += dec;
    }
  }

  nlohmann::json to_json() const;
  static FeatureSchema from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

inline nlohmann::json FeatureSchema::to_json() const {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : features) {
    nlohmann::json jf = {{"name", f.name()}, {"kind", kind_name(f.tag())}};
    std::visit(
        [&](const auto& k) {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, NumericKind>) {
            jf["min"] = k.min;
            jf["max"] = k.max;
          } else if constexpr (std::is_same_v<K, BinaryKind>) {
            jf["zero_value"] = k.zero_value;
            jf["one_value"] = k.one_value;
          } else if constexpr (std::is_same_v<K, OneHotKind>) {
            jf["categories"] = k.categories;
          } else {
            jf["vocabulary"] = k.vocabulary;
            jf["embed_dim"] = k.embed_dim;
          }
        },
        f.kind);
    feats.push_back(std::move(jf));
  }
  return {{"format", "kalrecon-schema"},
          {"version", kFormatVersion},
          {"mode", mode_name(mode)},
          {"features", feats},
          {"audit", audit}};
}

inline FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "kalrecon-schema" || j.at("version").get<int>() != kFormatVersion) {
      throw Error(Errc::SchemaMismatch, "unsupported schema format or version");
    }
    FeatureSchema s;
    s.mode = parse_mode(j.at("mode").get<std::string>());
    for (const auto& jf : j.at("features")) {
      const auto id = feature_from_name(jf.at("name").get<std::string>());
      if (!id) throw Error(Errc::SchemaMismatch, "unknown feature " + jf.at("name").dump());
      FeatureSpec f;
      f.id = *id;
      const auto kind = jf.at("kind").get<std::string>();
      if (kind == "numeric") {
        f.kind = NumericKind{jf.at("min").get<double>(), jf.at("max").get<double>()};
      } else if (kind == "binary") {
        f.kind = BinaryKind{jf.at("zero_value").get<double>(), jf.at("one_value").get<double>()};
      } else if (kind == "onehot") {
        f.kind = OneHotKind{jf.at("categories").get<std::vector<double>>()};
      } else if (kind == "embedded") {
        f.kind = EmbeddedKind{jf.at("vocabulary").get<std::vector<double>>(),
                              jf.at("embed_dim").get<std::size_t>()};
      } else {
        throw Error(Errc::SchemaMismatch, "unknown kind " + kind);
      }
      s.features.push_back(std::move(f));
    }
    if (j.contains("audit")) s.audit = j.at("audit").get<std::vector<std::string>>();
    s.rebuild_layout();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::SchemaMismatch, e.what());
  }
}

/// FNV-1a over the canonical JSON text.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t FeatureSchema::hash() const { return fnv1a(to_json().dump()); }

inline void save_schema(const FeatureSchema& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  out << s.to_json().dump(2) << '\n';
}

inline FeatureSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  return FeatureSchema::from_json(nlohmann::json::parse(in));
}

/// Fits scaler ranges, binary value pairs, category lists and the port
/// vocabulary on training sessions. Kind assignment follows the fixed block
/// table for the mode; observed cardinalities that disagree are recorded in
/// `audit` rather than changing the kind.
inline FeatureSchema fit_schema(std::span<const Session> train, SchemaMode mode,
                                std::size_t embed_dim = kDefaultEmbedDim) {
  if (packet_count(train) == 0) throw Error(Errc::EmptyTrainingSet, "no training packets");
  std::array<std::map<double, std::size_t>, kFeatureCount> counts;
  for (const auto& s : train) {
    for (const auto& sp : s.packets) {
      for (std::size_t i = 0; i < kFeatureCount; ++i) {
        ++counts[i][feature_value(sp, static_cast<FeatureId>(i))];
      }
    }
  }
  std::set<double> ports;
  for (const auto& [v, n] : counts[static_cast<std::size_t>(FeatureId::src_port)]) ports.insert(v);
  for (const auto& [v, n] : counts[static_cast<std::size_t>(FeatureId::dst_port)]) ports.insert(v);

  FeatureSchema schema;
  schema.mode = mode;
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    const auto id = static_cast<FeatureId>(i);
    const auto& seen = counts[i];
    const std::string name(feature_name(id));
    FeatureSpec f;
    f.id = id;
    const KindTag tag = mode == SchemaMode::Kal ? kal_block(id) : mse_only_block(id);
    switch (tag) {
      case KindTag::Numeric:
        f.kind = NumericKind{seen.begin()->first, seen.rbegin()->first};
        break;
      case KindTag::Binary: {
        BinaryKind b{seen.begin()->first, seen.rbegin()->first};
        if (seen.size() > 2) {
          schema.audit.push_back(name + ": binary feature observed " + std::to_string(seen.size()) +
                                 " distinct values; only min/max are representable");
        }
        f.kind = b;
        break;
      }
      case KindTag::OneHot: {
        OneHotKind o;
        for (const auto& [v, n] : seen) o.categories.push_back(v);
        if (o.categories.size() >= 10 || o.categories.size() < 2) {
          schema.audit.push_back(name + ": one-hot feature observed " +
                                 std::to_string(o.categories.size()) + " categories");
        }
        f.kind = std::move(o);
        break;
      }
      case KindTag::Embedded:
        f.kind = EmbeddedKind{std::vector<double>(ports.begin(), ports.end()), embed_dim};
        break;
    }
    schema.features.push_back(std::move(f));
  }
  schema.rebuild_layout();
  return schema;
}

struct EncodeEvent {
  enum class Kind { UnseenCategory, Truncated };
  Kind kind = Kind::UnseenCategory;
  FeatureId feature{};
  std::size_t row = 0;
  double value = 0.0;
};

struct EncodedSession {
  Matrix values;                     // max_len x encoded_width
  std::vector<std::uint8_t> mask;    // 1 = real packet; always a prefix
  std::size_t length = 0;            // number of masked-in rows
  SessionContext context;
  std::vector<EncodeEvent> events;
};

/// Vocabulary position of `value`, or -1.
inline int category_index(const std::vector<double>& sorted, double value) {
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), value);
  if (it == sorted.end() || *it != value) return -1;
  return static_cast<int>(it - sorted.begin());
}

inline EncodedSession encode_session(const Session& session, const FeatureSchema& schema,
                                     std::size_t max_len = kDefaultMaxLen) {
  if (schema.features.size() != kFeatureCount) {
    throw Error(Errc::SchemaMismatch, "schema has " + std::to_string(schema.features.size()) +
                                          " features, expected " + std::to_string(kFeatureCount));
  }
  if (session.packets.empty()) throw Error(Errc::EmptyInput, "empty session");
  if (max_len == 0) throw Error(Errc::ConfigInvalid, "max_len must be positive");
  EncodedSession enc;
  enc.values = Matrix::Zero(static_cast<Eigen::Index>(max_len),
                            static_cast<Eigen::Index>(schema.encoded_width));
  enc.mask.assign(max_len, 0);
  enc.length = std::min(max_len, session.packets.size());
  enc.context = session.context();
  if (session.packets.size() > max_len) {
    enc.events.push_back({EncodeEvent::Kind::Truncated, FeatureId::time_since, max_len,
                          static_cast<double>(session.packets.size())});
  }
  for (std::size_t r = 0; r < enc.length; ++r) {
    enc.mask[r] = 1;
    const auto& sp = session.packets[r];
    auto row = enc.values.row(static_cast<Eigen::Index>(r));
    for (const auto& f : schema.features) {
      const double x = feature_value(sp, f.id);
      const auto at = static_cast<Eigen::Index>(f.encoded.offset);
      std::visit(
          [&](const auto& k) {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, NumericKind>) {
              const double range = k.max - k.min;
              row(at) = range > 0.0 ? std::clamp((x - k.min) / range, 0.0, 1.0) : 0.0;
            } else if constexpr (std::is_same_v<K, BinaryKind>) {
              if (x == k.one_value && k.one_value != k.zero_value) {
                row(at) = 1.0;
              } else {
                row(at) = 0.0;
                if (x != k.zero_value) {
                  enc.events.push_back({EncodeEvent::Kind::UnseenCategory, f.id, r, x});
                }
              }
            } else if constexpr (std::is_same_v<K, OneHotKind>) {
              const int c = category_index(k.categories, x);
              if (c >= 0) {
                row(at + c) = 1.0;
              } else {
                enc.events.push_back({EncodeEvent::Kind::UnseenCategory, f.id, r, x});
              }
            } else {
              const int c = category_index(k.vocabulary, x);
              row(at) = static_cast<double>(c);
              if (c < 0) enc.events.push_back({EncodeEvent::Kind::UnseenCategory, f.id, r, x});
            }
          },
          f.kind);
    }
  }
  return enc;
}

/// Rebuilds ts_sec/ts_usec from the session base timestamp plus time_since.
inline void sync_timestamps(std::vector<SessionPacket>& packets, const SessionContext& ctx) {
  const std::uint64_t base = std::uint64_t{ctx.base_ts_sec} * 1'000'000 + ctx.base_ts_usec;
  constexpr double kMaxOffset = 4.0e15;  // keeps ts_sec inside 32 bits
  for (auto& sp : packets) {
    double off = sp.time_since * 1e6;
    if (!(off > 0.0)) off = 0.0;
    off = std::min(off, kMaxOffset);
    std::uint64_t t = base + static_cast<std::uint64_t>(std::llround(off));
    t = std::min<std::uint64_t>(t, std::uint64_t{0xffffffff} * 1'000'000 + 999'999);
    sp.packet.ts_sec = static_cast<std::uint32_t>(t / 1'000'000);
    sp.packet.ts_usec = static_cast<std::uint32_t>(t % 1'000'000);
  }
}

/// Fills the fields that are fixed per session (addresses, MACs) from the
/// decoded direction.
inline void apply_context(SessionPacket& sp, const SessionContext& ctx) {
  auto& p = sp.packet;
  const bool forward = sp.ip_direction == 0;
  p.src_ip = forward ? ctx.initiator_ip : ctx.responder_ip;
  p.dst_ip = forward ? ctx.responder_ip : ctx.initiator_ip;
  p.src_mac = forward ? ctx.initiator_mac : ctx.responder_mac;
  p.dst_mac = forward ? ctx.responder_mac : ctx.initiator_mac;
}

/// Maps decoder-space rows back to packets. `outputs` must use the decoded
/// layout with binary columns as probabilities (or scaled values in MSE-only
/// mode). `embedding_table` holds one row per vocabulary entry and may be
/// empty when the schema has no embedded feature. No constraint repair
/// happens here.
inline std::vector<SessionPacket> decode_outputs(const Matrix& outputs, const FeatureSchema& schema,
                                                 const Matrix& embedding_table,
                                                 const SessionContext& context,
                                                 std::optional<std::size_t> rows = std::nullopt) {
  if (static_cast<std::size_t>(outputs.cols()) != schema.decoded_width) {
    throw Error(Errc::WidthMismatch, "outputs have " + std::to_string(outputs.cols()) +
                                         " columns, schema expects " +
                                         std::to_string(schema.decoded_width));
  }
  const std::size_t n = rows.value_or(static_cast<std::size_t>(outputs.rows()));
  if (n > static_cast<std::size_t>(outputs.rows())) {
    throw Error(Errc::WidthMismatch, "requested more rows than outputs hold");
  }
  std::vector<SessionPacket> packets(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = outputs.row(static_cast<Eigen::Index>(r));
    auto& sp = packets[r];
    for (const auto& f : schema.features) {
      const auto at = static_cast<Eigen::Index>(f.decoded.offset);
      double value = 0.0;
      std::visit(
          [&](const auto& k) {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, NumericKind>) {
              const double raw = row(at) * (k.max - k.min) + k.min;
              value = f.id == FeatureId::time_since ? std::round(raw * 1e6) / 1e6 : std::round(raw);
            } else if constexpr (std::is_same_v<K, BinaryKind>) {
              value = row(at) >= 0.5 ? k.one_value : k.zero_value;
            } else if constexpr (std::is_same_v<K, OneHotKind>) {
              Eigen::Index best = 0;
              row.segment(at, static_cast<Eigen::Index>(f.decoded.width)).maxCoeff(&best);
              value = k.categories[static_cast<std::size_t>(best)];
            } else {
              if (static_cast<std::size_t>(embedding_table.rows()) != k.vocabulary.size() ||
                  static_cast<std::size_t>(embedding_table.cols()) != k.embed_dim) {
                throw Error(Errc::WidthMismatch, "embedding table does not match vocabulary");
              }
              const auto v = row.segment(at, static_cast<Eigen::Index>(k.embed_dim));
              Eigen::Index best = 0;
              double best_d = std::numeric_limits<double>::infinity();
              for (Eigen::Index e = 0; e < embedding_table.rows(); ++e) {
                const double d = (embedding_table.row(e) - v).squaredNorm();
                if (d < best_d) {  // strict: ties keep the lower index
                  best_d = d;
                  best = e;
                }
              }
              value = k.vocabulary[static_cast<std::size_t>(best)];
            }
          },
          f.kind);
      set_feature_value(sp, f.id, value);
    }
    apply_context(sp, context);
  }
  sync_timestamps(packets, context);
  for (auto& sp : packets) sp.packet.tcp_chksum = compute_tcp_checksum(sp.packet);
  return packets;
}

/// Decoder-space rows a perfect model would emit for `enc`.
inline Matrix identity_outputs(const EncodedSession& enc, const FeatureSchema& schema,
                               const Matrix& embedding_table) {
  Matrix out = Matrix::Zero(enc.values.rows(), static_cast<Eigen::Index>(schema.decoded_width));
  for (std::size_t r = 0; r < enc.length; ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    for (const auto& f : schema.features) {
      const auto src = static_cast<Eigen::Index>(f.encoded.offset);
      const auto dst = static_cast<Eigen::Index>(f.decoded.offset);
      if (f.tag() == KindTag::Embedded) {
        const auto id = static_cast<Eigen::Index>(enc.values(i, src));
        if (id >= 0) {
          out.row(i).segment(dst, static_cast<Eigen::Index>(f.decoded.width)) = embedding_table.row(id);
        }
      } else {
        out.row(i).segment(dst, static_cast<Eigen::Index>(f.decoded.width)) =
            enc.values.row(i).segment(src, static_cast<Eigen::Index>(f.encoded.width));
      }
    }
  }
  return out;
}

}  // namespace kalrecon
