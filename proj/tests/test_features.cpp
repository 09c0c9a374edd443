#include <gtest/gtest.h>

#include <random>

#include "kalrecon/features.hpp"
#include "kalrecon/synth.hpp"

using namespace kalrecon;

namespace {

std::vector<Session> corpus(std::size_t n = 80, std::uint64_t seed = 3) {
  GeneratorConfig gc;
  gc.sessions = n;
  gc.seed = seed;
  return group_sessions(generate(gc));
}

Matrix random_table(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

void expect_identity_round_trip(const std::vector<Session>& sessions, SchemaMode mode) {
  const auto schema = fit_schema(sessions, mode);
  const Matrix table = random_table(schema.port_vocabulary().size(), schema.embed_dim(), 1);
  for (const auto& s : sessions) {
    const auto enc = encode_session(s, schema);
    const auto decoded = decode_outputs(identity_outputs(enc, schema, table), schema, table, enc.context, enc.length);
    ASSERT_EQ(decoded.size(), s.packets.size());
    for (std::size_t i = 0; i < decoded.size(); ++i) {
      EXPECT_NEAR(decoded[i].time_since, s.packets[i].time_since, 1e-6);
      EXPECT_EQ(decoded[i].ip_direction, s.packets[i].ip_direction);
      EXPECT_EQ(decoded[i].packet, s.packets[i].packet) << "session packet " << i;
    }
  }
}

}  // namespace

TEST(FitSchema, KalKindsAndWidths) {
  const auto sessions = corpus();
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  ASSERT_EQ(schema.features.size(), kFeatureCount);
  EXPECT_EQ(schema.feature(FeatureId::tcp_ack).tag(), KindTag::Numeric);
  EXPECT_EQ(schema.feature(FeatureId::ip_direction).tag(), KindTag::Binary);
  EXPECT_EQ(schema.feature(FeatureId::tcp_flag_FIN).tag(), KindTag::Binary);
  EXPECT_EQ(schema.feature(FeatureId::src_port).tag(), KindTag::Embedded);
  const auto& ttl = std::get<OneHotKind>(schema.feature(FeatureId::ip_ttl).kind);
  EXPECT_EQ(ttl.categories, (std::vector<double>{63, 64, 128}));
  EXPECT_EQ(std::get<OneHotKind>(schema.feature(FeatureId::tcp_dataofs).kind).categories.size(), 2u);
  EXPECT_EQ(std::get<OneHotKind>(schema.feature(FeatureId::ip_tos).kind).categories.size(), 4u);
  EXPECT_EQ(schema.port_vocabulary().size(), 64u);
  // 8 numeric + 15 binary + (4 + 2 + 3) one-hot + 2 port ids / 2 x 32 embedding.
  EXPECT_EQ(schema.encoded_width, 8u + 15u + 9u + 2u);
  EXPECT_EQ(schema.decoded_width, 8u + 15u + 9u + 64u);
}

TEST(FitSchema, MseOnlyKeepsBinaryBlock) {
  const auto schema = fit_schema(corpus(), SchemaMode::MseOnly);
  std::size_t binary = 0;
  for (const auto& f : schema.features) {
    EXPECT_NE(f.tag(), KindTag::OneHot);
    EXPECT_NE(f.tag(), KindTag::Embedded);
    binary += f.tag() == KindTag::Binary;
  }
  EXPECT_EQ(binary, 15u);
  EXPECT_EQ(schema.encoded_width, kFeatureCount);
  EXPECT_EQ(schema.decoded_width, kFeatureCount);
}

TEST(FitSchema, NumericRangeMatchesObservedExtremes) {
  const auto sessions = corpus();
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  double lo = 1e300, hi = -1e300;
  for (const auto& s : sessions) {
    for (const auto& sp : s.packets) {
      lo = std::min(lo, double(sp.packet.tcp_window));
      hi = std::max(hi, double(sp.packet.tcp_window));
    }
  }
  const auto& k = std::get<NumericKind>(schema.feature(FeatureId::tcp_window).kind);
  EXPECT_EQ(k.min, lo);
  EXPECT_EQ(k.max, hi);
}

TEST(FitSchema, EmptyTrainingSetThrows) {
  try {
    fit_schema(std::vector<Session>{}, SchemaMode::Kal);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyTrainingSet);
  }
}

TEST(FitSchema, JsonRoundTripPreservesHash) {
  const auto schema = fit_schema(corpus(), SchemaMode::Kal);
  const auto back = FeatureSchema::from_json(schema.to_json());
  EXPECT_EQ(back.hash(), schema.hash());
  EXPECT_EQ(back.decoded_width, schema.decoded_width);
  EXPECT_NE(fit_schema(corpus(), SchemaMode::MseOnly).hash(), schema.hash());
}

TEST(Encode, IdentityRoundTripKal) { expect_identity_round_trip(corpus(), SchemaMode::Kal); }

TEST(Encode, IdentityRoundTripMseOnly) { expect_identity_round_trip(corpus(), SchemaMode::MseOnly); }

TEST(Encode, MaskIsPrefixAndPaddingIsZero) {
  const auto sessions = corpus(5);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  const auto enc = encode_session(sessions[0], schema, 20);
  EXPECT_EQ(enc.length, sessions[0].packets.size());
  for (std::size_t r = 0; r < 20; ++r) {
    EXPECT_EQ(enc.mask[r], r < enc.length ? 1 : 0);
    if (r >= enc.length) {
      EXPECT_TRUE(enc.values.row(static_cast<Eigen::Index>(r)).isZero());
    }
  }
}

TEST(Encode, NumericValuesLieInUnitInterval) {
  const auto sessions = corpus();
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  for (const auto& s : sessions) {
    const auto enc = encode_session(s, schema);
    for (const auto& f : schema.features) {
      if (f.tag() != KindTag::Numeric) continue;
      const auto col = enc.values.col(static_cast<Eigen::Index>(f.encoded.offset));
      EXPECT_GE(col.minCoeff(), 0.0);
      EXPECT_LE(col.maxCoeff(), 1.0);
    }
  }
}

TEST(Encode, OutOfRangeNumericIsClipped) {
  auto sessions = corpus(10);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  sessions[0].packets[0].packet.tcp_window = 0;  // below every generated window
  const auto enc = encode_session(sessions[0], schema);
  EXPECT_EQ(enc.values(0, static_cast<Eigen::Index>(schema.feature(FeatureId::tcp_window).encoded.offset)), 0.0);
}

TEST(Encode, UnseenCategoryIsReported) {
  auto sessions = corpus(10);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  sessions[0].packets[1].packet.ip_ttl = 7;
  sessions[0].packets[2].packet.src_port = 1;
  const auto enc = encode_session(sessions[0], schema);
  std::size_t ttl = 0, port = 0;
  for (const auto& e : enc.events) {
    ttl += e.feature == FeatureId::ip_ttl && e.row == 1;
    port += e.feature == FeatureId::src_port && e.row == 2;
  }
  EXPECT_EQ(ttl, 1u);
  EXPECT_EQ(port, 1u);
  const auto& f = schema.feature(FeatureId::ip_ttl);
  EXPECT_TRUE(enc.values.row(1).segment(static_cast<Eigen::Index>(f.encoded.offset), 3).isZero());
  EXPECT_EQ(enc.values(2, static_cast<Eigen::Index>(schema.feature(FeatureId::src_port).encoded.offset)), -1.0);
}

TEST(Encode, LongSessionIsTruncatedWithEvent) {
  const auto sessions = corpus(20);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  const auto& s = *std::max_element(sessions.begin(), sessions.end(),
                                    [](const Session& a, const Session& b) { return a.packets.size() < b.packets.size(); });
  const auto enc = encode_session(s, schema, 3);
  EXPECT_EQ(enc.length, 3u);
  ASSERT_FALSE(enc.events.empty());
  EXPECT_EQ(enc.events.front().kind, EncodeEvent::Kind::Truncated);
}

TEST(Decode, WidthMismatchThrows) {
  const auto sessions = corpus(5);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  const Matrix table = random_table(64, 32, 2);
  try {
    decode_outputs(Matrix::Zero(2, 5), schema, table, sessions[0].context());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::WidthMismatch);
  }
}

TEST(Decode, BinaryThresholdAndOneHotArgmax) {
  const auto sessions = corpus(10);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  const Matrix table = random_table(schema.port_vocabulary().size(), 32, 3);
  const auto enc = encode_session(sessions[0], schema);
  Matrix out = identity_outputs(enc, schema, table);
  const auto syn = static_cast<Eigen::Index>(schema.feature(FeatureId::tcp_flag_SYN).decoded.offset);
  const auto ttl = static_cast<Eigen::Index>(schema.feature(FeatureId::ip_ttl).decoded.offset);
  out(0, syn) = 0.5;  // exactly at the threshold -> set
  out(1, syn) = 0.49;
  out.row(0).segment(ttl, 3) << 0.1, 0.2, 0.7;
  const auto d = decode_outputs(out, schema, table, enc.context, enc.length);
  EXPECT_TRUE(d[0].packet.tcp_flags.syn);
  EXPECT_FALSE(d[1].packet.tcp_flags.syn);
  EXPECT_EQ(d[0].packet.ip_ttl, 128);
}

TEST(Decode, EmbeddingTieGoesToLowerIndex) {
  const auto sessions = corpus(10);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  const auto vocab = schema.port_vocabulary();
  Matrix table = random_table(vocab.size(), 32, 4);
  table.row(1) = -table.row(0);  // the origin is equidistant from rows 0 and 1
  const auto enc = encode_session(sessions[0], schema);
  Matrix out = identity_outputs(enc, schema, table);
  const auto at = static_cast<Eigen::Index>(schema.feature(FeatureId::dst_port).decoded.offset);
  out.row(0).segment(at, 32).setZero();
  // Move every other row far away so only rows 0 and 1 compete.
  for (Eigen::Index r = 2; r < table.rows(); ++r) table.row(r).setConstant(100.0);
  const auto d = decode_outputs(out, schema, table, enc.context, 1);
  EXPECT_EQ(d[0].packet.dst_port, vocab[0]);
}

TEST(Decode, SaturatesOutOfRangeNumerics) {
  const auto sessions = corpus(10);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  const Matrix table = random_table(schema.port_vocabulary().size(), 32, 5);
  const auto enc = encode_session(sessions[0], schema);
  Matrix out = identity_outputs(enc, schema, table);
  const auto win = static_cast<Eigen::Index>(schema.feature(FeatureId::tcp_window).decoded.offset);
  out(0, win) = 1e9;
  out(1, win) = -1e9;
  const auto d = decode_outputs(out, schema, table, enc.context, 2);
  EXPECT_EQ(d[0].packet.tcp_window, 0xffff);
  EXPECT_EQ(d[1].packet.tcp_window, 0);
}

TEST(FeatureValues, SetThenGetForEveryFeature) {
  SessionPacket sp;
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    const auto id = static_cast<FeatureId>(i);
    const KindTag k = kal_block(id);
    const double v = k == KindTag::Binary ? 1.0 : (id == FeatureId::time_since ? 0.25 : 5.0);
    set_feature_value(sp, id, v);
    EXPECT_DOUBLE_EQ(feature_value(sp, id), v) << feature_name(id);
  }
}

TEST(FeatureNames, CanonicalOrder) {
  EXPECT_EQ(kFeatureNames.front(), "tcp_ack");
  EXPECT_EQ(feature_name(FeatureId::payload_size), "payload_size");
  EXPECT_EQ(kFeatureNames.back(), "src_port");
  EXPECT_EQ(feature_from_name("ip_ttl"), FeatureId::ip_ttl);
  EXPECT_FALSE(feature_from_name("nope").has_value());
}
