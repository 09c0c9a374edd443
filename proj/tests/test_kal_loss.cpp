#include <gtest/gtest.h>

#include <cmath>

#include "support/expect.hpp"
#include "support/model_check.hpp"

using namespace kalrecon;
using kalrecon::testkit::small_problem;

namespace {

double total(const Matrix& out, const Matrix& target, const FeatureSchema& s) {
  ad::Graph g;
  return compute_loss(g, g.constant(out), target, s).total.scalar();
}

double feature_term(const Matrix& out, const Matrix& target, const FeatureSchema& s, FeatureId id) {
  ad::Graph g;
  return compute_loss(g, g.constant(out), target, s).report(s).feature(id);
}

// Scalar references written from the textbook definitions.
double bce(double y, double p) { return -(y * std::log(p) + (1 - y) * std::log(1 - p)); }

double softmax_ce(const std::vector<double>& logits, std::size_t label) {
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  double s = 0;
  for (double z : logits) s += std::exp(z - m);
  return -(logits[label] - m - std::log(s));
}

}  // namespace

TEST(KalLoss, BinaryAtZeroLogitIsLn2) {
  const auto p = small_problem();
  Matrix out = p.input;
  const auto at = static_cast<Eigen::Index>(p.schema.feature(FeatureId::tcp_flag_ACK).decoded.offset);
  out.col(at).setZero();
  EXPECT_NEAR(feature_term(out, p.input, p.schema, FeatureId::tcp_flag_ACK), std::log(2.0), 1e-12);
}

TEST(KalLoss, UniformOneHotIsLogOfCategoryCount) {
  const auto p = small_problem();
  const auto& f = p.schema.feature(FeatureId::ip_ttl);
  ASSERT_EQ(f.decoded.width, 3u);
  Matrix out = p.input;
  out.middleCols(static_cast<Eigen::Index>(f.decoded.offset), 3).setConstant(0.7);
  EXPECT_NEAR(feature_term(out, p.input, p.schema, FeatureId::ip_ttl), std::log(3.0), 1e-12);
}

TEST(KalLoss, TermsAgreeWithScalarReferences) {
  const auto p = small_problem();
  std::mt19937_64 rng(4);
  const Matrix out = p.input + kalrecon::testkit::random_matrix(p.input.rows(), p.input.cols(), rng);
  ad::Graph g;
  const auto report = compute_loss(g, g.constant(out), p.input, p.schema).report(p.schema);
  double sum = 0;
  for (const auto& f : p.schema.features) {
    const auto off = static_cast<Eigen::Index>(f.decoded.offset);
    const auto w = static_cast<Eigen::Index>(f.decoded.width);
    double ref = 0;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      switch (f.tag()) {
        case KindTag::Numeric:
        case KindTag::Embedded:
          for (Eigen::Index c = 0; c < w; ++c) ref += std::pow(out(r, off + c) - p.input(r, off + c), 2) / double(w);
          break;
        case KindTag::Binary:
          ref += bce(p.input(r, off), 1.0 / (1.0 + std::exp(-out(r, off))));
          break;
        case KindTag::OneHot: {
          std::vector<double> z(out.row(r).segment(off, w).data(), out.row(r).segment(off, w).data() + w);
          Eigen::Index label = 0;
          p.input.row(r).segment(off, w).maxCoeff(&label);
          ref += softmax_ce(z, static_cast<std::size_t>(label));
          break;
        }
      }
    }
    ref /= static_cast<double>(out.rows());
    EXPECT_NEAR(report.feature(f.id), ref, 1e-10) << f.name();
    sum += ref;
  }
  EXPECT_NEAR(report.total, sum, 1e-9);
}

TEST(KalLoss, SaturatedIdentityOutputsGiveNearZeroLoss) {
  GeneratorConfig gc;
  gc.sessions = 12;
  gc.seed = 21;
  const auto sessions = group_sessions(generate(gc));
  const auto p = small_problem();
  for (const auto& s : sessions) {
    const auto enc = encode_session(s, p.schema);
    const auto r = compute_loss(identity_raw_outputs(enc, p.schema, p.table), enc, p.schema, p.table);
    EXPECT_LT(r.total, 1e-15);
    EXPECT_GE(r.total, 0.0);
  }
}

TEST(KalLoss, PerfectNumericPredictionIsTheMinimum) {
  // Perturbing any single entry of the target never lowers the total.
  const auto p = small_problem();
  Matrix best = p.input;
  for (const auto& f : p.schema.features) {
    if (f.tag() == KindTag::Binary || f.tag() == KindTag::OneHot) {
      auto block = best.middleCols(static_cast<Eigen::Index>(f.decoded.offset), static_cast<Eigen::Index>(f.decoded.width));
      block = block.unaryExpr([](double y) { return y >= 0.5 ? kSaturatedLogit : -kSaturatedLogit; });
    }
  }
  const double base = total(best, p.input, p.schema);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    Matrix m = best;
    m(static_cast<Eigen::Index>(rng() % m.rows()), static_cast<Eigen::Index>(rng() % m.cols())) +=
        (rng() % 2 ? 0.3 : -0.3);
    EXPECT_GE(total(m, p.input, p.schema), base - 1e-12);
  }
}

TEST(KalLoss, ValueOnlyLossIgnoresPaddingRows) {
  GeneratorConfig gc;
  gc.sessions = 12;
  gc.seed = 21;
  const auto sessions = group_sessions(generate(gc));
  const auto p = small_problem();
  const auto enc = encode_session(sessions[0], p.schema, 24);
  std::mt19937_64 rng(6);
  Matrix out = kalrecon::testkit::random_matrix(24, static_cast<Eigen::Index>(p.schema.decoded_width), rng);
  const double a = compute_loss(out, enc, p.schema, p.table).total;
  out.bottomRows(24 - static_cast<Eigen::Index>(enc.length)).setConstant(1e6);
  EXPECT_EQ(compute_loss(out, enc, p.schema, p.table).total, a);
}

TEST(KalLoss, MseOnlyModeScoresEverySlotWithSquaredError) {
  const auto p = small_problem(SchemaMode::MseOnly);
  Matrix out = p.input;
  out.array() += 0.5;
  // Every feature contributes 0.25 regardless of kind.
  EXPECT_NEAR(total(out, p.input, p.schema), 0.25 * kFeatureCount, 1e-12);
}

TEST(KalLoss, ShapeErrors) {
  const auto p = small_problem();
  ad::Graph g;
  EXPECT_ERRC(compute_loss(g, g.constant(Matrix::Zero(2, 3)), Matrix::Zero(2, 3), p.schema), Errc::WidthMismatch);
  EXPECT_ERRC(compute_loss(g, g.constant(p.input), Matrix(p.input.topRows(1)), p.schema), Errc::ShapeMismatch);
  const Matrix none(0, p.input.cols());
  EXPECT_ERRC(compute_loss(g, g.constant(none), none, p.schema), Errc::EmptyMask);
}

TEST(Clamp, ProbabilityFloor) {
  EXPECT_EQ(clamp_probability(0.0), 1e-7);
  EXPECT_EQ(clamp_probability(1.0), 1.0 - 1e-7);
  EXPECT_EQ(clamp_probability(0.3), 0.3);
  ad::Graph g;
  Matrix m(1, 2);
  m << -1.0, 2.0;
  const Matrix c = clamp_probabilities(g.constant(m)).value();
  EXPECT_EQ(c(0, 0), 1e-7);
  EXPECT_EQ(c(0, 1), 1.0 - 1e-7);
  EXPECT_TRUE(std::isfinite(bce(1.0, clamp_probability(0.0))));
}

TEST(LossAccumulator, PoolsByPacketCount) {
  LossReport a{{{FeatureId::tcp_ack, KindTag::Numeric, 1.0}}, 1.0, 1};
  LossReport b{{{FeatureId::tcp_ack, KindTag::Numeric, 4.0}}, 4.0, 3};
  LossAccumulator acc;
  EXPECT_TRUE(acc.empty());
  acc.add(a);
  acc.add(b);
  const auto m = acc.mean();
  EXPECT_DOUBLE_EQ(m.total, (1.0 + 12.0) / 4.0);
  EXPECT_EQ(m.packet_count, 4u);
}

TEST(LossReport, CategoricalMeanSkipsNumerics) {
  LossReport r{{{FeatureId::tcp_ack, KindTag::Numeric, 9.0},
                {FeatureId::tcp_flag_SYN, KindTag::Binary, 1.0},
                {FeatureId::ip_ttl, KindTag::OneHot, 2.0}},
               12.0,
               1};
  EXPECT_DOUBLE_EQ(r.categorical_mean(), 1.5);
  EXPECT_ERRC(r.feature(FeatureId::src_port), Errc::SchemaMismatch);
}
