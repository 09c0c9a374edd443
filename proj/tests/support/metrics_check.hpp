#pragma once

// Scaled-MSE probes: a predictor with a known normalized error on one numeric
// feature, evaluated end to end.

#include <cmath>
#include <random>

#include "kalrecon/metrics.hpp"
#include "kalrecon/synth.hpp"

namespace kalrecon::testkit {

struct ScaledMseProbe {
  double normalized_mse = 0.0;  // measured in encoded units by the test
  double range = 0.0;
  double scaled_mse = 0.0;      // as reported by evaluate()
};

/// Corpus whose `id` values span exactly [lo, hi]; the predictor adds `offset`
/// (encoded units) to that feature and is perfect elsewhere.
inline ScaledMseProbe probe_scaled_mse(FeatureId id, double lo, double hi, double offset, std::uint64_t seed = 9) {
  GeneratorConfig gc;
  gc.sessions = 40;
  gc.seed = seed;
  auto sessions = group_sessions(generate(gc));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& s : sessions) {
    for (auto& sp : s.packets) set_feature_value(sp, id, std::round(u(rng)));
  }
  set_feature_value(sessions.front().packets.front(), id, lo);
  set_feature_value(sessions.back().packets.back(), id, hi);
  const auto schema = fit_schema(sessions, SchemaMode::Kal);
  Matrix table = Matrix::Identity(static_cast<Eigen::Index>(schema.port_vocabulary().size()), 32);
  const auto col = static_cast<Eigen::Index>(schema.feature(id).decoded.offset);
  const auto enc_col = static_cast<Eigen::Index>(schema.feature(id).encoded.offset);

  ScaledMseProbe out;
  double sq = 0.0;
  std::size_t n = 0;
  auto predict = [&](const EncodedSession& enc) {
    Matrix raw = identity_raw_outputs(enc, schema, table);
    for (std::size_t r = 0; r < enc.length; ++r) {
      const auto at = static_cast<Eigen::Index>(r);
      raw(at, col) += offset;
      sq += std::pow(raw(at, col) - enc.values(at, enc_col), 2);
      ++n;
    }
    return raw;
  };
  const auto metrics = evaluate(predict, sessions, schema, table);
  const auto& k = std::get<NumericKind>(schema.feature(id).kind);
  out.normalized_mse = sq / static_cast<double>(n);
  out.range = k.max - k.min;
  out.scaled_mse = metrics.feature(id).scaled_mse.value();
  return out;
}

}  // namespace kalrecon::testkit
