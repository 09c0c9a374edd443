#pragma once

// Per-feature evaluation: training-unit loss, scaled MSE for numerics and the
// exact-match reconstruction error, all averaged uniformly over packets.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kalrecon/constraints.hpp"
#include "kalrecon/features.hpp"
#include "kalrecon/kal_loss.hpp"
#include "kalrecon/session.hpp"

namespace kalrecon {

/// Raw model outputs (max_len x decoded_width) for one encoded session.
using Predictor = std::function<Matrix(const EncodedSession&)>;

inline Predictor identity_predictor(const FeatureSchema& schema, const Matrix& embedding_table) {
  return [&schema, &embedding_table](const EncodedSession& enc) {
    return identity_raw_outputs(enc, schema, embedding_table);
  };
}

struct FeatureMetrics {
  FeatureId id{};
  KindTag kind{};
  double loss = 0.0;                  // training units
  std::optional<double> scaled_mse;   // Numeric only
  double recon_error = 0.0;           // share of packets not reproduced exactly
  std::optional<double> recon_error_enforced;
};

struct PacketRecord {
  std::size_t session = 0;
  std::size_t packet = 0;
  FeatureId feature{};
  double original = 0.0;
  double decoded = 0.0;
  std::optional<double> enforced;
  bool error = false;
  std::optional<bool> error_enforced;
};

struct MetricsTable {
  SchemaMode mode = SchemaMode::Kal;
  std::vector<FeatureMetrics> features;  // schema order
  std::size_t packet_count = 0;
  std::size_t session_count = 0;
  double total_loss = 0.0;
  std::size_t repairable_violations_before = 0;
  std::vector<PacketRecord> records;  // filled on request

  const FeatureMetrics& feature(FeatureId id) const {
    for (const auto& f : features) {
      if (f.id == id) return f;
    }
    throw Error(Errc::SchemaMismatch, "feature not in table");
  }

  double mean_recon_error() const {
    double s = 0.0;
    for (const auto& f : features) s += f.recon_error;
    return features.empty() ? 0.0 : s / static_cast<double>(features.size());
  }

  /// Mean loss over the features whose kind is not Numeric.
  double categorical_loss() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& f : features) {
      if (is_categorical(f.kind)) {
        s += f.loss;
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

struct EvaluateOptions {
  std::size_t max_len = kDefaultMaxLen;
  const ConstraintSpec* spec = nullptr;  // also score the enforced reconstruction
  bool keep_records = false;
};

inline MetricsTable evaluate(const Predictor& predict, std::span<const Session> sessions, const FeatureSchema& schema,
                             const Matrix& embedding_table, const EvaluateOptions& opts = {}) {
  if (schema.features.size() != kFeatureCount) throw Error(Errc::SchemaMismatch, "schema is incomplete");
  MetricsTable table;
  table.mode = schema.mode;
  const std::size_t nf = schema.features.size();
  std::vector<double> sq_sum(nf, 0.0), miss(nf, 0.0), miss_enforced(nf, 0.0);
  LossAccumulator losses;
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const EncodedSession enc = encode_session(sessions[s], schema, opts.max_len);
    const Matrix raw = predict(enc);
    if (static_cast<std::size_t>(raw.cols()) != schema.decoded_width) {
      throw Error(Errc::SchemaMismatch, "predictor width does not match schema");
    }
    losses.add(compute_loss(raw, enc, schema, embedding_table));
    const auto decoded = decode_outputs(to_decoder_space(raw, schema), schema, embedding_table, enc.context, enc.length);
    std::optional<EnforceResult> enforced;
    if (opts.spec != nullptr) {
      table.repairable_violations_before += count_repairable(validate(decoded, *opts.spec), *opts.spec);
      enforced = enforce(decoded, *opts.spec);
    }
    for (std::size_t r = 0; r < enc.length; ++r) {
      const auto& original = sessions[s].packets[r];
      for (std::size_t i = 0; i < nf; ++i) {
        const auto& f = schema.features[i];
        const double truth = feature_value(original, f.id);
        const double got = feature_value(decoded[r], f.id);
        const bool wrong = !feature_matches(f.id, got, truth);
        miss[i] += wrong;
        if (const auto* k = std::get_if<NumericKind>(&f.kind)) {
          // Prediction and (clipped) target both mapped back to original units.
          const double range = k->max - k->min;
          const auto c = static_cast<Eigen::Index>(f.decoded.offset);
          const auto at = static_cast<Eigen::Index>(r);
          const double pred = raw(at, c) * range + k->min;
          const double target = enc.values(at, static_cast<Eigen::Index>(f.encoded.offset)) * range + k->min;
          sq_sum[i] += (pred - target) * (pred - target);
        }
        PacketRecord rec{s, r, f.id, truth, got, std::nullopt, wrong, std::nullopt};
        if (enforced) {
          const double e = feature_value(enforced->session[r], f.id);
          const bool wrong_e = !feature_matches(f.id, e, truth);
          miss_enforced[i] += wrong_e;
          rec.enforced = e;
          rec.error_enforced = wrong_e;
        }
        if (opts.keep_records) table.records.push_back(rec);
      }
    }
    table.packet_count += enc.length;
  }
  table.session_count = sessions.size();
  if (table.packet_count == 0) throw Error(Errc::EmptyInput, "no packets to evaluate");
  const LossReport mean_loss = losses.mean();
  table.total_loss = mean_loss.total;
  const auto n = static_cast<double>(table.packet_count);
  for (std::size_t i = 0; i < nf; ++i) {
    const auto& f = schema.features[i];
    FeatureMetrics m;
    m.id = f.id;
    m.kind = f.tag();
    m.loss = mean_loss.per_feature[i].value;
    if (m.kind == KindTag::Numeric) m.scaled_mse = sq_sum[i] / n;
    m.recon_error = miss[i] / n;
    if (opts.spec != nullptr) m.recon_error_enforced = miss_enforced[i] / n;
    table.features.push_back(m);
  }
  return table;
}

}  // namespace kalrecon
