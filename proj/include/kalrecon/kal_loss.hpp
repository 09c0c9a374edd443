#pragma once

// Training objectives. In KAL mode each feature kind gets its own term:
// squared error for numerics, BCE from logits for binaries, softmax CE for
// one-hots and squared error in the frozen embedding space for ports. Every
// term is a mean over masked-in packets and the total is their plain sum.
// MSE-only mode scores every slot with squared error.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kalrecon/autodiff.hpp"
#include "kalrecon/error.hpp"
#include "kalrecon/features.hpp"
#include "kalrecon/matrix.hpp"

namespace kalrecon {

inline constexpr double kProbabilityFloor = 1e-7;

/// Logit magnitude used to express a certain binary or one-hot target.
inline constexpr double kSaturatedLogit = 40.0;

inline double clamp_probability(double p) {
  return std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
}

inline Matrix clamp_probabilities(const Matrix& p) {
  return p.unaryExpr([](double x) { return clamp_probability(x); });
}

inline ad::Var clamp_probabilities(ad::Var p) {
  return ad::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
}

struct FeatureLoss {
  FeatureId id{};
  KindTag kind{};
  double value = 0.0;
};

struct LossReport {
  std::vector<FeatureLoss> per_feature;  // schema order
  double total = 0.0;
  std::size_t packet_count = 0;

  double feature(FeatureId id) const {
    for (const auto& f : per_feature) {
      if (f.id == id) return f.value;
    }
    throw Error(Errc::SchemaMismatch, "feature not in report");
  }

  /// Mean of the terms whose kind is not Numeric.
  double categorical_mean() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& f : per_feature) {
      if (is_categorical(f.kind)) {
        sum += f.value;
        ++n;
      }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

/// Graph-side loss: one 1x1 node per feature plus their sum.
struct GraphLoss {
  std::vector<ad::Var> per_feature;
  ad::Var total;
  std::size_t packet_count = 0;

  LossReport report(const FeatureSchema& schema) const {
    LossReport r;
    r.packet_count = packet_count;
    for (std::size_t i = 0; i < per_feature.size(); ++i) {
      r.per_feature.push_back({schema.features[i].id, schema.features[i].tag(), per_feature[i].scalar()});
    }
    r.total = total.scalar();
    return r;
  }
};

/// `outputs` and `target` hold the same n masked-in rows in the decoded
/// layout. Targets carry 0/1 for binaries, indicators for one-hots and the
/// frozen embedding for ports, as identity_outputs() produces.
inline GraphLoss compute_loss(ad::Graph& g, ad::Var outputs, const Matrix& target,
                              const FeatureSchema& schema) {
  if (static_cast<std::size_t>(outputs.cols()) != schema.decoded_width ||
      target.cols() != outputs.cols()) {
    throw Error(Errc::WidthMismatch, "outputs have " + std::to_string(outputs.cols()) +
                                         " columns, schema expects " +
                                         std::to_string(schema.decoded_width));
  }
  if (outputs.rows() != target.rows()) throw Error(Errc::ShapeMismatch, "output/target row count differs");
  if (outputs.rows() == 0) throw Error(Errc::EmptyMask, "no masked-in packets");
  const double inv_n = 1.0 / static_cast<double>(outputs.rows());
  GraphLoss loss;
  loss.packet_count = static_cast<std::size_t>(outputs.rows());
  std::vector<ad::Var> terms;
  for (const auto& f : schema.features) {
    const auto off = static_cast<Eigen::Index>(f.decoded.offset);
    const auto width = static_cast<Eigen::Index>(f.decoded.width);
    ad::Var z = ad::slice_cols(outputs, off, width);
    const Matrix y = target.middleCols(off, width);
    ad::Var term;
    const KindTag kind = schema.mode == SchemaMode::Kal ? f.tag() : KindTag::Numeric;
    switch (kind) {
      case KindTag::Numeric:
      case KindTag::Embedded:
        // Per-row mean over the slot, then mean over rows.
        term = ad::scale(ad::sum_all(ad::square(ad::sub(z, g.constant(y)))), inv_n / static_cast<double>(width));
        break;
      case KindTag::Binary:
        // softplus(z) - y z == -[y log s(z) + (1 - y) log(1 - s(z))]
        term = ad::scale(ad::sum_all(ad::sub(ad::softplus(z), ad::mul(g.constant(y), z))), inv_n);
        break;
      case KindTag::OneHot:
        term = ad::scale(ad::sum_all(ad::mul(g.constant(y), ad::log_softmax_rows(z))), -inv_n);
        break;
    }
    terms.push_back(term);
  }
  loss.per_feature = terms;
  loss.total = ad::sum_all(ad::concat_cols(terms));
  return loss;
}

/// Value-only loss on the masked-in rows of full max_len outputs.
inline LossReport compute_loss(const Matrix& outputs, const EncodedSession& target, const FeatureSchema& schema,
                               const Matrix& embedding_table) {
  if (static_cast<std::size_t>(outputs.cols()) != schema.decoded_width) {
    throw Error(Errc::WidthMismatch, "outputs have " + std::to_string(outputs.cols()) +
                                         " columns, schema expects " +
                                         std::to_string(schema.decoded_width));
  }
  if (target.length == 0) throw Error(Errc::EmptyMask, "no masked-in packets");
  if (outputs.rows() < static_cast<Eigen::Index>(target.length)) {
    throw Error(Errc::ShapeMismatch, "fewer output rows than masked-in packets");
  }
  const auto n = static_cast<Eigen::Index>(target.length);
  ad::Graph g;
  const Matrix y = identity_outputs(target, schema, embedding_table).topRows(n);
  return compute_loss(g, g.constant(outputs.topRows(n)), y, schema).report(schema);
}

/// Packet-weighted running mean of LossReports, i.e. the report one would get
/// by pooling all masked-in packets of the accumulated sessions.
class LossAccumulator {
 public:
  void add(const LossReport& r) {
    if (sums_.empty()) {
      ids_.clear();
      for (const auto& f : r.per_feature) ids_.push_back({f.id, f.kind, 0.0});
      sums_.assign(r.per_feature.size(), 0.0);
    }
    if (r.per_feature.size() != sums_.size()) throw Error(Errc::SchemaMismatch, "loss report layout changed");
    const auto w = static_cast<double>(r.packet_count);
    for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += w * r.per_feature[i].value;
    packets_ += r.packet_count;
  }

  LossReport mean() const {
    LossReport out;
    out.packet_count = packets_;
    if (packets_ == 0) return out;
    for (std::size_t i = 0; i < sums_.size(); ++i) {
      FeatureLoss f = ids_[i];
      f.value = sums_[i] / static_cast<double>(packets_);
      out.total += f.value;
      out.per_feature.push_back(f);
    }
    return out;
  }

  bool empty() const { return packets_ == 0; }

 private:
  std::vector<FeatureLoss> ids_;
  std::vector<double> sums_;
  std::size_t packets_ = 0;
};

/// Maps raw model outputs to the space decode_outputs expects. In KAL mode
/// binary logits become probabilities; one-hot logits are left as they are
/// since decoding only takes their argmax.
inline Matrix to_decoder_space(const Matrix& raw, const FeatureSchema& schema) {
  Matrix out = raw;
  if (schema.mode != SchemaMode::Kal) return out;
  for (const auto& f : schema.features) {
    if (f.tag() != KindTag::Binary) continue;
    auto col = out.col(static_cast<Eigen::Index>(f.decoded.offset));
    col = col.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  }
  return out;
}

/// Raw outputs of a perfect model: identity_outputs() with binary and one-hot
/// targets turned into saturated logits in KAL mode.
inline Matrix identity_raw_outputs(const EncodedSession& enc, const FeatureSchema& schema,
                                   const Matrix& embedding_table) {
  Matrix out = identity_outputs(enc, schema, embedding_table);
  if (schema.mode != SchemaMode::Kal) return out;
  for (const auto& f : schema.features) {
    const KindTag k = f.tag();
    if (k != KindTag::Binary && k != KindTag::OneHot) continue;
    auto block = out.middleCols(static_cast<Eigen::Index>(f.decoded.offset), static_cast<Eigen::Index>(f.decoded.width));
    block = block.unaryExpr([](double y) { return y >= 0.5 ? kSaturatedLogit : -kSaturatedLogit; });
  }
  return out;
}

}  // namespace kalrecon
