#pragma once

// Small model instances under the full loss, for gradient checks of every
// architecture.

#include "kalrecon/kal_loss.hpp"
#include "kalrecon/models.hpp"
#include "kalrecon/synth.hpp"
#include "support/gradcheck.hpp"

namespace kalrecon::testkit {

struct SmallProblem {
  FeatureSchema schema;
  Matrix table;
  Matrix input;  // masked-in rows in the decoded layout
};

inline SmallProblem small_problem(SchemaMode mode = SchemaMode::Kal, std::size_t rows = 5) {
  GeneratorConfig gc;
  gc.sessions = 12;
  gc.seed = 21;
  const auto sessions = group_sessions(generate(gc));
  SmallProblem p;
  p.schema = fit_schema(sessions, mode, 4);
  std::mt19937_64 rng(8);
  p.table = random_matrix(static_cast<Eigen::Index>(p.schema.port_vocabulary().size()), 4, rng);
  const auto enc = encode_session(sessions[0], p.schema, rows);
  p.input = SessionAutoencoder::build_input(enc, p.schema, p.table);
  return p;
}

inline ModelConfig small_config(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.hidden_dim = 8;
  c.latent_dim = 4;
  c.num_layers = 2;
  c.num_heads = 2;
  c.seed = 5;
  return c;
}

/// Relative-error check of d(total loss)/d(parameters), sampling up to
/// `per_param` entries of every parameter.
inline GradCheck check_model_gradients(Arch arch, std::size_t per_param = 8) {
  const auto p = small_problem();
  SessionAutoencoder model(small_config(arch), p.schema);
  return check_parameters(
      model.parameters(),
      [&](ad::Graph& g) { return compute_loss(g, model.forward(g, p.input), p.input, p.schema).total; }, per_param);
}

}  // namespace kalrecon::testkit
