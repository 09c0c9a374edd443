#pragma once

// Session autoencoders and the port embedder.
//
// Every architecture keeps the packet axis: the encoder maps an n x in_width
// session to an n x latent_dim sequence and the decoder maps that back to
// n x decoded_width raw outputs (values, logits, embedding vectors). Only the
// n masked-in rows are ever processed; padding rows are reattached as zeros
// by infer(), so masked rows can influence neither outputs nor loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "kalrecon/autodiff.hpp"
#include "kalrecon/error.hpp"
#include "kalrecon/features.hpp"
#include "kalrecon/matrix.hpp"

namespace kalrecon {

enum class Arch { Feedforward, GRU, LSTM, BiLSTM, Attention, Transformer };

inline constexpr std::array<Arch, 6> kAllArchs = {Arch::Feedforward, Arch::GRU,       Arch::LSTM,
                                                  Arch::BiLSTM,      Arch::Attention, Arch::Transformer};

inline std::string_view arch_name(Arch a) {
  switch (a) {
    case Arch::Feedforward: return "feedforward";
    case Arch::GRU: return "gru";
    case Arch::LSTM: return "lstm";
    case Arch::BiLSTM: return "bilstm";
    case Arch::Attention: return "attention";
    case Arch::Transformer: return "transformer";
  }
  return "?";
}

inline Arch parse_arch(std::string_view s) {
  for (Arch a : kAllArchs) {
    if (arch_name(a) == s) return a;
  }
  throw Error(Errc::ConfigInvalid, "unknown architecture '" + std::string(s) + "'");
}

inline bool is_recurrent(Arch a) { return a == Arch::GRU || a == Arch::LSTM || a == Arch::BiLSTM; }
inline bool is_attention(Arch a) { return a == Arch::Attention || a == Arch::Transformer; }

/// Which input columns the input-layer dropout may zero.
enum class DropoutColumns { All, Categorical };

struct ModelConfig {
  Arch arch = Arch::Transformer;
  std::size_t hidden_dim = 64;
  std::size_t latent_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  double dropout_rate = 0.0;  // applied to the model input
  DropoutColumns dropout_columns = DropoutColumns::Categorical;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& why) { throw Error(Errc::ConfigInvariantViolation, why); };
    if (hidden_dim == 0 || latent_dim == 0 || num_layers == 0 || num_heads == 0) {
      fail("dimensions, layers and heads must be positive");
    }
    if (is_attention(arch) && hidden_dim % num_heads != 0) {
      fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
           std::to_string(num_heads));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) fail("dropout_rate outside [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"arch", arch_name(arch)},
            {"hidden_dim", hidden_dim},
            {"latent_dim", latent_dim},
            {"num_layers", num_layers},
            {"num_heads", num_heads},
            {"dropout_rate", dropout_rate},
            {"dropout_columns", dropout_columns == DropoutColumns::All ? "all" : "categorical"},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.arch = parse_arch(j.value("arch", std::string(arch_name(c.arch))));
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.dropout_columns = j.value("dropout_columns", std::string("categorical")) == "all"
                            ? DropoutColumns::All
                            : DropoutColumns::Categorical;
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

struct ForwardOptions {
  ad::DropoutMode dropout = ad::DropoutMode::Off;
  std::mt19937_64* rng = nullptr;  // required when dropout is active
};

/// Sinusoidal positional encoding over the packet axis.
inline Matrix positional_encoding(Eigen::Index rows, Eigen::Index dim) {
  Matrix pe(rows, dim);
  for (Eigen::Index pos = 0; pos < rows; ++pos) {
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) / rate;
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

namespace layers {

struct Linear {
  ad::Parameter* weight = nullptr;
  ad::Parameter* bias = nullptr;

  static Linear make(ad::ParameterStore& store, const std::string& name, std::size_t in,
                     std::size_t out, std::mt19937_64& rng) {
    Linear l;
    l.weight = &store.add(name + ".w",
                          ad::glorot_uniform(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), rng));
    l.bias = &store.add(name + ".b", Matrix::Zero(1, static_cast<Eigen::Index>(out)), false);
    return l;
  }

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    return ad::add_row(ad::matmul(x, g.param(*weight)), g.param(*bias));
  }
};

struct LayerNorm {
  ad::Parameter* gain = nullptr;
  ad::Parameter* bias = nullptr;

  static LayerNorm make(ad::ParameterStore& store, const std::string& name, std::size_t dim) {
    LayerNorm l;
    l.gain = &store.add(name + ".gain", Matrix::Ones(1, static_cast<Eigen::Index>(dim)), false);
    l.bias = &store.add(name + ".bias", Matrix::Zero(1, static_cast<Eigen::Index>(dim)), false);
    return l;
  }

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    return ad::layer_norm(x, g.param(*gain), g.param(*bias));
  }
};

/// Gates packed [r | z | n], PyTorch convention.
struct GruLayer {
  Linear input;                     // in -> 3h
  ad::Parameter* recurrent = nullptr;  // h x 3h
  ad::Parameter* recurrent_bias = nullptr;
  std::size_t hidden = 0;

  static GruLayer make(ad::ParameterStore& store, const std::string& name, std::size_t in,
                       std::size_t hidden, std::mt19937_64& rng) {
    GruLayer l;
    l.hidden = hidden;
    const auto h = static_cast<Eigen::Index>(hidden);
    l.input = Linear::make(store, name + ".x", in, 3 * hidden, rng);
    l.recurrent = &store.add(name + ".h.w", ad::glorot_uniform(h, 3 * h, rng));
    l.recurrent_bias = &store.add(name + ".h.b", Matrix::Zero(1, 3 * h), false);
    return l;
  }

  ad::Var operator()(ad::Graph& g, ad::Var x, bool reverse = false) const {
    const auto h = static_cast<Eigen::Index>(hidden);
    const Eigen::Index n = x.rows();
    ad::Var xw = input(g, x);
    ad::Var wh = g.param(*recurrent);
    ad::Var bh = g.param(*recurrent_bias);
    ad::Var state = g.constant(Matrix::Zero(1, h));
    std::vector<ad::Var> outs(static_cast<std::size_t>(n));
    for (Eigen::Index s = 0; s < n; ++s) {
      const Eigen::Index t = reverse ? n - 1 - s : s;
      ad::Var xt = ad::slice_rows(xw, t, 1);
      ad::Var ht = ad::add_row(ad::matmul(state, wh), bh);
      ad::Var r = ad::sigmoid(ad::add(ad::slice_cols(xt, 0, h), ad::slice_cols(ht, 0, h)));
      ad::Var z = ad::sigmoid(ad::add(ad::slice_cols(xt, h, h), ad::slice_cols(ht, h, h)));
      ad::Var cand = ad::tanh(ad::add(ad::slice_cols(xt, 2 * h, h), ad::mul(r, ad::slice_cols(ht, 2 * h, h))));
      // (1 - z) * cand + z * state
      state = ad::add(cand, ad::mul(z, ad::sub(state, cand)));
      outs[static_cast<std::size_t>(t)] = state;
    }
    return ad::concat_rows(outs);
  }
};

/// Gates packed [i | f | g | o].
struct LstmLayer {
  Linear input;
  ad::Parameter* recurrent = nullptr;
  std::size_t hidden = 0;

  static LstmLayer make(ad::ParameterStore& store, const std::string& name, std::size_t in,
                        std::size_t hidden, std::mt19937_64& rng) {
    LstmLayer l;
    l.hidden = hidden;
    const auto h = static_cast<Eigen::Index>(hidden);
    l.input = Linear::make(store, name + ".x", in, 4 * hidden, rng);
    l.input.bias->value.middleCols(h, h).setOnes();  // forget-gate bias
    l.recurrent = &store.add(name + ".h.w", ad::glorot_uniform(h, 4 * h, rng));
    return l;
  }

  ad::Var operator()(ad::Graph& g, ad::Var x, bool reverse = false) const {
    const auto h = static_cast<Eigen::Index>(hidden);
    const Eigen::Index n = x.rows();
    ad::Var xw = input(g, x);
    ad::Var wh = g.param(*recurrent);
    ad::Var state = g.constant(Matrix::Zero(1, h));
    ad::Var cell = g.constant(Matrix::Zero(1, h));
    std::vector<ad::Var> outs(static_cast<std::size_t>(n));
    for (Eigen::Index s = 0; s < n; ++s) {
      const Eigen::Index t = reverse ? n - 1 - s : s;
      ad::Var gates = ad::add(ad::slice_rows(xw, t, 1), ad::matmul(state, wh));
      ad::Var i = ad::sigmoid(ad::slice_cols(gates, 0, h));
      ad::Var f = ad::sigmoid(ad::slice_cols(gates, h, h));
      ad::Var c = ad::tanh(ad::slice_cols(gates, 2 * h, h));
      ad::Var o = ad::sigmoid(ad::slice_cols(gates, 3 * h, h));
      cell = ad::add(ad::mul(f, cell), ad::mul(i, c));
      state = ad::mul(o, ad::tanh(cell));
      outs[static_cast<std::size_t>(t)] = state;
    }
    return ad::concat_rows(outs);
  }
};

struct MultiHeadAttention {
  Linear query, key, value, output;
  std::size_t heads = 1;

  static MultiHeadAttention make(ad::ParameterStore& store, const std::string& name, std::size_t dim,
                                 std::size_t heads, std::mt19937_64& rng) {
    MultiHeadAttention m;
    m.heads = heads;
    m.query = Linear::make(store, name + ".q", dim, dim, rng);
    m.key = Linear::make(store, name + ".k", dim, dim, rng);
    m.value = Linear::make(store, name + ".v", dim, dim, rng);
    m.output = Linear::make(store, name + ".o", dim, dim, rng);
    return m;
  }

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    ad::Var q = query(g, x);
    ad::Var k = key(g, x);
    ad::Var v = value(g, x);
    const Eigen::Index d = x.cols() / static_cast<Eigen::Index>(heads);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<ad::Var> per_head;
    per_head.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const Eigen::Index off = static_cast<Eigen::Index>(hd) * d;
      ad::Var qh = ad::slice_cols(q, off, d);
      ad::Var kh = ad::slice_cols(k, off, d);
      ad::Var vh = ad::slice_cols(v, off, d);
      ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_d);
      per_head.push_back(ad::matmul(ad::softmax_rows(scores), vh));
    }
    return output(g, ad::concat_cols(per_head));
  }
};

/// Post-norm transformer block: LN(x + MHA(x)), then LN(x + FFN(x)).
struct TransformerBlock {
  MultiHeadAttention attention;
  LayerNorm norm1, norm2;
  Linear ff1, ff2;

  static TransformerBlock make(ad::ParameterStore& store, const std::string& name, std::size_t dim,
                               std::size_t heads, std::mt19937_64& rng) {
    TransformerBlock b;
    b.attention = MultiHeadAttention::make(store, name + ".mha", dim, heads, rng);
    b.norm1 = LayerNorm::make(store, name + ".ln1", dim);
    b.ff1 = Linear::make(store, name + ".ff1", dim, 2 * dim, rng);
    b.ff2 = Linear::make(store, name + ".ff2", 2 * dim, dim, rng);
    b.norm2 = LayerNorm::make(store, name + ".ln2", dim);
    return b;
  }

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    x = norm1(g, ad::add(x, attention(g, x)));
    return norm2(g, ad::add(x, ff2(g, ad::relu(ff1(g, x)))));
  }
};

}  // namespace layers

/// One half (encoder or decoder) of an autoencoder: in_width -> out_width per packet.
class SequenceStack {
 public:
  SequenceStack() = default;

  SequenceStack(const ModelConfig& cfg, ad::ParameterStore& store, const std::string& name,
                std::size_t in, std::size_t out, std::mt19937_64& rng)
      : arch_(cfg.arch) {
    const std::size_t h = cfg.hidden_dim;
    switch (cfg.arch) {
      case Arch::Feedforward:
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          dense_.push_back(layers::Linear::make(store, name + ".dense" + std::to_string(l), l == 0 ? in : h, h, rng));
        }
        head_ = layers::Linear::make(store, name + ".head", h, out, rng);
        break;
      case Arch::GRU:
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          gru_.push_back(layers::GruLayer::make(store, name + ".gru" + std::to_string(l), l == 0 ? in : h, h, rng));
        }
        head_ = layers::Linear::make(store, name + ".head", h, out, rng);
        break;
      case Arch::LSTM:
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          lstm_.push_back(layers::LstmLayer::make(store, name + ".lstm" + std::to_string(l), l == 0 ? in : h, h, rng));
        }
        head_ = layers::Linear::make(store, name + ".head", h, out, rng);
        break;
      case Arch::BiLSTM:
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          const std::size_t layer_in = l == 0 ? in : 2 * h;
          lstm_.push_back(layers::LstmLayer::make(store, name + ".fwd" + std::to_string(l), layer_in, h, rng));
          lstm_back_.push_back(layers::LstmLayer::make(store, name + ".bwd" + std::to_string(l), layer_in, h, rng));
        }
        head_ = layers::Linear::make(store, name + ".head", 2 * h, out, rng);
        break;
      case Arch::Attention:
        proj_ = layers::Linear::make(store, name + ".proj", in, h, rng);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          mha_.push_back(layers::MultiHeadAttention::make(store, name + ".mha" + std::to_string(l), h, cfg.num_heads, rng));
        }
        head_ = layers::Linear::make(store, name + ".head", h, out, rng);
        break;
      case Arch::Transformer:
        proj_ = layers::Linear::make(store, name + ".proj", in, h, rng);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          blocks_.push_back(layers::TransformerBlock::make(store, name + ".block" + std::to_string(l), h, cfg.num_heads, rng));
        }
        head_ = layers::Linear::make(store, name + ".head", h, out, rng);
        break;
    }
  }

  ad::Var operator()(ad::Graph& g, ad::Var x) const {
    switch (arch_) {
      case Arch::Feedforward:
        for (const auto& d : dense_) x = ad::relu(d(g, x));
        break;
      case Arch::GRU:
        for (const auto& l : gru_) x = l(g, x);
        break;
      case Arch::LSTM:
        for (const auto& l : lstm_) x = l(g, x);
        break;
      case Arch::BiLSTM:
        for (std::size_t l = 0; l < lstm_.size(); ++l) {
          x = ad::concat_cols({lstm_[l](g, x, false), lstm_back_[l](g, x, true)});
        }
        break;
      case Arch::Attention:
        x = ad::add(proj_(g, x), g.constant(positional_encoding(x.rows(), proj_.weight->value.cols())));
        for (const auto& m : mha_) x = ad::add(x, m(g, x));
        break;
      case Arch::Transformer:
        x = ad::add(proj_(g, x), g.constant(positional_encoding(x.rows(), proj_.weight->value.cols())));
        for (const auto& b : blocks_) x = b(g, x);
        break;
    }
    return head_(g, x);
  }

 private:
  Arch arch_ = Arch::Feedforward;
  std::vector<layers::Linear> dense_;
  std::vector<layers::GruLayer> gru_;
  std::vector<layers::LstmLayer> lstm_;
  std::vector<layers::LstmLayer> lstm_back_;
  std::vector<layers::MultiHeadAttention> mha_;
  std::vector<layers::TransformerBlock> blocks_;
  layers::Linear proj_;
  layers::Linear head_;
};

/// Autoencoder over one encoded session. Model input and output both use the
/// schema's decoded layout (embedded ids widened to their frozen embedding).
class SessionAutoencoder {
 public:
  SessionAutoencoder(ModelConfig config, const FeatureSchema& schema)
      : config_(std::move(config)), width_(schema.decoded_width) {
    config_.validate();
    if (width_ == 0) throw Error(Errc::ConfigInvariantViolation, "schema has zero width");
    dropout_columns_.assign(width_, config_.dropout_columns == DropoutColumns::All ? 1 : 0);
    for (const auto& f : schema.features) {
      if (is_categorical(f.tag())) {
        for (std::size_t c = 0; c < f.decoded.width; ++c) dropout_columns_[f.decoded.offset + c] = 1;
      }
    }
    std::mt19937_64 rng(config_.seed);
    encoder_ = SequenceStack(config_, params_, "enc", width_, config_.latent_dim, rng);
    decoder_ = SequenceStack(config_, params_, "dec", config_.latent_dim, width_, rng);
  }

  SessionAutoencoder(const SessionAutoencoder&) = delete;
  SessionAutoencoder& operator=(const SessionAutoencoder&) = delete;

  const ModelConfig& config() const { return config_; }
  std::size_t width() const { return width_; }
  ad::ParameterStore& parameters() { return params_; }
  const ad::ParameterStore& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.element_count(); }

  /// Model-input rows for the masked-in prefix of `enc`.
  static Matrix build_input(const EncodedSession& enc, const FeatureSchema& schema,
                            const Matrix& embedding_table) {
    return identity_outputs(enc, schema, embedding_table).topRows(static_cast<Eigen::Index>(enc.length));
  }

  /// Raw outputs (n x width) for n input rows.
  ad::Var forward(ad::Graph& g, const Matrix& input, const ForwardOptions& opts = {}) const {
    if (static_cast<std::size_t>(input.cols()) != width_) {
      throw Error(Errc::WidthMismatch, "input has " + std::to_string(input.cols()) +
                                           " columns, model expects " + std::to_string(width_));
    }
    if (input.rows() == 0) throw Error(Errc::EmptyMask, "no masked-in rows");
    ad::Var x = g.constant(input);
    if (opts.dropout != ad::DropoutMode::Off && config_.dropout_rate > 0.0) {
      if (opts.rng == nullptr) throw Error(Errc::ConfigInvalid, "dropout requires an rng");
      x = ad::dropout(x, config_.dropout_rate, *opts.rng, opts.dropout, dropout_columns_);
    }
    return decoder_(g, encoder_(g, x));
  }

  ad::Var forward(ad::Graph& g, const EncodedSession& enc, const FeatureSchema& schema,
                  const Matrix& embedding_table, const ForwardOptions& opts = {}) const {
    return forward(g, build_input(enc, schema, embedding_table), opts);
  }

  /// max_len x width outputs with zero rows beyond the session length.
  Matrix infer(const EncodedSession& enc, const FeatureSchema& schema, const Matrix& embedding_table,
               const ForwardOptions& opts = {}) const {
    ad::Graph g;
    ad::Var out = forward(g, enc, schema, embedding_table, opts);
    Matrix full = Matrix::Zero(enc.values.rows(), static_cast<Eigen::Index>(width_));
    full.topRows(out.rows()) = out.value();
    return full;
  }

 private:
  ModelConfig config_;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> dropout_columns_;
  ad::ParameterStore params_;
  SequenceStack encoder_;
  SequenceStack decoder_;
};

// ---------------------------------------------------------------------------
// Port embedder

struct PortEmbedderOptions {
  std::size_t epochs = 500;
  double lr = 1e-2;
  double target_accuracy = 0.99;
  std::size_t embed_dim = kDefaultEmbedDim;
  std::uint64_t seed = 1;
};

struct PortEmbedder {
  Matrix table;  // vocabulary x embed_dim, frozen after pre-training
  Matrix head_weight;
  RowVector head_bias;
  std::size_t epochs_run = 0;
  double argmax_accuracy = 0.0;
  double final_loss = 0.0;

  std::size_t vocabulary_size() const { return static_cast<std::size_t>(table.rows()); }

  /// Share of ids whose head logits peak at the id itself.
  double compute_argmax_accuracy() const {
    if (table.rows() == 0) return 0.0;
    Matrix logits = (table * head_weight).rowwise() + head_bias;
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      hits += best == i;
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows());
  }

  /// Share of ids whose embedding's nearest table row is the id itself.
  double nearest_neighbor_accuracy() const {
    if (table.rows() == 0) return 0.0;
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < table.rows(); ++i) {
      Eigen::Index best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < table.rows(); ++j) {
        const double d = (table.row(j) - table.row(i)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      hits += best == i;
    }
    return static_cast<double>(hits) / static_cast<double>(table.rows());
  }
};

/// Trains id -> embedding -> logits with categorical cross-entropy on the full
/// vocabulary each epoch, stopping once argmax accuracy reaches the target.
inline PortEmbedder pretrain_port_embedder(std::size_t vocabulary_size, const PortEmbedderOptions& opts = {}) {
  if (vocabulary_size == 0) throw Error(Errc::EmptyVocabulary, "empty port vocabulary");
  std::mt19937_64 rng(opts.seed);
  const auto v = static_cast<Eigen::Index>(vocabulary_size);
  const auto d = static_cast<Eigen::Index>(opts.embed_dim);
  ad::ParameterStore store;
  ad::Parameter& table = store.add("table", ad::normal_matrix(v, d, 1.0, rng), false);
  ad::Parameter& w = store.add("head.w", ad::glorot_uniform(d, v, rng));
  ad::Parameter& b = store.add("head.b", Matrix::Zero(1, v), false);
  std::vector<int> ids(vocabulary_size);
  for (std::size_t i = 0; i < vocabulary_size; ++i) ids[i] = static_cast<int>(i);
  Matrix onehot = Matrix::Identity(v, v);

  PortEmbedder out;
  auto snapshot = [&] {
    out.table = table.value;
    out.head_weight = w.value;
    out.head_bias = b.value.row(0);
    out.argmax_accuracy = out.compute_argmax_accuracy();
  };
  snapshot();
  const ad::AdamConfig adam{opts.lr, 0.0};
  while (out.argmax_accuracy < opts.target_accuracy && out.epochs_run < opts.epochs) {
    store.zero_grad();
    ad::Graph g;
    ad::Var logits = ad::add_row(ad::matmul(ad::gather_rows(g.param(table), ids), g.param(w)), g.param(b));
    ad::Var loss = ad::scale(ad::sum_all(ad::mul(ad::log_softmax_rows(logits), g.constant(onehot))),
                             -1.0 / static_cast<double>(v));
    g.backward(loss);
    ad::adam_step(store, adam);
    out.final_loss = loss.scalar();
    ++out.epochs_run;
    snapshot();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint bundle

/// Everything needed to run a trained model on new captures.
struct ModelBundle {
  ModelConfig config;
  FeatureSchema schema;
  Matrix embedding_table;  // empty in MSE-only mode
  nlohmann::json parameters;
  std::size_t max_len = kDefaultMaxLen;

  nlohmann::json to_json() const {
    return {{"format", "kalrecon-model"},
            {"version", 1},
            {"config", config.to_json()},
            {"schema", schema.to_json()},
            {"schema_hash", schema.hash()},
            {"max_len", max_len},
            {"embedding_table",
             {{"rows", embedding_table.rows()},
              {"cols", embedding_table.cols()},
              {"values", std::vector<double>(embedding_table.data(),
                                             embedding_table.data() + embedding_table.size())}}},
            {"parameters", parameters}};
  }

  static ModelBundle from_json(const nlohmann::json& j) {
    try {
      if (j.at("format") != "kalrecon-model" || j.at("version").get<int>() != 1) {
        throw Error(Errc::CheckpointMismatch, "unsupported model checkpoint");
      }
      ModelBundle b;
      b.config = ModelConfig::from_json(j.at("config"));
      b.schema = FeatureSchema::from_json(j.at("schema"));
      if (j.at("schema_hash").get<std::uint64_t>() != b.schema.hash()) {
        throw Error(Errc::CheckpointMismatch, "schema hash does not match embedded schema");
      }
      b.max_len = j.value("max_len", kDefaultMaxLen);
      const auto& t = j.at("embedding_table");
      const auto values = t.at("values").get<std::vector<double>>();
      b.embedding_table = Eigen::Map<const Matrix>(values.data(), t.at("rows").get<Eigen::Index>(),
                                                   t.at("cols").get<Eigen::Index>());
      b.parameters = j.at("parameters");
      return b;
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::CheckpointMismatch, e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
    out << to_json().dump() << '\n';
  }

  static ModelBundle load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

  /// Instantiates the model and loads the stored weights.
  std::unique_ptr<SessionAutoencoder> instantiate() const {
    auto model = std::make_unique<SessionAutoencoder>(config, schema);
    model->parameters().load_json(parameters);
    return model;
  }
};

}  // namespace kalrecon
