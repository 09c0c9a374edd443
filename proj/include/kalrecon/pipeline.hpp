#pragma once

// Training and the end-to-end commands built on it: train, compare models,
// loss ablation, dropout experiment and reconstruction.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "kalrecon/autodiff.hpp"
#include "kalrecon/constraints.hpp"
#include "kalrecon/features.hpp"
#include "kalrecon/kal_loss.hpp"
#include "kalrecon/metrics.hpp"
#include "kalrecon/models.hpp"
#include "kalrecon/pcap_io.hpp"
#include "kalrecon/report.hpp"
#include "kalrecon/session.hpp"
#include "kalrecon/synth.hpp"

namespace kalrecon {

inline constexpr const char* kLibraryVersion = "1.0.0";

inline std::size_t default_batch_size(Arch a) { return is_attention(a) ? 16 : 64; }

struct TrainConfig {
  ModelConfig model;
  SchemaMode mode = SchemaMode::Kal;
  double train_fraction = 0.8;
  ad::AdamConfig adam;
  std::size_t patience = 100;
  std::size_t max_epochs = 500;
  std::size_t batch_size = 0;  // 0 picks the per-architecture default
  std::uint64_t split_seed = 1;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t embed_dim = kDefaultEmbedDim;
  std::size_t embedder_epochs = 2000;
  ad::DropoutMode train_dropout = ad::DropoutMode::Train;
  ad::DropoutMode eval_dropout = ad::DropoutMode::Off;
  bool verbose = false;

  std::size_t effective_batch_size() const { return batch_size ? batch_size : default_batch_size(model.arch); }

  void validate() const {
    model.validate();
    auto fail = [](const std::string& why) { throw Error(Errc::ConfigInvalid, why); };
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail("train_fraction must lie in (0, 1)");
    if (patience < 1) fail("patience must be at least 1");
    if (max_epochs < 1) fail("max_epochs must be at least 1");
    if (max_len < 1) fail("max_len must be at least 1");
    if (!(adam.lr > 0.0) || adam.weight_decay < 0.0) fail("bad optimizer settings");
  }
};

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best validation loss; stops after `patience` epochs without a
/// strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw Error(Errc::ConfigInvalid, "patience must be at least 1");
  }

  /// Returns true when `loss` is a new best.
  bool update(std::size_t epoch, double loss) {
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
};

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedSession {
  EncodedSession enc;
  Matrix input;   // masked-in rows, decoded layout
  Matrix target;  // same as input: the model reconstructs what it sees
};

struct Dataset {
  SessionSplit split;
  FeatureSchema schema;
  PortEmbedder embedder;  // empty table in MSE-only mode
  std::vector<PreparedSession> train;
  std::vector<PreparedSession> validation;

  const Matrix& embedding() const { return embedder.table; }
};

inline std::vector<PreparedSession> prepare_sessions(std::span<const Session> sessions, const FeatureSchema& schema,
                                                     const Matrix& table, std::size_t max_len) {
  std::vector<PreparedSession> out;
  out.reserve(sessions.size());
  for (const auto& s : sessions) {
    PreparedSession p;
    p.enc = encode_session(s, schema, max_len);
    p.input = SessionAutoencoder::build_input(p.enc, schema, table);
    p.target = p.input;
    out.push_back(std::move(p));
  }
  return out;
}

/// Splits, fits the schema on the training side, pre-trains the port
/// embedding and encodes both sides.
inline Dataset prepare_dataset(std::span<const Session> sessions, const TrainConfig& cfg) {
  Dataset d;
  d.split = split_sessions(sessions, cfg.train_fraction, cfg.split_seed);
  d.schema = fit_schema(d.split.train, cfg.mode, cfg.embed_dim);
  const auto vocab = d.schema.port_vocabulary();
  if (!vocab.empty()) {
    PortEmbedderOptions eo;
    eo.epochs = cfg.embedder_epochs;
    eo.embed_dim = d.schema.embed_dim();
    eo.seed = cfg.split_seed;
    d.embedder = pretrain_port_embedder(vocab.size(), eo);
  } else {
    d.embedder.table = Matrix(0, 0);
  }
  d.train = prepare_sessions(d.split.train, d.schema, d.embedder.table, cfg.max_len);
  d.validation = prepare_sessions(d.split.validation, d.schema, d.embedder.table, cfg.max_len);
  return d;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  LossReport train;
  LossReport validation;
};

struct TrainResult {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::unique_ptr<SessionAutoencoder> model;  // restored to the best epoch
  double seconds = 0.0;

  ModelBundle bundle(const TrainConfig& cfg, const Dataset& d) const {
    ModelBundle b;
    b.config = model->config();
    b.schema = d.schema;
    b.embedding_table = d.embedding();
    b.parameters = model->parameters().to_json();
    b.max_len = cfg.max_len;
    return b;
  }
};

/// Loss over `sessions` with no parameter update. Missingness dropout, when
/// configured, draws from a generator reseeded on every call so the number
/// is reproducible.
inline LossReport evaluate_loss(const SessionAutoencoder& model, const std::vector<PreparedSession>& sessions,
                                const FeatureSchema& schema, ad::DropoutMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LossAccumulator acc;
  for (const auto& s : sessions) {
    ad::Graph g;
    ad::Var out = model.forward(g, s.input, {mode, &rng});
    acc.add(compute_loss(g, out, s.target, schema).report(schema));
  }
  return acc.mean();
}

inline std::uint64_t eval_seed(const TrainConfig& cfg) { return cfg.model.seed ^ 0x5eed5eed5eedull; }

inline TrainResult train_model(const Dataset& data, const TrainConfig& cfg,
                               const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw Error(Errc::EmptyTrainingSet, "no training sessions");
  if (data.validation.empty()) throw Error(Errc::TooFewSessions, "no validation sessions");
  const auto started = std::chrono::steady_clock::now();
  TrainResult result;
  result.model = std::make_unique<SessionAutoencoder>(cfg.model, data.schema);
  SessionAutoencoder& model = *result.model;
  std::mt19937_64 rng(cfg.model.seed * 0x9e3779b97f4a7c15ull + 1);
  EarlyStopping stopper(cfg.patience);
  nlohmann::json best_params = model.parameters().to_json();
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = cfg.effective_batch_size();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    LossAccumulator train_acc;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      std::size_t packets = 0;
      for (std::size_t i = start; i < stop; ++i) packets += data.train[order[i]].enc.length;
      model.parameters().zero_grad();
      ad::Graph g;
      std::vector<ad::Var> weighted;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& s = data.train[order[i]];
        ad::Var out = model.forward(g, s.input, {cfg.train_dropout, &rng});
        const GraphLoss loss = compute_loss(g, out, s.target, data.schema);
        train_acc.add(loss.report(data.schema));
        weighted.push_back(ad::scale(loss.total, static_cast<double>(s.enc.length) / static_cast<double>(packets)));
      }
      g.backward(ad::sum_all(ad::concat_cols(weighted)));
      ad::adam_step(model.parameters(), cfg.adam);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train = train_acc.mean();
    log.validation = evaluate_loss(model, data.validation, data.schema, cfg.eval_dropout, eval_seed(cfg));
    result.history.push_back(log);
    if (stopper.update(epoch, log.validation.total)) best_params = model.parameters().to_json();
    if (cfg.verbose) {
      std::cerr << arch_name(cfg.model.arch) << " epoch " << epoch << " train " << log.train.total << " val "
                << log.validation.total << '\n';
    }
    if (on_epoch) on_epoch(log);
    if (stopper.should_stop()) break;
  }
  model.parameters().load_json(best_params);
  result.best_epoch = stopper.best_epoch();
  result.best_validation = stopper.best();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

inline Predictor model_predictor(const SessionAutoencoder& model, const FeatureSchema& schema, const Matrix& table,
                                 ad::DropoutMode mode = ad::DropoutMode::Off, std::uint64_t seed = 0) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [&model, &schema, &table, mode, rng](const EncodedSession& enc) {
    return model.infer(enc, schema, table, {mode, rng.get()});
  };
}

// ---------------------------------------------------------------------------
// CSV helpers

inline void write_loss_csv(const std::vector<EpochLog>& history, const std::filesystem::path& path) {
  if (history.empty()) throw Error(Errc::EmptyInput, "no epochs to write");
  auto out = open_for_write(path);
  out << "epoch,split,total";
  for (const auto& f : history.front().train.per_feature) out << ',' << feature_name(f.id);
  out << '\n';
  for (const auto& e : history) {
    for (const auto* r : {&e.train, &e.validation}) {
      out << e.epoch << ',' << (r == &e.train ? "train" : "validation") << ',' << format_number(r->total);
      for (const auto& f : r->per_feature) out << ',' << format_number(f.value);
      out << '\n';
    }
  }
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

inline Series curve(const std::vector<EpochLog>& history, bool validation, const std::string& label) {
  Series s;
  s.label = label;
  for (const auto& e : history) {
    s.x.push_back(static_cast<double>(e.epoch));
    s.y.push_back(validation ? e.validation.total : e.train.total);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::filesystem::path input;       // pcap
  std::filesystem::path output_dir = "run";
  TrainConfig train;
  std::vector<Arch> archs = {Arch::GRU, Arch::LSTM, Arch::BiLSTM, Arch::Attention, Arch::Transformer};
  std::vector<double> dropout_rates = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t dropout_max_epochs = 0;  // 0 reuses train.max_epochs
  GeneratorConfig generator;

  void validate() const {
    train.validate();
    for (double r : dropout_rates) {
      if (!(r >= 0.0 && r <= 1.0)) throw Error(Errc::ConfigInvalid, "dropout rates must lie in [0, 1]");
    }
    if (seeds.empty()) throw Error(Errc::ConfigInvalid, "at least one seed is required");
    if (archs.empty()) throw Error(Errc::ConfigInvalid, "at least one architecture is required");
  }

  nlohmann::json to_json() const {
    nlohmann::json archs_j = nlohmann::json::array();
    for (Arch a : archs) archs_j.push_back(arch_name(a));
    return {{"input", input.string()},
            {"output_dir", output_dir.string()},
            {"mode", mode_name(train.mode)},
            {"model", train.model.to_json()},
            {"train_fraction", train.train_fraction},
            {"lr", train.adam.lr},
            {"weight_decay", train.adam.weight_decay},
            {"patience", train.patience},
            {"max_epochs", train.max_epochs},
            {"batch_size", train.batch_size},
            {"split_seed", train.split_seed},
            {"max_len", train.max_len},
            {"embedder_epochs", train.embedder_epochs},
            {"archs", archs_j},
            {"dropout_rates", dropout_rates},
            {"seeds", seeds},
            {"dropout_max_epochs", dropout_max_epochs},
            {"generator", generator.to_json()}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
      c.input = j.value("input", std::string());
      c.output_dir = j.value("output_dir", c.output_dir.string());
      c.train.mode = parse_mode(j.value("mode", std::string(mode_name(c.train.mode))));
      if (j.contains("model")) c.train.model = ModelConfig::from_json(j.at("model"));
      c.train.train_fraction = j.value("train_fraction", c.train.train_fraction);
      c.train.adam.lr = j.value("lr", c.train.adam.lr);
      c.train.adam.weight_decay = j.value("weight_decay", c.train.adam.weight_decay);
      c.train.patience = j.value("patience", c.train.patience);
      c.train.max_epochs = j.value("max_epochs", c.train.max_epochs);
      c.train.batch_size = j.value("batch_size", c.train.batch_size);
      c.train.split_seed = j.value("split_seed", c.train.split_seed);
      c.train.max_len = j.value("max_len", c.train.max_len);
      c.train.embedder_epochs = j.value("embedder_epochs", c.train.embedder_epochs);
      if (j.contains("archs")) {
        c.archs.clear();
        for (const auto& a : j.at("archs")) c.archs.push_back(parse_arch(a.get<std::string>()));
      }
      c.dropout_rates = j.value("dropout_rates", c.dropout_rates);
      c.seeds = j.value("seeds", c.seeds);
      c.dropout_max_epochs = j.value("dropout_max_epochs", c.dropout_max_epochs);
      if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ConfigInvalid, e.what());
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::ConfigInvalid, e.what());
    }
  }
};

inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                           const nlohmann::json& extra = nlohmann::json::object()) {
  const nlohmann::json config = cfg.to_json();
  nlohmann::json m = {{"command", command},
                      {"config", config},
                      {"config_hash", fnv1a(config.dump())},
                      {"seeds", {{"model", cfg.train.model.seed}, {"split", cfg.train.split_seed}, {"runs", cfg.seeds}}},
                      {"versions",
                       {{"kalrecon", kLibraryVersion},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                      "." + std::to_string(EIGEN_MINOR_VERSION)},
                        {"compiler", __VERSION__}}}};
  m.update(extra);
  auto out = open_for_write(dir / "manifest.json");
  out << m.dump(2) << '\n';
}

inline std::vector<Session> load_sessions(const std::filesystem::path& pcap) {
  const auto read = read_pcap(pcap);
  return group_sessions(read.packets);
}

// ---------------------------------------------------------------------------
// Commands

struct TrainSummary {
  double best_validation = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  MetricsTable validation_metrics;
};

inline TrainSummary cmd_train(const RunConfig& cfg, const std::vector<Session>& sessions) {
  cfg.validate();
  const auto& dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  const Dataset data = prepare_dataset(sessions, cfg.train);
  save_schema(data.schema, dir / "schema.json");
  const TrainResult r = train_model(data, cfg.train);
  r.bundle(cfg.train, data).save(dir / "model.json");
  write_loss_csv(r.history, dir / "losses.csv");
  write_svg({curve(r.history, false, "train"), curve(r.history, true, "validation")},
            {std::string(arch_name(cfg.train.model.arch)) + " loss", "epoch", "loss", true}, dir / "losses.svg");
  const ConstraintSpec spec = ConstraintSpec::defaults();
  EvaluateOptions eo;
  eo.max_len = cfg.train.max_len;
  eo.spec = &spec;
  TrainSummary out;
  out.validation_metrics = evaluate(model_predictor(*r.model, data.schema, data.embedding(), cfg.train.eval_dropout,
                                                    eval_seed(cfg.train)),
                                    data.split.validation, data.schema, data.embedding(), eo);
  write_metrics_csv(out.validation_metrics, dir / "metrics_validation.csv");
  out.best_validation = r.best_validation;
  out.best_epoch = r.best_epoch;
  out.epochs_run = r.history.size();
  write_manifest(dir, "train", cfg,
                 {{"best_epoch", r.best_epoch},
                  {"best_validation_loss", r.best_validation},
                  {"epochs_run", r.history.size()},
                  {"parameter_count", r.model->parameter_count()},
                  {"embedder_accuracy", data.embedder.argmax_accuracy}});
  return out;
}

inline void cmd_evaluate(const std::filesystem::path& checkpoint, const std::vector<Session>& sessions,
                         const std::filesystem::path& out_csv, MetricsTable* result = nullptr) {
  const ModelBundle bundle = ModelBundle::load(checkpoint);
  const auto model = bundle.instantiate();
  const ConstraintSpec spec = ConstraintSpec::defaults();
  EvaluateOptions eo;
  eo.max_len = bundle.max_len;
  eo.spec = &spec;
  const MetricsTable t = evaluate(model_predictor(*model, bundle.schema, bundle.embedding_table), sessions,
                                  bundle.schema, bundle.embedding_table, eo);
  write_metrics_csv(t, out_csv);
  if (result) *result = t;
}

struct ComparisonRun {
  Arch arch{};
  TrainResult result;
};

inline std::vector<ComparisonRun> cmd_compare_models(const RunConfig& cfg, const std::vector<Session>& sessions) {
  cfg.validate();
  const Dataset data = prepare_dataset(sessions, cfg.train);
  std::vector<ComparisonRun> runs;
  std::vector<Series> series;
  for (Arch a : cfg.archs) {
    TrainConfig tc = cfg.train;
    tc.model.arch = a;
    runs.push_back({a, train_model(data, tc)});
    series.push_back(curve(runs.back().result.history, false, std::string(arch_name(a)) + " train"));
    series.push_back(curve(runs.back().result.history, true, std::string(arch_name(a)) + " validation"));
  }
  write_series_csv(series, "epoch", "loss", cfg.output_dir / "compare_models.csv");
  write_svg(series, {"Training and validation loss", "epoch", "loss", true}, cfg.output_dir / "compare_models.svg");
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : runs) {
    summary.push_back({{"arch", arch_name(r.arch)},
                       {"best_epoch", r.result.best_epoch},
                       {"best_validation_loss", r.result.best_validation},
                       {"epochs_run", r.result.history.size()},
                       {"parameter_count", r.result.model->parameter_count()}});
  }
  write_manifest(cfg.output_dir, "compare-models", cfg, {{"runs", summary}});
  return runs;
}

struct AblationResult {
  MetricsTable mse_only;
  MetricsTable kal;
  std::vector<EpochLog> mse_only_history;
  std::vector<EpochLog> kal_history;
};

/// Trains the same architecture twice on one session split: MSE everywhere
/// versus the mixed objective.
inline AblationResult cmd_loss_ablation(const RunConfig& cfg, const std::vector<Session>& sessions) {
  cfg.validate();
  AblationResult out;
  const ConstraintSpec spec = ConstraintSpec::defaults();
  for (SchemaMode mode : {SchemaMode::MseOnly, SchemaMode::Kal}) {
    TrainConfig tc = cfg.train;
    tc.mode = mode;
    const Dataset data = prepare_dataset(sessions, tc);
    TrainResult r = train_model(data, tc);
    EvaluateOptions eo;
    eo.max_len = tc.max_len;
    eo.spec = &spec;
    MetricsTable t = evaluate(model_predictor(*r.model, data.schema, data.embedding()), data.split.validation,
                              data.schema, data.embedding(), eo);
    const std::string tag(mode_name(mode));
    write_metrics_csv(t, cfg.output_dir / ("metrics_" + tag + ".csv"));
    write_loss_csv(r.history, cfg.output_dir / ("losses_" + tag + ".csv"));
    (mode == SchemaMode::Kal ? out.kal : out.mse_only) = std::move(t);
    (mode == SchemaMode::Kal ? out.kal_history : out.mse_only_history) = r.history;
  }
  write_svg({curve(out.mse_only_history, true, "MSE only"), curve(out.kal_history, true, "MSE + CE")},
            {"Validation loss by objective", "epoch", "loss", true}, cfg.output_dir / "mse_vs_mse_ce.svg");
  write_manifest(cfg.output_dir, "loss-ablation", cfg,
                 {{"mse_only_mean_recon_error", out.mse_only.mean_recon_error()},
                  {"kal_mean_recon_error", out.kal.mean_recon_error()}});
  return out;
}

struct DropoutPoint {
  Arch arch{};
  double rate = 0.0;
  std::uint64_t seed = 0;
  double categorical_loss = 0.0;
};

struct DropoutExperimentResult {
  std::vector<DropoutPoint> points;

  /// Median categorical loss over seeds for one (arch, rate).
  double median(Arch a, double rate) const {
    std::vector<double> v;
    for (const auto& p : points) {
      if (p.arch == a && p.rate == rate) v.push_back(p.categorical_loss);
    }
    if (v.empty()) throw Error(Errc::EmptyInput, "no runs for this arch and rate");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  }
};

/// Categorical reconstruction loss of one model trained and evaluated with
/// categorical inputs zeroed at `rate`.
inline double dropout_run(const Dataset& data, const TrainConfig& base, Arch arch, double rate, std::uint64_t seed) {
  TrainConfig tc = base;
  tc.model.arch = arch;
  tc.model.seed = seed;
  tc.model.dropout_rate = rate;
  tc.model.dropout_columns = DropoutColumns::Categorical;
  tc.train_dropout = ad::DropoutMode::Missingness;
  tc.eval_dropout = ad::DropoutMode::Missingness;
  tc.batch_size = 0;
  const TrainResult r = train_model(data, tc);
  return evaluate_loss(*r.model, data.validation, data.schema, ad::DropoutMode::Missingness, eval_seed(tc))
      .categorical_mean();
}

inline DropoutExperimentResult cmd_dropout_experiment(const RunConfig& cfg, const std::vector<Session>& sessions) {
  cfg.validate();
  TrainConfig base = cfg.train;
  base.mode = SchemaMode::Kal;
  if (cfg.dropout_max_epochs) base.max_epochs = cfg.dropout_max_epochs;
  const Dataset data = prepare_dataset(sessions, base);
  DropoutExperimentResult out;
  for (Arch arch : {Arch::Feedforward, Arch::Transformer}) {
    for (double rate : cfg.dropout_rates) {
      for (std::uint64_t seed : cfg.seeds) {
        out.points.push_back({arch, rate, seed, dropout_run(data, base, arch, rate, seed)});
        if (cfg.train.verbose) {
          std::cerr << arch_name(arch) << " rate " << rate << " seed " << seed << " loss "
                    << out.points.back().categorical_loss << '\n';
        }
      }
    }
  }
  std::vector<Series> series;
  for (Arch arch : {Arch::Feedforward, Arch::Transformer}) {
    Series s;
    s.label = arch == Arch::Feedforward ? "packet-level (feedforward)" : "session-level (transformer)";
    for (double rate : cfg.dropout_rates) {
      s.x.push_back(rate);
      s.y.push_back(out.median(arch, rate));
    }
    series.push_back(s);
  }
  {
    auto csv = open_for_write(cfg.output_dir / "dropout_runs.csv");
    csv << "arch,rate,seed,categorical_loss\n";
    for (const auto& p : out.points) {
      csv << arch_name(p.arch) << ',' << format_number(p.rate) << ',' << p.seed << ','
          << format_number(p.categorical_loss) << '\n';
    }
  }
  write_series_csv(series, "rate", "median_categorical_loss", cfg.output_dir / "dropout_medians.csv");
  write_svg(series, {"Categorical reconstruction loss under input dropout", "dropout rate", "loss", false},
            cfg.output_dir / "dropout.svg");
  write_manifest(cfg.output_dir, "dropout-experiment", cfg);
  return out;
}

struct ReconstructSummary {
  std::size_t sessions = 0;
  std::size_t packets = 0;
  std::size_t repairs = 0;
  std::size_t report_only = 0;
  std::size_t repairable_after = 0;  // must be zero
};

/// Sessions longer than max_len are cut into consecutive chunks, each
/// reconstructed as if it were a session of its own.
inline std::vector<Session> chunk_session(const Session& s, std::size_t max_len) {
  if (s.packets.size() <= max_len) return {s};
  std::vector<Session> out;
  for (std::size_t start = 0; start < s.packets.size(); start += max_len) {
    Session c;
    c.key = s.key;
    c.initiator = s.initiator;
    const std::size_t stop = std::min(s.packets.size(), start + max_len);
    const double t0 = s.packets[start].time_since;
    for (std::size_t i = start; i < stop; ++i) {
      SessionPacket sp = s.packets[i];
      sp.time_since = std::max(0.0, std::round((sp.time_since - t0) * 1e6) / 1e6);
      c.packets.push_back(sp);
      c.capture_index.push_back(s.capture_index[i]);
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// ingest -> encode -> forward -> decode -> enforce -> emit.
inline ReconstructSummary cmd_reconstruct(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                                          const std::filesystem::path& output,
                                          const std::filesystem::path& violations_csv = {}) {
  const ModelBundle bundle = ModelBundle::load(checkpoint);
  const auto model = bundle.instantiate();
  const auto read = read_pcap(input);
  const auto sessions = group_sessions(read.packets);
  const ConstraintSpec spec = ConstraintSpec::defaults();
  std::vector<ParsedPacket> emitted(read.packets.size());
  std::vector<SessionViolation> log;
  ReconstructSummary summary;
  summary.sessions = sessions.size();
  for (std::size_t si = 0; si < sessions.size(); ++si) {
    for (const Session& part : chunk_session(sessions[si], bundle.max_len)) {
      const EncodedSession enc = encode_session(part, bundle.schema, bundle.max_len);
      const Matrix raw = model->infer(enc, bundle.schema, bundle.embedding_table);
      auto decoded = decode_outputs(to_decoder_space(raw, bundle.schema), bundle.schema, bundle.embedding_table,
                                    enc.context, enc.length);
      EnforceResult fixed = enforce(std::move(decoded), spec);
      // time_since may have moved; keep the wire timestamps in step with it.
      sync_timestamps(fixed.session, enc.context);
      for (const auto& v : fixed.violations) {
        (spec.is_repairable(v.rule) ? summary.repairs : summary.report_only) += 1;
        log.push_back({si, v});
      }
      summary.repairable_after += count_repairable(validate(fixed.session, spec), spec);
      for (std::size_t i = 0; i < fixed.session.size(); ++i) {
        emitted[part.capture_index[i]] = fixed.session[i].packet;
      }
    }
  }
  recompute_tcp_checksums(emitted);
  if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
  write_pcap(emitted, output);
  summary.packets = emitted.size();
  if (!violations_csv.empty()) write_violations_csv(log, violations_csv);
  return summary;
}

}  // namespace kalrecon
