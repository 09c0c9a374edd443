// kalrecon: synthetic capture generation, training, evaluation and
// constraint-enforced reconstruction of TCP sessions.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "kalrecon/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kalrecon;

namespace {

struct Overrides {
  std::string config;
  std::string input;
  std::string output_dir;
  std::string mode;
  std::string arch;
  std::vector<std::string> archs;
  std::vector<double> rates;
  std::vector<std::uint64_t> seeds;
  long long max_epochs = -1;
  long long dropout_max_epochs = -1;
  long long patience = -1;
  long long batch_size = -1;
  long long seed = -1;
  long long split_seed = -1;
  double lr = -1.0;
  bool verbose = false;
};

void add_run_options(CLI::App* cmd, Overrides& o, bool needs_input = true) {
  cmd->add_option("-c,--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  auto* in = cmd->add_option("-i,--input", o.input, "input pcap");
  if (needs_input) in->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", o.output_dir, "run directory");
  cmd->add_option("--mode", o.mode, "schema mode: kal | mse_only");
  cmd->add_option("--arch", o.arch, "feedforward | gru | lstm | bilstm | attention | transformer");
  cmd->add_option("--max-epochs", o.max_epochs);
  cmd->add_option("--patience", o.patience);
  cmd->add_option("--batch-size", o.batch_size, "0 picks the per-architecture default");
  cmd->add_option("--seed", o.seed, "model seed");
  cmd->add_option("--split-seed", o.split_seed);
  cmd->add_option("--lr", o.lr);
  cmd->add_flag("-v,--verbose", o.verbose, "log every epoch to stderr");
}

RunConfig resolve(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (!o.input.empty()) cfg.input = o.input;
  if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
  if (!o.mode.empty()) cfg.train.mode = parse_mode(o.mode);
  if (!o.arch.empty()) cfg.train.model.arch = parse_arch(o.arch);
  if (!o.archs.empty()) {
    cfg.archs.clear();
    for (const auto& a : o.archs) cfg.archs.push_back(parse_arch(a));
  }
  if (!o.rates.empty()) cfg.dropout_rates = o.rates;
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.max_epochs >= 0) cfg.train.max_epochs = static_cast<std::size_t>(o.max_epochs);
  if (o.dropout_max_epochs >= 0) cfg.dropout_max_epochs = static_cast<std::size_t>(o.dropout_max_epochs);
  if (o.patience >= 0) cfg.train.patience = static_cast<std::size_t>(o.patience);
  if (o.batch_size >= 0) cfg.train.batch_size = static_cast<std::size_t>(o.batch_size);
  if (o.seed >= 0) cfg.train.model.seed = static_cast<std::uint64_t>(o.seed);
  if (o.split_seed >= 0) cfg.train.split_seed = static_cast<std::uint64_t>(o.split_seed);
  if (o.lr > 0) cfg.train.adam.lr = o.lr;
  cfg.train.verbose = o.verbose;
  cfg.validate();
  if (cfg.input.empty()) throw Error(Errc::ConfigInvalid, "no input pcap given");
  return cfg;
}

void print_metrics(const MetricsTable& t) {
  std::printf("%-14s %-9s %12s %14s %10s\n", "feature", "kind", "loss", "scaled_mse", "recon_err");
  for (const auto& f : t.features) {
    std::printf("%-14s %-9s %12.6g %14s %10.4f\n", std::string(feature_name(f.id)).c_str(),
                std::string(kind_name(f.kind)).c_str(), f.loss,
                f.scaled_mse ? format_number(*f.scaled_mse).c_str() : "N/A", f.recon_error);
  }
}

/// Removes a run directory this invocation created if the command fails.
class OutputGuard {
 public:
  explicit OutputGuard(fs::path dir) : dir_(std::move(dir)), created_(!dir_.empty() && !fs::exists(dir_)) {}
  ~OutputGuard() {
    if (!committed_ && created_) {
      std::error_code ec;
      fs::remove_all(dir_, ec);
    }
  }
  void commit() { committed_ = true; }

 private:
  fs::path dir_;
  bool created_;
  bool committed_ = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Session-level TCP header reconstruction with knowledge-augmented loss"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kLibraryVersion);

  // synth
  std::string synth_config, synth_out = "synthetic.pcap";
  long long synth_seed = -1, synth_sessions = -1;
  auto* synth = app.add_subcommand("synth", "write a synthetic capture");
  synth->add_option("-c,--config", synth_config, "JSON generator configuration")->check(CLI::ExistingFile);
  synth->add_option("-o,--out", synth_out, "output pcap");
  synth->add_option("--seed", synth_seed);
  synth->add_option("--sessions", synth_sessions);

  // ingest
  std::string ingest_in, ingest_dump;
  auto* ingest = app.add_subcommand("ingest", "parse a capture and summarize its sessions");
  ingest->add_option("input", ingest_in, "pcap")->required()->check(CLI::ExistingFile);
  ingest->add_option("--dump", ingest_dump, "write one JSON line per packet");

  // fit-schema
  Overrides fit_o;
  std::string schema_out = "schema.json";
  auto* fit = app.add_subcommand("fit-schema", "fit the feature schema on the training split");
  add_run_options(fit, fit_o);
  fit->add_option("--schema-out", schema_out);

  Overrides train_o, compare_o, ablation_o, dropout_o;
  auto* train = app.add_subcommand("train", "train one autoencoder");
  add_run_options(train, train_o);
  auto* compare = app.add_subcommand("compare-models", "train several architectures on one split");
  add_run_options(compare, compare_o);
  compare->add_option("--archs", compare_o.archs);
  auto* ablation = app.add_subcommand("loss-ablation", "MSE-only versus mixed-objective training");
  add_run_options(ablation, ablation_o);
  auto* dropout = app.add_subcommand("dropout-experiment", "packet- vs session-level robustness to missing fields");
  add_run_options(dropout, dropout_o);
  dropout->add_option("--rates", dropout_o.rates);
  dropout->add_option("--seeds", dropout_o.seeds);
  dropout->add_option("--dropout-max-epochs", dropout_o.dropout_max_epochs);

  // evaluate
  std::string eval_ckpt, eval_in, eval_out = "metrics.csv";
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint on a capture");
  evaluate_cmd->add_option("-m,--model", eval_ckpt)->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("-i,--input", eval_in)->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("-o,--out", eval_out);

  // reconstruct
  std::string rec_ckpt, rec_in, rec_out = "reconstructed.pcap", rec_violations;
  auto* reconstruct = app.add_subcommand("reconstruct", "reconstruct and enforce a capture");
  reconstruct->add_option("-m,--model", rec_ckpt)->required()->check(CLI::ExistingFile);
  reconstruct->add_option("-i,--input", rec_in)->required()->check(CLI::ExistingFile);
  reconstruct->add_option("-o,--out", rec_out);
  reconstruct->add_option("--violations", rec_violations, "CSV of repairs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      GeneratorConfig gc = synth_config.empty() ? GeneratorConfig{} : load_generator_config(synth_config);
      if (synth_seed >= 0) gc.seed = static_cast<std::uint64_t>(synth_seed);
      if (synth_sessions >= 0) gc.sessions = static_cast<std::size_t>(synth_sessions);
      const auto packets = generate(gc);
      const auto bytes = write_pcap(packets, synth_out);
      std::cout << "wrote " << packets.size() << " packets in " << gc.sessions << " sessions to " << synth_out
                << " (" << bytes << " bytes)\n";
    } else if (*ingest) {
      const auto read = read_pcap(ingest_in);
      const auto sessions = group_sessions(read.packets);
      std::size_t violations = 0;
      for (const auto& s : sessions) violations += validate(s.packets).size();
      nlohmann::json j = {{"packets", read.packets.size()},
                          {"sessions", sessions.size()},
                          {"skipped_non_tcp", read.skipped_non_tcp},
                          {"skipped_truncated", read.skipped_truncated},
                          {"rule_findings", violations}};
      std::cout << j.dump(2) << '\n';
      if (!ingest_dump.empty()) write_session_dump(sessions, ingest_dump);
    } else if (*fit) {
      const RunConfig cfg = resolve(fit_o);
      const auto sessions = load_sessions(cfg.input);
      const auto split = split_sessions(sessions, cfg.train.train_fraction, cfg.train.split_seed);
      const auto schema = fit_schema(split.train, cfg.train.mode, cfg.train.embed_dim);
      save_schema(schema, schema_out);
      for (const auto& a : schema.audit) std::cerr << "audit: " << a << '\n';
      std::cout << "schema " << mode_name(schema.mode) << ": encoded width " << schema.encoded_width
                << ", decoded width " << schema.decoded_width << " -> " << schema_out << '\n';
    } else if (*train) {
      const RunConfig cfg = resolve(train_o);
      OutputGuard guard(cfg.output_dir);
      const auto summary = cmd_train(cfg, load_sessions(cfg.input));
      print_metrics(summary.validation_metrics);
      std::cout << "best validation loss " << summary.best_validation << " at epoch " << summary.best_epoch << " of "
                << summary.epochs_run << "; outputs in " << cfg.output_dir << '\n';
      guard.commit();
    } else if (*compare) {
      const RunConfig cfg = resolve(compare_o);
      OutputGuard guard(cfg.output_dir);
      fs::create_directories(cfg.output_dir);
      for (const auto& r : cmd_compare_models(cfg, load_sessions(cfg.input))) {
        std::cout << arch_name(r.arch) << ": best validation " << r.result.best_validation << " at epoch "
                  << r.result.best_epoch << '\n';
      }
      guard.commit();
    } else if (*ablation) {
      const RunConfig cfg = resolve(ablation_o);
      OutputGuard guard(cfg.output_dir);
      fs::create_directories(cfg.output_dir);
      const auto r = cmd_loss_ablation(cfg, load_sessions(cfg.input));
      std::cout << "MSE only\n";
      print_metrics(r.mse_only);
      std::cout << "\nMSE + CE\n";
      print_metrics(r.kal);
      guard.commit();
    } else if (*dropout) {
      const RunConfig cfg = resolve(dropout_o);
      OutputGuard guard(cfg.output_dir);
      fs::create_directories(cfg.output_dir);
      const auto r = cmd_dropout_experiment(cfg, load_sessions(cfg.input));
      std::printf("%-6s %14s %14s\n", "rate", "packet-level", "session-level");
      for (double rate : cfg.dropout_rates) {
        std::printf("%-6.2f %14.6f %14.6f\n", rate, r.median(Arch::Feedforward, rate), r.median(Arch::Transformer, rate));
      }
      guard.commit();
    } else if (*evaluate_cmd) {
      MetricsTable t;
      cmd_evaluate(eval_ckpt, load_sessions(eval_in), eval_out, &t);
      print_metrics(t);
    } else if (*reconstruct) {
      const auto s = cmd_reconstruct(rec_ckpt, rec_in, rec_out, rec_violations);
      std::cout << "reconstructed " << s.packets << " packets in " << s.sessions << " sessions; " << s.repairs
                << " repairs, " << s.report_only << " report-only findings, " << s.repairable_after
                << " repairable violations remaining -> " << rec_out << '\n';
      if (s.repairable_after != 0) return 3;
    }
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
