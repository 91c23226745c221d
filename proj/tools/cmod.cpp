// Command-line front end: synth, train, evaluate, predict, oracle-check,
// grad-check, export-reps, export-relations.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmod/checkpoint.hpp"
#include "cmod/config.hpp"
#include "cmod/evaluation.hpp"
#include "cmod/events.hpp"
#include "cmod/synthesis.hpp"
#include "cmod/training.hpp"
#include "cmod/verification.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmod;

namespace {

// Everything a run can be configured with. Values start at the library
// defaults, are overlaid by --config, then by explicit flags.
struct RunConfig {
  HyperParams hyper;
  TrainConfig train;
  SynthConfig synth = default_synth_config();
  std::size_t train_days = 14, val_days = 2, test_days = 2;
  double day_length = 86400.0;
  std::optional<double> t0;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablations;

  std::string events_path, catalog_path, checkpoint_path, out_path;
  bool toy = false;
  std::vector<std::string> nodes;
  std::string phase = "test";
  std::size_t oracle_events = 10000, oracle_nodes = 20;
};

json config_json(const RunConfig& c) {
  return {{"hyper", to_json(c.hyper)},
          {"train",
           {{"max_epochs", c.train.max_epochs},
            {"patience", c.train.patience},
            {"lr", c.train.lr},
            {"seed", c.train.seed},
            {"train_days", c.train_days},
            {"val_days", c.val_days},
            {"test_days", c.test_days},
            {"day_length", c.day_length}}},
          {"synth", to_json(c.synth)}};
}

void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "hyper" && key != "train" && key != "synth") throw UsageError("unknown config section '" + key + "'");
  if (j.contains("hyper")) c.hyper = hyper_from_json(j["hyper"], c.hyper);
  if (j.contains("synth")) c.synth = synth_from_json(j["synth"], c.synth);
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
    c.train.patience = t.value("patience", c.train.patience);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.seed = t.value("seed", c.train.seed);
    c.train_days = t.value("train_days", c.train_days);
    c.val_days = t.value("val_days", c.val_days);
    c.test_days = t.value("test_days", c.test_days);
    c.day_length = t.value("day_length", c.day_length);
  }
}

void apply_ablations(RunConfig& c) {
  for (const auto& a : c.ablations) {
    if (a == "no-ml") c.hyper.ablation.no_multilevel = true;
    else if (a == "no-mu") c.hyper.ablation.no_weighted_update = true;
    else if (a == "mse-loss") c.hyper.ablation.mse_loss = true;
    else throw UsageError("unknown ablation '" + a + "' (expected no-ml, no-mu or mse-loss)");
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

struct Dataset {
  std::vector<TransactionEvent> events;
  NodeCatalog catalog;
};

Dataset load_dataset(const RunConfig& c) {
  require(!c.events_path.empty(), "--events is required");
  std::ifstream in(c.events_path);
  if (!in) throw IoError("cannot open events '" + c.events_path + "'");
  if (c.catalog_path.empty()) {
    auto [events, catalog] = parse_events_indexed(in);
    return {std::move(events), std::move(catalog)};
  }
  std::ifstream cin(c.catalog_path);
  if (!cin) throw IoError("cannot open catalog '" + c.catalog_path + "'");
  NodeCatalog catalog = parse_catalog(cin);
  auto events = parse_events(in, catalog);
  return {std::move(events), std::move(catalog)};
}

Splits make_splits(const RunConfig& c, const Dataset& data, double tau) {
  const double t0 = c.t0.value_or(default_origin(data.events, tau));
  return Splits::by_days(t0, c.train_days, c.val_days, c.test_days, c.day_length);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

// Writes to --out when given, otherwise to stdout.
template <typename F>
void emit(const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  auto out = open_out(path);
  write(out);
}

json report_header(const std::string& command, const json& config) {
  return {{"command", command}, {"config", config}, {"config_hash", config_hash(config)}};
}

Checkpoint load_model(const RunConfig& c) {
  require(!c.checkpoint_path.empty(), "--checkpoint is required");
  return load_checkpoint(c.checkpoint_path);
}

Phase parse_phase(const std::string& s) {
  if (s == "train") return Phase::train;
  if (s == "validation") return Phase::validation;
  if (s == "test") return Phase::test;
  throw UsageError("unknown phase '" + s + "' (expected train, validation or test)");
}

// ---------------------------------------------------------------------------

int cmd_synth(RunConfig& c) {
  require(!c.out_path.empty(), "--out is required");
  if (c.seed) c.synth.seed = *c.seed;
  auto stream = generate(c.synth);
  const fs::path dir(c.out_path);
  fs::create_directories(dir);
  auto ev = open_out(dir / "events.csv");
  write_events(ev, stream.events, stream.catalog);
  auto cat = open_out(dir / "catalog.csv");
  write_catalog(cat, stream.catalog);
  const json cfg = to_json(c.synth);
  json rep = report_header("synth", cfg);
  rep["events"] = stream.events.size();
  auto meta = open_out(dir / "synth.json");
  meta << rep.dump(2) << '\n';
  std::cerr << "wrote " << stream.events.size() << " events to " << (dir / "events.csv").string() << '\n';
  return 0;
}

int cmd_train(RunConfig& c) {
  require(!c.out_path.empty(), "--out is required");
  if (c.seed) c.train.seed = *c.seed;
  Dataset data = load_dataset(c);
  const HyperParams hp = c.hyper.resolved(data.catalog.size(), data.catalog.feature_dim());
  c.train.splits = make_splits(c, data, hp.tau);
  RunConfig resolved = c;
  resolved.hyper = hp;
  const json cfg = config_json(resolved);

  TrainOptions opts;
  opts.on_epoch = [](const HistoryRow& r) {
    std::cerr << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_mae " << r.val_mae << " ("
              << r.seconds << " s)\n";
  };
  auto result = train(data.events, data.catalog, hp, c.train, opts);

  const fs::path dir(c.out_path);
  fs::create_directories(dir);
  save_checkpoint(result.params, result.opt, hp, (dir / "model.ckpt").string());
  auto hist = open_out(dir / "history.csv");
  write_history(hist, result.history);

  auto val = evaluate(result.params, data.events, data.catalog, hp, c.train.splits, Phase::validation);
  json rep = report_header("train", cfg);
  rep["best_epoch"] = result.best_epoch;
  rep["epochs_run"] = result.history.size();
  rep["validation"] = {{"all_pairs", to_json(val.all_pairs)}, {"above_average", to_json(val.above_average)}};
  auto out = open_out(dir / "report.json");
  out << rep.dump(2) << '\n';
  std::cout << rep.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(RunConfig& c) {
  Checkpoint ck = load_model(c);
  Dataset data = load_dataset(c);
  if (ck.hyper.n_nodes != data.catalog.size()) {
    throw DimensionMismatch("checkpoint has " + std::to_string(ck.hyper.n_nodes) + " nodes, data has " +
                            std::to_string(data.catalog.size()));
  }
  const Splits splits = make_splits(c, data, ck.hyper.tau);
  const Phase phase = parse_phase(c.phase);
  RunConfig resolved = c;
  resolved.hyper = ck.hyper;
  const json cfg = config_json(resolved);

  auto model = evaluate(ck.params, data.events, data.catalog, ck.hyper, splits, phase);
  auto ha = evaluate_historical_average(data.events, data.catalog, ck.hyper.tau, splits, phase);
  json rep = report_header("evaluate", cfg);
  rep["phase"] = c.phase;
  rep["model"] = {{"all_pairs", to_json(model.all_pairs)}, {"above_average", to_json(model.above_average)}};
  rep["historical_average"] = {{"all_pairs", to_json(ha.all_pairs)}, {"above_average", to_json(ha.above_average)}};
  emit(c.out_path, [&](std::ostream& out) { out << rep.dump(2) << '\n'; });
  return 0;
}

int cmd_predict(RunConfig& c) {
  Checkpoint ck = load_model(c);
  Dataset data = load_dataset(c);
  const Splits splits = make_splits(c, data, ck.hyper.tau);
  auto res = evaluate(ck.params, data.events, data.catalog, ck.hyper, splits, parse_phase(c.phase));
  emit(c.out_path, [&](std::ostream& out) { write_predictions(out, res.rows, data.catalog, true); });
  return 0;
}

int cmd_oracle_check(RunConfig& c) {
  OracleCheckConfig oc;
  oc.events = c.oracle_events;
  oc.nodes = c.oracle_nodes;
  oc.seed = c.seed.value_or(0);
  oc.tau = c.hyper.tau;
  oc.lambda = c.hyper.lambda;
  auto r = run_oracle_check(oc);
  const bool pass = r.max_rel_error <= 1e-9;
  const json cfg = {{"events", oc.events}, {"nodes", oc.nodes}, {"d", oc.d},
                    {"tau", oc.tau},       {"lambda", oc.lambda}, {"seed", oc.seed}};
  json rep = report_header("oracle-check", cfg);
  rep["batches"] = r.batches;
  rep["comparisons"] = r.comparisons;
  rep["max_rel_error"] = r.max_rel_error;
  rep["tolerance"] = 1e-9;
  rep["pass"] = pass;
  emit(c.out_path, [&](std::ostream& out) { out << rep.dump(2) << '\n'; });
  return pass ? 0 : 1;
}

int cmd_grad_check(RunConfig& c) {
  require(c.toy, "grad-check currently supports only the toy instance; pass --toy");
  auto r = run_toy_grad_check(c.seed.value_or(0));
  emit(c.out_path, [&](std::ostream& out) {
    out << "array,coordinate,analytic,numeric,rel_error\n";
    out.precision(17);
    for (const auto& e : r.report.entries)
      out << e.array << ',' << e.coordinate << ',' << e.analytic << ',' << e.numeric << ',' << e.rel_error << '\n';
  });
  std::cerr << "grad-check: " << r.report.entries.size() << " coordinates over " << r.report.arrays.size()
            << " arrays, max relative error " << r.report.max_rel_error << (r.report.pass ? " (pass)" : " (FAIL)")
            << '\n';
  return r.report.pass ? 0 : 1;
}

int cmd_export_reps(RunConfig& c) {
  Checkpoint ck = load_model(c);
  Dataset data = load_dataset(c);
  std::vector<NodeId> nodes;
  if (c.nodes.empty()) {
    for (NodeId i = 0; i < data.catalog.size(); ++i) nodes.push_back(i);
  } else {
    for (const auto& name : c.nodes) {
      auto id = data.catalog.find(name);
      if (!id) throw UnknownNode("node '" + name + "'");
      nodes.push_back(*id);
    }
  }
  auto rows = export_representations(ck.params, data.events, data.catalog, ck.hyper, make_splits(c, data, ck.hyper.tau),
                                     nodes);
  emit(c.out_path, [&](std::ostream& out) { write_representations(out, rows, data.catalog); });
  return 0;
}

int cmd_export_relations(RunConfig& c) {
  require(!c.out_path.empty(), "--out is required");
  Checkpoint ck = load_model(c);
  Dataset data = load_dataset(c);
  auto rel = relations_after(ck.params, data.events, data.catalog, ck.hyper, make_splits(c, data, ck.hyper.tau));
  const fs::path dir(c.out_path);
  fs::create_directories(dir);
  auto acm = open_out(dir / "relations_acm.csv");
  write_relations(acm, rel.acm, data.catalog);
  auto ace = open_out(dir / "relations_ace.csv");
  write_relations(ace, rel.ace, data.catalog);
  return 0;
}

// ---------------------------------------------------------------------------

struct Flags {
  std::string config;
  std::optional<std::size_t> d, heads, d_msg, clusters, cap, epochs, patience, days, nodes_n;
  std::optional<double> tau, half_life, lr, base_rate, gain_limit;
  std::optional<std::size_t> train_days, val_days, test_days;
};

void add_common(CLI::App* sub, RunConfig& c, Flags& f) {
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--config", f.config, "JSON config file with optional hyper/train/synth sections");
  sub->add_option("--ablation", c.ablations, "Ablation variant (repeatable): no-ml, no-mu, mse-loss")
      ->check(CLI::IsMember({"no-ml", "no-mu", "mse-loss"}));
}

void add_model_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--d", f.d, "Memory width (default 256)");
  sub->add_option("--heads", f.heads, "Relation heads (default 8)");
  sub->add_option("--d-msg", f.d_msg, "Level message width (default 256)");
  sub->add_option("--clusters", f.clusters, "Cluster nodes (default ceil(sqrt(N)))");
  sub->add_option("--tau", f.tau, "Prediction window in seconds (default 1800)");
  sub->add_option("--half-life", f.half_life, "Decay half-life in seconds (default 3600)");
  sub->add_option("--cap", f.cap, "Events per sub-batch; 0 keeps whole windows (default 0)");
  sub->add_option("--gain-limit", f.gain_limit, "Station MLP gain bound; 0 disables (default 0.9)");
  sub->add_option("--epochs", f.epochs, "Maximum epochs (default 30)");
  sub->add_option("--patience", f.patience, "Early-stopping patience (default 10)");
  sub->add_option("--lr", f.lr, "Adam learning rate (default 1e-4)");
}

void add_data_flags(CLI::App* sub, RunConfig& c, Flags& f) {
  sub->add_option("--events", c.events_path, "Event CSV (origin,destination,timestamp)");
  sub->add_option("--catalog", c.catalog_path, "Node catalog CSV (name,index); without it nodes are indices");
  sub->add_option("--t0", c.t0, "Time origin in seconds (default: first event floored to tau)");
  sub->add_option("--train-days", f.train_days, "Training days (default 14)");
  sub->add_option("--val-days", f.val_days, "Validation days (default 2)");
  sub->add_option("--test-days", f.test_days, "Test days (default 2)");
}

void apply_flags(RunConfig& c, const Flags& f) {
  if (!f.config.empty()) apply_config_file(c, f.config);
  if (f.d) c.hyper.d = *f.d;
  if (f.heads) c.hyper.heads = *f.heads;
  if (f.d_msg) c.hyper.d_msg = *f.d_msg;
  if (f.clusters) c.hyper.n_clusters = *f.clusters;
  if (f.tau) c.hyper.tau = *f.tau;
  if (f.half_life) {
    require(*f.half_life > 0.0, "--half-life must be positive");
    c.hyper.lambda = std::log(2.0) / *f.half_life;
  }
  if (f.cap) c.hyper.cap = *f.cap;
  if (f.gain_limit) c.hyper.station_gain_limit = *f.gain_limit;
  if (f.epochs) c.train.max_epochs = *f.epochs;
  if (f.patience) c.train.patience = *f.patience;
  if (f.lr) c.train.lr = *f.lr;
  if (f.train_days) c.train_days = *f.train_days;
  if (f.val_days) c.val_days = *f.val_days;
  if (f.test_days) c.test_days = *f.test_days;
  if (f.days) c.synth.days = *f.days;
  if (f.nodes_n) c.synth.n_nodes = *f.nodes_n;
  if (f.base_rate) c.synth.base_rate = *f.base_rate;
  apply_ablations(c);
}

int run(int argc, char** argv) {
  CLI::App app{"Streaming origin-destination demand forecasting"};
  app.require_subcommand(1);
  RunConfig c;
  Flags f;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic event stream and catalog");
  add_common(synth, c, f);
  synth->add_option("--out", c.out_path, "Output directory");
  synth->add_option("--days", f.days, "Days to simulate (default 18)");
  synth->add_option("--nodes", f.nodes_n, "Node count (default 24)");
  synth->add_option("--base-rate", f.base_rate, "Events per second per pair at multiplier 1 (default 1/720)");

  auto* train_cmd = app.add_subcommand("train", "Train on an event stream; writes model.ckpt, history.csv, report.json");
  add_common(train_cmd, c, f);
  add_model_flags(train_cmd, f);
  add_data_flags(train_cmd, c, f);
  train_cmd->add_option("--out", c.out_path, "Output directory");

  auto* eval_cmd = app.add_subcommand("evaluate", "Score a checkpoint and the historical-average baseline");
  add_common(eval_cmd, c, f);
  add_data_flags(eval_cmd, c, f);
  eval_cmd->add_option("--checkpoint", c.checkpoint_path, "Checkpoint from train");
  eval_cmd->add_option("--phase", c.phase, "train, validation or test (default test)");
  eval_cmd->add_option("--out", c.out_path, "Report path (default stdout)");

  auto* predict = app.add_subcommand("predict", "Write per-window OD predictions as CSV");
  add_common(predict, c, f);
  add_data_flags(predict, c, f);
  predict->add_option("--checkpoint", c.checkpoint_path, "Checkpoint from train");
  predict->add_option("--phase", c.phase, "train, validation or test (default test)");
  predict->add_option("--out", c.out_path, "CSV path (default stdout)");

  auto* oracle = app.add_subcommand("oracle-check", "Online memories against the closed-form decayed average");
  add_common(oracle, c, f);
  oracle->add_option("--events", c.oracle_events, "Random events (default 10000)");
  oracle->add_option("--nodes", c.oracle_nodes, "Nodes (default 20)");
  oracle->add_option("--out", c.out_path, "Report path (default stdout)");

  auto* grad = app.add_subcommand("grad-check", "Tape gradients against central finite differences");
  add_common(grad, c, f);
  grad->add_flag("--toy", c.toy, "Use the 3-node toy instance");
  grad->add_option("--out", c.out_path, "CSV path (default stdout)");

  auto* reps = app.add_subcommand("export-reps", "Dump station representations after every batch");
  add_common(reps, c, f);
  add_data_flags(reps, c, f);
  reps->add_option("--checkpoint", c.checkpoint_path, "Checkpoint from train");
  reps->add_option("--node", c.nodes, "Node name (repeatable; default all)");
  reps->add_option("--out", c.out_path, "CSV path (default stdout)");

  auto* rels = app.add_subcommand("export-relations", "Dump station-cluster relations after replaying the stream");
  add_common(rels, c, f);
  add_data_flags(rels, c, f);
  rels->add_option("--checkpoint", c.checkpoint_path, "Checkpoint from train");
  rels->add_option("--out", c.out_path, "Output directory for relations_acm.csv and relations_ace.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "UsageError: " << e.what() << '\n';
    return 2;
  }

  apply_flags(c, f);
  if (*synth) return cmd_synth(c);
  if (*train_cmd) return cmd_train(c);
  if (*eval_cmd) return cmd_evaluate(c);
  if (*predict) return cmd_predict(c);
  if (*oracle) return cmd_oracle_check(c);
  if (*grad) return cmd_grad_check(c);
  if (*reps) return cmd_export_reps(c);
  if (*rels) return cmd_export_relations(c);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const cmod::Error& e) {
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "Error: " << e.what() << '\n';
    return 1;
  }
}
