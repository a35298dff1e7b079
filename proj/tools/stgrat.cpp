// Command-line front end: embed, train, eval, predict, inspect-attention, synth.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stgrat/checkpoint.hpp"
#include "stgrat/config.hpp"
#include "stgrat/evaluation.hpp"
#include "stgrat/pipeline.hpp"
#include "stgrat/training.hpp"

namespace fs = std::filesystem;
using namespace stgrat;

namespace {

constexpr int kUsageError = 2;
constexpr int kNumericError = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " path is required");
  if (!fs::is_regular_file(path)) throw UsageError(what + " file not found: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

RunConfig run_config_from(const std::string& path, const std::vector<std::string>& overrides, KeyValues* merged) {
  RunConfig rc;
  KeyValues kv;
  if (!path.empty()) {
    require_file(path, "config");
    kv = load_key_values(path);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("", "override '" + o + "' is not key=value");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  apply_key_values(rc, kv);
  rc.model.validate();
  rc.train.validate();
  if (merged) *merged = kv;
  return rc;
}

std::string effective_config(const RunConfig& rc, const KeyValues& kv) {
  std::string out = "# effective settings (defaults filled in)\n" + canonical_model_config(rc.model);
  for (const auto& [k, v] : kv.entries) {
    if (canonical_model_config(rc.model).find(k + "=") == std::string::npos) out += k + "=" + v + "\n";
  }
  return out;
}

// ------------------------------------------------------------------ embed

int cmd_embed(const std::string& graph_path, Index dim, int epochs, std::uint64_t seed, const std::string& out) {
  require_file(graph_path, "graph");
  const auto edges = load_edge_csv(graph_path);
  const RoadGraph g = build_graph(nodes_from_edges(edges), edges);
  LineOptions opt;
  opt.dim = dim;
  opt.epochs = epochs;
  save_embeddings(line_embed(g, opt, seed), out);
  std::cout << "wrote " << g.node_count() << " embeddings of dim " << dim << " to " << out << "\n";
  return 0;
}

// ------------------------------------------------------------------ train

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& resume) {
  KeyValues kv;
  RunConfig rc = run_config_from(config_path, overrides, &kv);
  require_file(rc.data.speeds, "speeds");
  require_file(rc.data.graph, "graph");
  if (!rc.data.embeddings.empty()) require_file(rc.data.embeddings, "embeddings");
  if (!resume.empty()) require_file(resume, "checkpoint");

  const fs::path out = rc.output_dir;
  fs::create_directories(out);
  if (!config_path.empty()) write_text(out / "config.cfg", read_text(config_path));
  write_text(out / "effective.cfg", effective_config(rc, kv));

  SpeedTable table = load_speed_table(rc.data.speeds);
  const auto edges = load_edge_csv(rc.data.graph);
  std::optional<Checkpoint> restored;
  if (!resume.empty()) restored = load_checkpoint(resume, rc.model);

  std::optional<EmbeddingTable> emb;
  if (restored) emb = restored->embeddings;
  else if (!rc.data.embeddings.empty()) emb = load_embeddings(rc.data.embeddings, table.node_ids);
  Experiment ex = restored ? prepare_experiment(rc, std::move(table), restored->graph, restored->embeddings, restored->stats)
                           : prepare_experiment(rc, std::move(table), edges, emb);
  if (!restored && rc.data.embeddings.empty() && rc.model.embedding_dim > 0) {
    save_embeddings(ex.graph.embeddings, (out / "embeddings.txt").string());
  }

  TrainingState state = restored ? restored->state : initial_state(rc.model, rc.train);
  const bool append = restored && fs::exists(out / "metrics.csv");
  std::ofstream log(out / "metrics.csv", append ? std::ios::app : std::ios::trunc);
  if (!append) log << metrics_log_header() << "\n";
  std::cout << "training " << state.params.scalar_count() << " parameters on " << ex.split.train.size()
            << " windows (validation " << ex.split.validation.size() << ", test " << ex.split.test.size() << ")\n";
  const FitResult result = fit(rc.model, ex.graph, ex.split.train, ex.split.validation, rc.train, state,
                               [&](const EpochLog& row) {
                                 log << metrics_log_row(row) << "\n" << std::flush;
                                 std::cout << "epoch " << row.epoch << " iter " << row.iteration << " train_mae "
                                           << row.train_mae << " val_mae " << row.val_mae << "\n" << std::flush;
                               });

  Checkpoint ckpt{rc.model, state, ex.series->stats, rc.train.seed, ex.step_seconds, ex.graph.graph, ex.graph.embeddings};
  save_checkpoint((out / "checkpoint.bin").string(), ckpt);
  std::cout << "best epoch " << result.best_epoch << " val_mae " << result.best_val_mae << "; checkpoint "
            << (out / "checkpoint.bin").string() << "\n";
  if (!ex.split.test.empty()) {
    const Predictions p = predict_dataset(rc.model, state.params, ex.graph, ex.split.test, rc.train.eval_batch_size);
    const MetricReport report = horizon_report(p, "test");
    write_metric_csv({report}, (out / "test_metrics.csv").string());
    if (const auto* avg = report.find("avg")) std::cout << "test mae " << avg->values.mae << "\n";
  }
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalOptions {
  std::string checkpoint, speeds, out = "eval", split = "test", time_ranges;
  bool impeded = false;
  PeltOptions pelt;
  Real threshold = 20;
  Real train_fraction = 0.7, validation_fraction = 0.1, test_fraction = 0.2;
};

int cmd_eval(const EvalOptions& o) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.speeds, "speeds");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  RunConfig rc;
  rc.model = ck.model;
  rc.data.train_fraction = o.train_fraction;
  rc.data.validation_fraction = o.validation_fraction;
  rc.data.test_fraction = o.test_fraction;
  const Experiment ex = prepare_experiment(rc, load_speed_table(o.speeds), ck.graph, ck.embeddings, ck.stats);
  const WindowedDataset* data = nullptr;
  if (o.split == "test") data = &ex.split.test;
  else if (o.split == "validation") data = &ex.split.validation;
  else if (o.split == "train") data = &ex.split.train;
  else if (o.split == "all") data = &ex.windows;
  else throw UsageError("--split must be train, validation, test or all");
  if (data->empty()) throw UsageError("split '" + o.split + "' has no windows");

  const Predictions p = predict_dataset(ck.model, ck.state.params, ex.graph, *data);
  std::vector<MetricReport> reports{horizon_report(p, "all")};
  if (!o.time_ranges.empty()) {
    const auto ranges = parse_hour_ranges(o.time_ranges);
    for (auto& r : time_range_metrics(p, ranges)) reports.push_back(std::move(r));
  }
  fs::create_directories(o.out);
  if (o.impeded) {
    const auto intervals = impeded_intervals(ex.table, o.pelt, o.threshold);
    reports.push_back(impeded_metrics(p, intervals));
    std::ofstream iv(fs::path(o.out) / "impeded_intervals.csv");
    iv << "node,start_row,end_row,start_time,end_time,min_speed\n";
    for (const auto& i : intervals) {
      iv << i.node_id << ',' << i.start << ',' << i.end << ',' << format_timestamp(ex.table.timestamps[static_cast<std::size_t>(i.start)])
         << ',' << format_timestamp(ex.table.timestamps[static_cast<std::size_t>(i.end - 1)]) << ',' << i.min_speed << "\n";
    }
  }
  const fs::path path = fs::path(o.out) / "metrics.csv";
  write_metric_csv(reports, path.string());
  write_metric_csv(reports, std::cout);
  return 0;
}

// ---------------------------------------------------------------- predict

SequenceBatch window_batch(const Checkpoint& ck, const std::string& window_path) {
  require_file(window_path, "window");
  const SpeedTable raw = load_speed_table(window_path);
  if (raw.steps() != ck.model.input_steps) {
    throw UsageError(window_path + ": expected " + std::to_string(ck.model.input_steps) + " rows, got " +
                     std::to_string(raw.steps()));
  }
  SpeedTable window;
  try {
    window = reorder_columns(raw, ck.graph.node_ids());
  } catch (const std::invalid_argument& e) {
    throw UsageError(window_path + ": " + e.what());
  }
  return make_input_batch(window, ck.stats, ck.model.output_steps, ck.step_seconds);
}

GraphArtifacts artifacts(const Checkpoint& ck) { return GraphArtifacts::build(ck.graph, ck.embeddings, ck.model); }

int cmd_predict(const std::string& checkpoint, const std::string& window_path, const std::string& out) {
  require_file(checkpoint, "checkpoint");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const SequenceBatch batch = window_batch(ck, window_path);
  const GraphArtifacts graph = artifacts(ck);
  const Matrix speeds = forecast(ck.model, ck.state.params, graph, batch, ck.stats);
  const SpeedTable window = load_speed_table(window_path);
  SpeedTable result;
  result.node_ids = ck.graph.node_ids();
  result.speeds = speeds;
  result.observed = Matrix::Ones(speeds.rows(), speeds.cols());
  for (Index t = 0; t < speeds.rows(); ++t) result.timestamps.push_back(window.timestamps.back() + (t + 1) * ck.step_seconds);
  save_speed_table(result, out);
  return 0;
}

int cmd_inspect(const std::string& checkpoint, const std::string& window_path, const std::string& out) {
  require_file(checkpoint, "checkpoint");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const SequenceBatch batch = window_batch(ck, window_path);
  const GraphArtifacts graph = artifacts(ck);
  const auto records = export_attention(ck.model, ck.state.params, graph, batch, out);
  std::cout << "wrote attention for " << records.size() << " query rows to " << out << "\n";
  return 0;
}

// ------------------------------------------------------------------ synth

int cmd_synth(const RingScenario& sc, std::uint64_t seed, const std::string& out_dir) {
  fs::create_directories(out_dir);
  save_speed_table(synthetic_ring_speeds(sc, seed), (fs::path(out_dir) / "speeds.csv").string());
  std::ofstream g(fs::path(out_dir) / "graph.csv");
  g << "from,to,distance\n";
  for (const auto& e : synthetic_ring_edges(sc)) g << e.from << ',' << e.to << ',' << e.distance << "\n";
  if (!g) throw std::runtime_error("cannot write graph file in " + out_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal graph attention traffic forecaster"};
  app.require_subcommand(1);

  auto* embed = app.add_subcommand("embed", "Train LINE node embeddings for a road graph");
  std::string embed_graph, embed_out = "embeddings.txt";
  Index embed_dim = 64;
  int embed_epochs = 200;
  std::uint64_t embed_seed = 0;
  embed->add_option("--graph", embed_graph, "Edge CSV (from,to,distance)")->required();
  embed->add_option("--dim", embed_dim, "Embedding dimension");
  embed->add_option("--epochs", embed_epochs, "Edge samples per edge");
  embed->add_option("--seed", embed_seed, "Random seed");
  embed->add_option("--out", embed_out, "Output file");

  auto* train = app.add_subcommand("train", "Train a model from a key = value config file");
  std::string train_config, train_resume;
  std::vector<std::string> train_set;
  train->add_option("config", train_config, "Config file")->required();
  train->add_option("--set", train_set, "Override a config key (key=value), repeatable");
  train->add_option("--resume", train_resume, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a speed table");
  EvalOptions eo;
  eval->add_option("--checkpoint", eo.checkpoint, "Checkpoint file")->required();
  eval->add_option("--speeds", eo.speeds, "Speed CSV")->required();
  eval->add_option("--out", eo.out, "Output directory");
  eval->add_option("--split", eo.split, "train, validation, test or all");
  eval->add_option("--time-ranges", eo.time_ranges, "Hour slices, e.g. 0-6,6-12,12-18,18-24");
  eval->add_flag("--impeded", eo.impeded, "Add the impeded-interval slice");
  eval->add_option("--penalty", eo.pelt.penalty, "Changepoint penalty");
  eval->add_option("--jump", eo.pelt.jump, "Changepoint grid step");
  eval->add_option("--min-size", eo.pelt.min_size, "Minimum segment length");
  eval->add_option("--threshold", eo.threshold, "Impeded speed threshold (mph)");
  eval->add_option("--train-fraction", eo.train_fraction);
  eval->add_option("--validation-fraction", eo.validation_fraction);
  eval->add_option("--test-fraction", eo.test_fraction);

  auto* predict = app.add_subcommand("predict", "Forecast the steps following one input window");
  std::string pred_ckpt, pred_window, pred_out = "forecast.csv";
  predict->add_option("--checkpoint", pred_ckpt, "Checkpoint file")->required();
  predict->add_option("--window", pred_window, "Speed CSV with exactly input_steps rows")->required();
  predict->add_option("--out", pred_out, "Output CSV");

  auto* inspect = app.add_subcommand("inspect-attention", "Export encoder spatial attention for one window");
  std::string insp_ckpt, insp_window, insp_out = "attention.csv";
  inspect->add_option("--checkpoint", insp_ckpt, "Checkpoint file")->required();
  inspect->add_option("--window", insp_window, "Speed CSV with exactly input_steps rows")->required();
  inspect->add_option("--out", insp_out, "Output CSV");

  auto* synth = app.add_subcommand("synth", "Write a synthetic directed-ring dataset");
  RingScenario sc;
  std::uint64_t synth_seed = 0;
  std::string synth_out = "ring";
  synth->add_option("--nodes", sc.nodes);
  synth->add_option("--days", sc.days);
  synth->add_option("--noise", sc.noise);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out-dir", synth_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*embed) return cmd_embed(embed_graph, embed_dim, embed_epochs, embed_seed, embed_out);
    if (*train) return cmd_train(train_config, train_set, train_resume);
    if (*eval) return cmd_eval(eo);
    if (*predict) return cmd_predict(pred_ckpt, pred_window, pred_out);
    if (*inspect) return cmd_inspect(insp_ckpt, insp_window, insp_out);
    if (*synth) return cmd_synth(sc, synth_seed, synth_out);
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}
