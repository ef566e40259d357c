#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "mxacl/checkpoint.hpp"
#include "mxacl/grad_align.hpp"
#include "mxacl/inference.hpp"

namespace mxacl::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

void close_out(std::ofstream& os, const fs::path& path) {
  os.close();
  if (!os) throw IoError("write error on " + path.string());
}

template <class F>
void write_file(const fs::path& path, F&& body) {
  std::ofstream os = open_out(path);
  body(os);
  close_out(os, path);
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

/// Cross-entropy stage 1 does not read lambda or the gate, so a sweep can share it.
bool stage1_is_ce(const RegimeConfig& r) { return r.regime == Regime::two_stage && r.stage1_objective == Objective::ce; }

RegimeConfig seeded(const RunConfig& c, std::uint64_t seed) {
  RegimeConfig r = c.regime;
  r.seed = seed;
  r.validate();
  return r;
}

SeedRun start_seed(const RunConfig& c, const Vocab& vocab, std::uint64_t seed) {
  SeedRun run{make_model(c.model, vocab, seed), TrainLog{}, seed};
  run.log.run_id = seed_tag(seed);
  return run;
}

void run_stage1(SeedRun& run, const RunConfig& c, const Dataset& data, const Vocab& vocab) {
  const RegimeConfig r = seeded(c, run.seed);
  train_stage1(run.model, data, vocab, r, run.log);
}

/// Stage 2 after a completed stage 1, otherwise the whole regime.
void run_remaining(SeedRun& run, const RunConfig& c, const Dataset& data, const Vocab& vocab) {
  const RegimeConfig r = seeded(c, run.seed);
  if (r.regime == Regime::two_stage && run.model.stage1_complete()) {
    train_stage2(run.model, data, vocab, r, run.log);
  } else {
    train(run.model, data, vocab, r, run.log);
  }
}

// ------------------------------------------------------------------ checkpoint inputs

struct Loaded {
  MultiExitModel model;
  Vocab vocab;
  Dataset data;
};

Loaded load_inputs(const std::string& checkpoint, const std::string& data_dir) {
  MultiExitModel model = load_checkpoint(checkpoint);
  if (!model.metadata().contains("vocab")) throw ValidationError(checkpoint + ": checkpoint carries no vocabulary");
  Vocab vocab = Vocab::from_json(model.metadata().at("vocab"));
  Dataset data = load_dataset_dir(data_dir);
  if (data.label_names.size() != model.config().n_classes) {
    throw ValidationError("dataset has " + std::to_string(data.label_names.size()) + " classes, checkpoint expects " +
                          std::to_string(model.config().n_classes));
  }
  return {std::move(model), std::move(vocab), std::move(data)};
}

const std::vector<LabeledText>& split_of(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "eval") return d.eval;
  throw ValidationError("unknown split \"" + split + "\" (expected train or eval)");
}

// ------------------------------------------------------------------ train overrides

/// Flag values layered over the config file as a JSON merge patch.
struct TrainFlags {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::optional<std::uint64_t> seed;
  std::string preset, regime, objective, stage1_objective;
  std::optional<double> lambda, temperature, gamma_threshold, lr;
  std::optional<bool> acl_grad, kd;
  std::optional<std::size_t> epochs, stage2_epochs, batch_size;

  void add(CLI::App& app) {
    app.add_option("--config", config, "run config JSON")->required();
    app.add_option("--out", out, "output directory (overrides the config)");
    app.add_option("--seed", seed, "single seed (overrides the seed list)");
    app.add_option("--seeds", seeds, "seed list (overrides the config)")->delimiter(',');
    app.add_option("--preset", preset, "ablation preset");
    app.add_option("--regime", regime, "single_exit, 2st, jt or alt");
    app.add_option("--objective", objective, "ce, ce_scl, acl_embed or acl_cl");
    app.add_option("--stage1-objective", stage1_objective, "stage-1 objective under 2st");
    app.add_option("--lambda", lambda, "contrastive weight");
    app.add_option("--temperature", temperature, "contrastive temperature");
    app.add_option("--gamma-threshold", gamma_threshold, "gate threshold in degrees");
    app.add_option("--lr", lr, "peak learning rate");
    app.add_option("--acl-grad", acl_grad, "gradient-angle gate (true/false)");
    app.add_option("--kd", kd, "distil from the last exit in stage 2 (true/false)");
    app.add_option("--epochs", epochs, "stage-1 (or only) epochs");
    app.add_option("--stage2-epochs", stage2_epochs, "stage-2 epochs");
    app.add_option("--batch-size", batch_size, "batch size");
  }

  RunConfig resolve() const {
    json j = read_json_file(config);
    json patch = json::object();
    json r = json::object();
    if (!out.empty()) patch["out"] = out;
    if (seed) patch["seeds"] = std::vector<std::uint64_t>{*seed};
    if (!seeds.empty()) patch["seeds"] = seeds;
    if (!preset.empty()) patch["preset"] = preset;
    if (!regime.empty()) r["regime"] = regime;
    if (!objective.empty()) r["objective"] = objective;
    if (!stage1_objective.empty()) r["stage1_objective"] = stage1_objective;
    if (lambda) r["lambda"] = *lambda;
    if (temperature) r["temperature"] = *temperature;
    if (gamma_threshold) r["gamma_threshold"] = *gamma_threshold;
    if (lr) r["lr"] = *lr;
    if (acl_grad) r["acl_grad"] = *acl_grad;
    if (kd) r["kd"] = *kd;
    if (epochs) r["epochs"] = *epochs;
    if (stage2_epochs) r["stage2_epochs"] = *stage2_epochs;
    if (batch_size) r["batch_size"] = *batch_size;
    if (!r.empty()) patch["regime"] = r;
    if (!j.is_object()) throw ValidationError(config + ": expected a JSON object");
    j.merge_patch(patch);
    return parse_run_config(j);
  }
};

/// Loads data, fills data-derived model fields, validates, and echoes the resolved config.
Dataset prepare_run(RunConfig& c, const std::string& echo_name, const json& extra = json::object()) {
  c.validate();
  Dataset data = load_run_data(c);
  fit_model_to_data(c, data);
  c.validate();
  make_dir(c.out_dir);
  json echo = c;
  echo.update(extra);
  write_json_file(fs::path(c.out_dir) / echo_name, echo);
  return data;
}

// ------------------------------------------------------------------ commands

int cmd_synth(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed,
              std::ostream& os) {
  SynthSpec spec = read_json_file(spec_path).get<SynthSpec>();
  if (seed) spec.seed = *seed;
  spec.validate();
  const Dataset d = generate_synthetic(spec);
  const fs::path dir(out);
  make_dir(dir);
  write_tsv(dir / "train.tsv", d.train, d.label_names);
  write_tsv(dir / "eval.tsv", d.eval, d.label_names);
  const Manifest m{spec.name, spec.n_classes, d.train.size(), d.eval.size(), Vocab::build(d.train).size(),
                   spec.seed, d.label_names};
  write_json_file(dir / "manifest.json", m.to_json());
  write_json_file(dir / "spec.resolved.json", json(spec));
  os << "wrote " << d.train.size() << " train and " << d.eval.size() << " eval records to " << dir.string() << '\n';
  return kOk;
}

int cmd_train(const TrainFlags& flags, std::ostream& os) {
  RunConfig c = flags.resolve();
  const Dataset data = prepare_run(c, "config.resolved.json");
  const Vocab vocab = Vocab::build(data.train);
  const fs::path dir(c.out_dir);
  std::vector<ScoreRow> rows;
  for (std::uint64_t seed : c.seeds) {
    const std::string tag = seed_tag(seed);
    std::optional<SeedRun> run;
    run.emplace(start_seed(c, vocab, seed));
    const auto write_logs = [&] {
      write_file(dir / ("metrics_" + tag + ".jsonl"), [&](std::ostream& o) { run->log.write_metrics(o); });
      if (c.regime.acl_grad) {
        write_file(dir / ("angles_" + tag + ".jsonl"), [&](std::ostream& o) { run->log.write_angles(o); });
      }
    };
    try {
      if (c.regime.regime == Regime::two_stage) {
        run_stage1(*run, c, data, vocab);
        save_checkpoint(run->model, dir / ("checkpoint_" + tag + "_stage1.bin"));
      }
      run_remaining(*run, c, data, vocab);
    } catch (const DivergenceError&) {
      write_logs();
      write_json_file(dir / ("divergence_" + tag + ".json"), run->log.divergence.value_or(json::object()));
      throw;
    }
    save_checkpoint(run->model, dir / ("checkpoint_" + tag + ".bin"));
    write_logs();
    for (const ScoreRow& r : score_model(run->model, data, vocab, seed)) rows.push_back(r);
  }
  const ScoreTable table = make_score_table(std::move(rows));
  write_file(dir / "scores.csv", [&](std::ostream& o) { table.write_csv(o); });
  write_json_file(dir / "scores_summary.json", table.summary());
  os << table.summary().dump() << '\n';
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& policy_text,
             const std::string& split, const std::string& out, std::ostream& os) {
  const Loaded in = load_inputs(checkpoint, data_dir);
  const ExitPolicy policy = parse_policy(policy_text);
  policy.validate(in.model.config().n_layers);
  const ExitTrace trace = run_policy(in.model, split_of(in.data, split), in.vocab, policy);
  json summary = trace.summary();
  summary["policy"] = policy.describe();
  summary["split"] = split;
  if (!out.empty()) {
    const fs::path dir(out);
    make_dir(dir);
    write_json_file(dir / "eval.resolved.json",
                    {{"checkpoint", checkpoint}, {"data", data_dir}, {"policy", policy.describe()}, {"split", split}});
    write_json_file(dir / "eval_summary.json", summary);
    write_file(dir / "eval_trace.jsonl", [&](std::ostream& o) { trace.write_jsonl(o); });
  }
  os << summary.dump() << '\n';
  return kOk;
}

int cmd_curve(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
              const std::string& out, std::ostream& os) {
  const Loaded in = load_inputs(checkpoint, data_dir);
  const std::vector<CurvePoint> curve = layer_score_curve(in.model, split_of(in.data, split), in.vocab);
  if (!out.empty()) {
    const fs::path dir(out);
    make_dir(dir);
    write_json_file(dir / "curve.resolved.json", {{"checkpoint", checkpoint}, {"data", data_dir}, {"split", split}});
    write_file(dir / "curve.csv", [&](std::ostream& o) { write_curve_csv(o, curve); });
    write_file(dir / "curve.dat", [&](std::ostream& o) { write_curve_dat(o, curve); });
  }
  write_curve_csv(os, curve);
  return kOk;
}

int cmd_angles(const std::string& checkpoint, const std::string& data_dir, const std::string& objective_text,
               const std::string& split, const AngleProbe& base, std::size_t bins, const std::string& out,
               std::ostream& os) {
  Loaded in = load_inputs(checkpoint, data_dir);
  AngleProbe probe = base;
  probe.objective = objective_from_string(objective_text);
  if (bins == 0) throw ValidationError("angles: bins must be positive");
  const std::vector<GradReport> reports = frozen_angle_reports(in.model, split_of(in.data, split), in.vocab, probe);
  const AngleHistogram hist = angle_histogram(reports, bins);
  const std::size_t exit = probe.exit_layer == 0 ? in.model.config().n_layers : probe.exit_layer;
  json summary = hist.to_json();
  summary["objective"] = to_string(probe.objective);
  summary["exit_layer"] = exit;
  if (!out.empty()) {
    const fs::path dir(out);
    make_dir(dir);
    const std::string tag = to_string(probe.objective) + "_exit" + std::to_string(exit);
    write_json_file(dir / ("angles_" + tag + ".resolved.json"),
                    {{"checkpoint", checkpoint},
                     {"data", data_dir},
                     {"split", split},
                     {"objective", to_string(probe.objective)},
                     {"exit_layer", exit},
                     {"temperature", probe.temperature},
                     {"lambda", probe.lambda},
                     {"gamma_threshold", probe.gamma_threshold},
                     {"batch_size", probe.batch_size},
                     {"bins", bins}});
    write_file(dir / ("angles_" + tag + ".jsonl"), [&](std::ostream& o) {
      for (std::size_t i = 0; i < reports.size(); ++i) {
        const GradReport& r = reports[i];
        json line = {{"batch", i}, {"exit_layer", exit}, {"param_scope", r.param_scope}, {"angle_defined", r.angle_defined},
                     {"gated", r.gated}, {"lambda_prime", r.lambda_prime}};
        line["cos_gamma"] = r.angle_defined ? json(r.cos_gamma) : json(nullptr);
        line["gamma_deg"] = r.angle_defined ? json(r.gamma_deg) : json(nullptr);
        o << line.dump() << '\n';
      }
    });
    write_file(dir / ("angle_hist_" + tag + ".csv"), [&](std::ostream& o) { hist.write_csv(o); });
    write_json_file(dir / ("angle_hist_" + tag + ".json"), summary);
  }
  os << summary.dump() << '\n';
  return kOk;
}

int cmd_sweep(const TrainFlags& flags, const std::vector<double>& grid, std::ostream& os) {
  RunConfig c = flags.resolve();
  const std::vector<std::string> methods{"ce_scl", "acl"};
  const Dataset data = prepare_run(c, "sweep.resolved.json", {{"grid", grid}, {"methods", methods}});
  const SweepResult result = run_lambda_sweep(c, data, methods, grid);
  const fs::path dir(c.out_dir);
  write_file(dir / "lambda_sweep.csv", [&](std::ostream& o) { result.write_table_csv(o); });
  write_file(dir / "lambda_sweep_scores.csv", [&](std::ostream& o) { result.write_scores_csv(o); });
  write_json_file(dir / "lambda_sweep_summary.json", result.summary());
  result.write_table_csv(os);
  return kOk;
}

int cmd_export(const std::string& checkpoint, const std::string& data_dir, std::size_t exit, const std::string& split,
               const std::string& out, std::ostream& os) {
  const Loaded in = load_inputs(checkpoint, data_dir);
  const std::size_t m = exit == 0 ? in.model.config().n_layers : exit;
  const RepresentationExport ex = export_representations(in.model, split_of(in.data, split), in.vocab, m);
  const fs::path dir(out);
  make_dir(dir);
  write_json_file(dir / "reps.resolved.json",
                  {{"checkpoint", checkpoint}, {"data", data_dir}, {"split", split}, {"exit_layer", m}});
  const fs::path file = dir / ("reps_exit" + std::to_string(m) + ".csv");
  write_file(file, [&](std::ostream& o) { ex.write_csv(o); });
  os << "wrote " << ex.reps.size() << " representations to " << file.string() << '\n';
  return kOk;
}

}  // namespace

// ------------------------------------------------------------------ training helpers

std::vector<double> default_lambda_grid() { return {0.005, 0.01, 0.02, 0.1, 0.5, 1.0}; }

SeedRun train_seed_stage1(const RunConfig& c, const Dataset& data, const Vocab& vocab, std::uint64_t seed) {
  if (c.regime.regime != Regime::two_stage) throw ValidationError("train_seed_stage1: regime is not 2st");
  SeedRun run = start_seed(c, vocab, seed);
  run_stage1(run, c, data, vocab);
  return run;
}

SeedRun train_seed(const RunConfig& c, const Dataset& data, const Vocab& vocab, std::uint64_t seed,
                   const SeedRun* stage1) {
  const bool reuse = stage1 != nullptr && c.regime.regime == Regime::two_stage;
  if (reuse && stage1->seed != seed) {
    throw ValidationError("train_seed: stage-1 run belongs to another seed");
  }
  SeedRun run = reuse ? *stage1 : start_seed(c, vocab, seed);
  run_remaining(run, c, data, vocab);
  return run;
}

SweepResult run_lambda_sweep(const RunConfig& c, const Dataset& data, const std::vector<std::string>& methods,
                             const std::vector<double>& grid) {
  if (grid.empty()) throw ValidationError("sweep: empty lambda grid");
  for (double l : grid) {
    if (!(l >= 0.0 && l <= 1.0)) throw ValidationError("sweep: lambda values must lie in [0, 1]");
  }
  const Vocab vocab = Vocab::build(data.train);
  SweepResult result;
  result.methods = methods;
  result.grid = grid;
  for (const std::string& method : methods) {
    RunConfig mc = c;
    mc.regime = ablation_preset(method, c.regime);
    std::map<std::uint64_t, SeedRun> shared;
    if (stage1_is_ce(mc.regime)) {
      for (std::uint64_t seed : c.seeds) shared.emplace(seed, train_seed_stage1(mc, data, vocab, seed));
    }
    for (double lambda : grid) {
      RunConfig lc = mc;
      lc.regime.lambda = lambda;
      std::vector<ScoreRow> rows;
      for (std::uint64_t seed : c.seeds) {
        const auto it = shared.find(seed);
        const SeedRun run = train_seed(lc, data, vocab, seed, it == shared.end() ? nullptr : &it->second);
        for (const ScoreRow& row : score_model(run.model, data, vocab, seed)) rows.push_back(row);
      }
      result.cells.push_back({method, lambda, make_score_table(std::move(rows))});
    }
  }
  return result;
}

void SweepResult::write_table_csv(std::ostream& os) const {
  os << "lambda";
  for (const std::string& m : methods) os << ',' << m;
  for (const std::string& m : methods) os << ',' << m << "_std";
  os << '\n' << std::setprecision(17);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    os << grid[g];
    for (std::size_t m = 0; m < methods.size(); ++m) os << ',' << cells[m * grid.size() + g].table.mean;
    for (std::size_t m = 0; m < methods.size(); ++m) os << ',' << cells[m * grid.size() + g].table.stddev;
    os << '\n';
  }
}

void SweepResult::write_scores_csv(std::ostream& os) const {
  os << "method,lambda,seed,exit_layer,score\n" << std::setprecision(17);
  for (const Cell& cell : cells) {
    for (const ScoreRow& r : cell.table.rows) {
      os << cell.method << ',' << cell.lambda << ',' << r.seed << ',' << r.exit_layer << ',' << r.score << '\n';
    }
  }
}

json SweepResult::summary() const {
  json out = json::object();
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<double> means;
    for (std::size_t g = 0; g < grid.size(); ++g) means.push_back(cells[m * grid.size() + g].table.mean);
    const auto [lo, hi] = std::minmax_element(means.begin(), means.end());
    out[methods[m]] = {{"lambda", grid}, {"mean_cross_layer_average", means}, {"spread", *hi - *lo}};
  }
  return out;
}

// ------------------------------------------------------------------ entry point

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-exit encoder training with aligned contrastive objectives", "mxacl"};
  app.require_subcommand(1);

  std::string spec, synth_out;
  std::optional<std::uint64_t> synth_seed;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--spec", spec, "synthetic spec JSON")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "override the spec seed");

  TrainFlags train_flags;
  CLI::App* train_cmd = app.add_subcommand("train", "train one model per seed");
  train_flags.add(*train_cmd);

  std::string checkpoint, data_dir, policy = "fixed", split = "eval", out_dir;
  CLI::App* eval = app.add_subcommand("eval", "run an exit policy over a dataset split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--policy", policy, "fixed[:m], entropy:threshold or patience:t")->capture_default_str();
  eval->add_option("--split", split, "train or eval")->capture_default_str();
  eval->add_option("--out", out_dir, "also write summary and trace here");

  CLI::App* curve = app.add_subcommand("curve", "score at every fixed exit layer");
  curve->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  curve->add_option("--data", data_dir, "dataset directory")->required();
  curve->add_option("--split", split, "train or eval")->capture_default_str();
  curve->add_option("--out", out_dir, "also write curve.csv and curve.dat here");

  std::string objective;
  std::string angle_split = "train";
  AngleProbe probe;
  std::size_t bins = 36;
  CLI::App* angles = app.add_subcommand("angles", "CE vs contrastive gradient angles on fixed parameters");
  angles->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  angles->add_option("--data", data_dir, "dataset directory")->required();
  angles->add_option("--objective", objective, "ce_scl (ce+scl), acl_embed (acl) or acl_cl")->required();
  angles->add_option("--exit", probe.exit_layer, "exit layer, 0 for the last")->capture_default_str();
  angles->add_option("--split", angle_split, "train or eval")->capture_default_str();
  angles->add_option("--batch-size", probe.batch_size, "batch size")->capture_default_str();
  angles->add_option("--temperature", probe.temperature, "contrastive temperature")->capture_default_str();
  angles->add_option("--lambda", probe.lambda, "lambda used for the gate decision")->capture_default_str();
  angles->add_option("--gamma-threshold", probe.gamma_threshold, "gate threshold in degrees")->capture_default_str();
  angles->add_option("--bins", bins, "histogram bins over [0, 180]")->capture_default_str();
  angles->add_option("--out", out_dir, "also write the angle log and histogram here");

  TrainFlags sweep_flags;
  std::vector<double> grid = default_lambda_grid();
  CLI::App* sweep = app.add_subcommand("sweep-lambda", "CE+SCL vs ACL over a lambda grid");
  sweep_flags.add(*sweep);
  sweep->add_option("--grid", grid, "comma-separated lambda values")->delimiter(',')->capture_default_str();

  std::size_t export_exit = 0;
  CLI::App* exp = app.add_subcommand("export-reps", "exit representations, label embeddings and a 2-D PCA");
  exp->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  exp->add_option("--data", data_dir, "dataset directory")->required();
  exp->add_option("--exit", export_exit, "exit layer, 0 for the last")->capture_default_str();
  exp->add_option("--split", split, "train or eval")->capture_default_str();
  exp->add_option("--out", out_dir, "output directory")->required();

  std::vector<const char*> argv{"mxacl"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kValidation;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec, synth_out, synth_seed, out);
    if (train_cmd->parsed()) return cmd_train(train_flags, out);
    if (eval->parsed()) return cmd_eval(checkpoint, data_dir, policy, split, out_dir, out);
    if (curve->parsed()) return cmd_curve(checkpoint, data_dir, split, out_dir, out);
    if (angles->parsed()) {
      return cmd_angles(checkpoint, data_dir, objective, angle_split, probe, bins, out_dir, out);
    }
    if (sweep->parsed()) return cmd_sweep(sweep_flags, grid, out);
    if (exp->parsed()) return cmd_export(checkpoint, data_dir, export_exit, split, out_dir, out);
  } catch (const DivergenceError& e) {
    err << "error: divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const NumericError& e) {
    err << "error: numeric: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    err << "error: io: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kValidation;
}

}  // namespace mxacl::cli
