#pragma once

// Command-line front end. Every command writes its artifacts plus one
// manifest.json into a run directory.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "l96/checkpoint.hpp"
#include "l96/dataset.hpp"
#include "l96/pipeline.hpp"
#include "l96/sim.hpp"

namespace l96::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutRootEnv = "L96LAB_OUT_ROOT";

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kDiverged = 3, kTrainFailed = 4 };

// ---------------------------------------------------------------------------
// Run manifest

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json seeds = json::object();
  json results = json::object();
  std::vector<std::string> notes;
  std::vector<std::string> inputs;   // absolute or caller-relative paths
  std::vector<std::string> outputs;  // file names inside the run directory
  std::string status = "ok";
  std::string failure;
  double wall_clock_seconds = 0.0;

  /// Digests are taken from the files as they are on disk at call time.
  json to_json(const fs::path& dir) const {
    json in = json::object(), out = json::object();
    for (const auto& p : inputs)
      if (fs::exists(p)) in[p] = digest_file(p);
    for (const auto& name : outputs)
      if (fs::exists(dir / name)) out[name] = digest_file((dir / name).string());
    return {{"command", command},       {"argv", argv},       {"version", kVersion},
            {"config", config},         {"seeds", seeds},     {"inputs", in},
            {"outputs", out},           {"results", results}, {"notes", notes},
            {"status", status},         {"failure", failure}, {"wall_clock_seconds", wall_clock_seconds}};
  }
};

inline void write_manifest(const fs::path& dir, const RunManifest& m) {
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw ConfigError("cannot write manifest in " + dir.string());
  f << m.to_json(dir).dump(2) << "\n";
}

/// --out if given, else $L96LAB_OUT_ROOT/<command> (default root: ./runs).
inline fs::path resolve_out(const std::string& out, const std::string& command) {
  fs::path dir;
  if (!out.empty()) {
    dir = out;
  } else {
    const char* root = std::getenv(kOutRootEnv);
    dir = fs::path(root && *root ? root : "runs") / command;
  }
  fs::create_directories(dir);
  return dir;
}

/// Runs `body`, then writes the manifest whether it succeeded or not.
template <class Body>
void with_manifest(const fs::path& dir, RunManifest& m, Body&& body) {
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  try {
    body();
  } catch (const std::exception& e) {
    m.status = "failed";
    m.failure = e.what();
    m.wall_clock_seconds = elapsed();
    write_manifest(dir, m);
    throw;
  }
  m.wall_clock_seconds = elapsed();
  write_manifest(dir, m);
}

// ---------------------------------------------------------------------------
// Shared parsing helpers

/// "b=7:13,c=7:13,h=0.5:1.5"; keys may be omitted.
inline ParameterRanges parse_ranges(const std::string& text) {
  ParameterRanges r;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('='), colon = item.find(':');
    if (eq == std::string::npos || colon == std::string::npos || colon < eq)
      throw ConfigError("bad range '" + item + "', expected name=low:high");
    const std::string key = item.substr(0, eq);
    Range range;
    try {
      range = {std::stod(item.substr(eq + 1, colon - eq - 1)), std::stod(item.substr(colon + 1))};
    } catch (const std::exception&) {
      throw ConfigError("bad range '" + item + "'");
    }
    if (key == "b") r.b = range;
    else if (key == "c") r.c = range;
    else if (key == "h") r.h = range;
    else throw ConfigError("unknown range key '" + key + "'");
  }
  return r;
}

/// "b=10,c=10,h=1" applied on top of `base`.
inline ModelParams parse_params(const std::string& text, ModelParams base) {
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("bad parameter '" + item + "', expected name=value");
    const std::string key = item.substr(0, eq);
    double v = 0.0;
    try {
      v = std::stod(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad parameter '" + item + "'");
    }
    if (key == "b") base.b = v;
    else if (key == "c") base.c = v;
    else if (key == "h") base.h = v;
    else if (key == "F" || key == "f") base.F = v;
    else throw ConfigError("unknown parameter '" + key + "'");
  }
  return base;
}

inline json ranges_to_json(const ParameterRanges& r) {
  return {{"b", {r.b.low, r.b.high}}, {"c", {r.c.low, r.c.high}}, {"h", {r.h.low, r.h.high}}};
}

inline json target_json(const Target& t) { return {{"b", t[0]}, {"c", t[1]}, {"h", t[2]}}; }

inline std::string shortest(double v) {
  std::string s;
  detail::append_number(s, v);
  return s;
}

// ---------------------------------------------------------------------------
// Corpus construction shared by `dataset` and `reproduce`

struct CorpusSeeds {
  std::uint64_t sampler;
  std::uint64_t split;
};

inline CorpusSeeds corpus_seeds(std::uint64_t master) {
  return {derive_seed(master, "sampler"), derive_seed(master, "split")};
}

inline json resampled_json(const std::vector<ResampledDraw>& draws) {
  json out = json::array();
  for (const auto& d : draws) out.push_back({{"slot", d.slot}, {"params", params_to_json(d.rejected)}, {"step", d.step}});
  return out;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
  ModelParams params;
  IntegratorConfig integrator;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_simulate(const SimulateOptions& o, RunManifest& m, std::ostream& log) {
  const auto dir = resolve_out(o.out, "simulate");
  m.config = {{"params", params_to_json(o.params)}, {"integrator", config_to_json(o.integrator)}, {"init", "default"}};
  m.seeds = {{"seed", o.seed}};
  m.notes.push_back("integration starts from the fixed default state; the seed is recorded only");
  with_manifest(dir, m, [&] {
    o.params.validate();
    o.integrator.validate();
    const auto traj = simulate(o.params, default_init(o.params), o.integrator);
    save_trajectory(traj, (dir / "trajectory.l96t").string());
    m.outputs = {"trajectory.l96t", "trajectory.l96t.json"};
    m.results = {{"rows", traj.n_steps()}, {"digest", traj.digest()}};
    log << "wrote " << traj.n_steps() << " steps to " << (dir / "trajectory.l96t").string() << "\n";
  });
  return kOk;
}

// ---------------------------------------------------------------------------
// dataset

struct DatasetOptions {
  std::size_t n_sims = 200;
  ModelParams base;
  IntegratorConfig integrator;
  std::string ranges;
  std::string task = "xy";
  std::string test_mode = "false";
  double train_fraction = 0.9;
  double holdout_sim_fraction = 0.2;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out;
};

inline int cmd_dataset(const DatasetOptions& o, RunManifest& m, std::ostream& log) {
  const auto dir = resolve_out(o.out, "dataset");
  ParameterSampler sampler;
  sampler.ranges = o.ranges.empty() ? ParameterRanges{} : parse_ranges(o.ranges);
  sampler.n_sims = o.n_sims;
  sampler.base = o.base;
  const auto seeds = corpus_seeds(o.seed);
  sampler.seed = seeds.sampler;
  const TaskKind task = task_from_string(o.task);
  const bool test_mode = o.test_mode == "true";
  m.config = {{"n_sims", o.n_sims},
              {"base", params_to_json(o.base)},
              {"ranges", ranges_to_json(sampler.ranges)},
              {"integrator", config_to_json(o.integrator)},
              {"task", to_string(task)},
              {"test_mode", test_mode},
              {"train_fraction", o.train_fraction},
              {"holdout_sim_fraction", o.holdout_sim_fraction},
              {"jobs", o.jobs}};
  m.seeds = {{"master", o.seed}, {"sampler", seeds.sampler}, {"split", seeds.split}};
  with_manifest(dir, m, [&] {
    o.base.validate();
    o.integrator.validate();
    sampler.validate();
    const auto set = generate_simulations(sampler, o.integrator, o.jobs);
    const auto ds = build_dataset(set.trajectories, task, test_mode, seeds.split, o.train_fraction,
                                  o.holdout_sim_fraction, o.jobs);
    save_dataset(ds, (dir / "dataset.l96d").string());
    m.outputs = {"dataset.l96d", "dataset.l96d.json"};
    m.results = {{"chunk_count", ds.size()},
                 {"height", ds.height},
                 {"width", ds.width},
                 {"train_chunks", ds.indices(Split::TRAIN).size()},
                 {"test_chunks", ds.indices(Split::TEST).size()},
                 {"payload_digest", payload_digest(ds)},
                 {"resampled", resampled_json(set.resampled)}};
    log << "wrote " << ds.size() << " chunks (" << ds.height << "x" << ds.width << ") to "
        << (dir / "dataset.l96d").string() << "\n";
  });
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string dataset;
  std::string model = "fc";
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::optional<std::size_t> patience;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_train(const TrainOptions& o, RunManifest& m, std::ostream& log) {
  const auto dir = resolve_out(o.out, "train");
  m.inputs = {o.dataset, o.dataset + ".json"};
  TrainConfig cfg;
  cfg.model = model_type_from_string(o.model);
  cfg.epochs = o.epochs;
  cfg.batch = o.batch;
  cfg.adam.lr = o.lr;
  cfg.patience = o.patience;
  cfg.init_seed = derive_seed(o.seed, "init");
  cfg.shuffle_seed = derive_seed(o.seed, "shuffle");
  m.config = {{"dataset", o.dataset},       {"model", to_string(cfg.model)}, {"epochs", cfg.epochs},
              {"batch", cfg.batch},         {"lr", cfg.adam.lr},             {"beta1", cfg.adam.beta1},
              {"beta2", cfg.adam.beta2},    {"epsilon", cfg.adam.eps},   {"ridge", cfg.ridge},
              {"patience", o.patience ? json(*o.patience) : json(nullptr)}};
  m.seeds = {{"master", o.seed}, {"init", cfg.init_seed}, {"shuffle", cfg.shuffle_seed}};
  if (cfg.model == ModelType::LR) m.notes.push_back("closed-form fit: epochs, batch, lr and patience are ignored");
  with_manifest(dir, m, [&] {
    const auto ds = load_dataset(o.dataset);
    cfg.task = ds.task;
    cfg.test_mode = ds.test_mode;
    m.config["task"] = to_string(ds.task);
    m.config["test_mode"] = ds.test_mode;
    const auto r = train(ds, cfg, [&](std::size_t epoch, double loss) {
      log << "epoch " << epoch + 1 << " loss " << shortest(loss) << "\n";
    });
    save_checkpoint({r.model,
                     {{"model", to_string(cfg.model)},
                      {"task", to_string(ds.task)},
                      {"test_mode", ds.test_mode},
                      {"dataset_digest", payload_digest(ds)},
                      {"seeds", m.seeds},
                      {"final_train_loss", r.final_train_loss}}},
                    (dir / "model.l96w").string());
    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < r.loss_history.size(); ++e) csv += std::to_string(e + 1) + "," + shortest(r.loss_history[e]) + "\n";
    std::ofstream(dir / "loss_history.csv", std::ios::trunc) << csv;
    m.outputs = {"model.l96w", "loss_history.csv"};
    m.results = {{"final_train_loss", r.final_train_loss}, {"steps", r.steps}, {"epochs_run", r.epochs_run}};
    log << "final train loss " << shortest(r.final_train_loss) << "\n";
  });
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::string dataset;
  std::string split = "test";
  std::string out;
};

inline json eval_report(const Predictor& p, const ChunkDataset& ds, Split split) {
  const auto per_sim = predict_per_simulation(p, ds, split);
  const auto r2 = r_squared(per_sim);
  json sims = json::array();
  for (const auto& [id, sp] : per_sim)
    sims.push_back({{"sim", id}, {"n_chunks", sp.n_chunks}, {"truth", target_json(sp.truth)}, {"predicted", target_json(sp.predicted)}});
  return {{"model", to_string(p.type())},
          {"task", to_string(ds.task)},
          {"test_mode", ds.test_mode},
          {"split", split == Split::TRAIN ? "train" : "test"},
          {"loss", evaluate_loss(p, ds, split)},
          {"r2", to_json(r2)},
          {"chunk_r2", to_json(chunk_level_r_squared(p, ds, split))},
          {"per_sim", sims}};
}

/// Plain-text view of an eval report. Numbers use the shortest round-trip
/// form, so parsing the text recovers the JSON values exactly.
inline std::string render_eval_text(const json& r) {
  auto num = [](const json& v) { return shortest(v.get<double>()); };
  std::ostringstream os;
  os << "model " << r.at("model").get<std::string>() << "  task " << r.at("task").get<std::string>() << "  test_mode "
     << (r.at("test_mode").get<bool>() ? "True" : "False") << "  split " << r.at("split").get<std::string>() << "\n";
  os << "loss " << num(r.at("loss")) << "\n";
  for (const char* key : {"r2", "chunk_r2"}) {
    const auto& v = r.at(key);
    os << key << " mean " << num(v.at("mean")) << " b " << num(v.at("b")) << " c " << num(v.at("c")) << " h "
       << num(v.at("h")) << "\n";
  }
  os << "sim,n_chunks,b_true,c_true,h_true,b_pred,c_pred,h_pred\n";
  for (const auto& s : r.at("per_sim")) {
    os << s.at("sim").get<std::uint32_t>() << "," << s.at("n_chunks").get<std::size_t>();
    for (const char* which : {"truth", "predicted"})
      for (const char* k : {"b", "c", "h"}) os << "," << num(s.at(which).at(k));
    os << "\n";
  }
  return os.str();
}

inline int cmd_eval(const EvalOptions& o, RunManifest& m, std::ostream& log) {
  const auto dir = resolve_out(o.out, "eval");
  m.inputs = {o.checkpoint, o.dataset, o.dataset + ".json"};
  m.config = {{"checkpoint", o.checkpoint}, {"dataset", o.dataset}, {"split", o.split}};
  with_manifest(dir, m, [&] {
    const auto ckpt = load_checkpoint(o.checkpoint);
    const auto ds = load_dataset(o.dataset);
    check_compatible(ckpt.predictor, ds);
    if (ckpt.meta.contains("task") && ckpt.meta.at("task") != to_string(ds.task))
      throw ConfigError("checkpoint was trained on task " + ckpt.meta.at("task").get<std::string>() +
                        " but the dataset is " + to_string(ds.task));
    const auto report = eval_report(ckpt.predictor, ds, o.split == "train" ? Split::TRAIN : Split::TEST);
    std::ofstream(dir / "report.json", std::ios::trunc) << report.dump(2) << "\n";
    std::ofstream(dir / "report.txt", std::ios::trunc) << render_eval_text(report);
    m.outputs = {"report.json", "report.txt"};
    m.results = {{"loss", report.at("loss")}, {"r2", report.at("r2")}};
    log << render_eval_text(report);
  });
  return kOk;
}

// ---------------------------------------------------------------------------
// reproduce

struct ScaleConfig {
  std::string name;
  std::size_t n_sims = 0;
  std::size_t n_steps = 0;
  std::size_t epochs = 20;
  std::map<ModelType, std::size_t> epochs_by_model;
};

/// desk: 40 x 4000 steps (200 chunks per simulation) with per-model epoch
/// budgets long enough for each network to level off. full: 200 x 50000 with
/// the default 20 epochs.
inline ScaleConfig scale_config(const std::string& name) {
  if (name == "desk") return {"desk", 40, 4000, 20, {{ModelType::FC, 100}, {ModelType::CONV1D, 60}, {ModelType::CONV2D, 20}}};
  if (name == "full") return {"full", 200, 50000, 20, {}};
  throw ConfigError("unknown scale '" + name + "'");
}

struct ReproduceOptions {
  std::string scale = "desk";
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  bool save_datasets = false;
  std::string out;
};

inline int cmd_reproduce(const ReproduceOptions& o, RunManifest& m, std::ostream& log) {
  const auto dir = resolve_out(o.out, "reproduce");
  const auto scale = scale_config(o.scale);
  const auto seeds = corpus_seeds(o.seed);
  ParameterSampler sampler;
  sampler.seed = seeds.sampler;
  sampler.n_sims = scale.n_sims;
  IntegratorConfig integ;
  integ.n_steps = scale.n_steps;
  GridConfig grid;
  grid.train.epochs = scale.epochs;
  grid.epochs_by_model = scale.epochs_by_model;
  grid.master_seed = o.seed;
  grid.jobs = o.jobs;

  json epochs = json::object();
  for (auto model : kAllModelTypes) epochs[to_string(model)] = cell_train_config(grid, false, TaskKind::XY, model).epochs;
  m.config = {{"scale", scale.name},
              {"n_sims", scale.n_sims},
              {"ranges", ranges_to_json(sampler.ranges)},
              {"base", params_to_json(sampler.base)},
              {"integrator", config_to_json(integ)},
              {"epochs", epochs},
              {"batch", grid.train.batch},
              {"lr", grid.train.adam.lr},
              {"jobs", o.jobs}};
  m.seeds = {{"master", o.seed}, {"sampler", seeds.sampler}, {"split", seeds.split}};
  m.notes.push_back("LR is fitted in closed form; its epoch entry is unused");

  std::string stage;
  std::vector<ReportCell> done;
  const auto t0 = std::chrono::steady_clock::now();
  auto since = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  try {
    with_manifest(dir, m, [&] {
      stage = "simulate";
      log << "simulating " << scale.n_sims << " x " << scale.n_steps << " steps\n";
      const auto set = generate_simulations(sampler, integ, o.jobs);
      m.results["resampled"] = resampled_json(set.resampled);

      stage = "dataset";
      std::map<DatasetKey, ChunkDataset> datasets;
      for (bool mode : grid.test_modes)
        for (TaskKind task : grid.tasks) {
          auto ds = build_dataset(set.trajectories, task, mode, seeds.split, 0.9, 0.2, o.jobs);
          const std::string name = "dataset_" + to_string(task) + (mode ? "_true" : "_false") + ".l96d";
          m.results["dataset_digests"][name] = payload_digest(ds);
          if (o.save_datasets) {
            save_dataset(ds, (dir / name).string());
            m.outputs.push_back(name);
            m.outputs.push_back(name + ".json");
          }
          datasets.emplace(DatasetKey{mode, task}, std::move(ds));
        }

      stage = "grid";
      fs::remove(dir / "report.partial.json");
      const auto report = run_experiment_grid(datasets, grid, [&](const ReportCell& cell) {
        done.push_back(cell);
        EvalReport partial{done};
        partial.sort_cells();
        std::ofstream(dir / "report.partial.json", std::ios::trunc) << to_json(partial).dump(2) << "\n";
        log << "[" << std::fixed << std::setprecision(1) << since() << "s] test_mode=" << (cell.test_mode ? "True" : "False")
            << " task=" << to_string(cell.task) << " model=" << to_string(cell.model)
            << " test_r2=" << std::setprecision(4) << cell.metrics.test_r2.mean << std::defaultfloat << "\n";
      });

      stage = "report";
      std::ofstream(dir / "report.json", std::ios::trunc) << to_json(report).dump(2) << "\n";
      std::ofstream(dir / "report.txt", std::ios::trunc) << render_text(report);
      fs::remove(dir / "report.partial.json");
      m.outputs.insert(m.outputs.end(), {"report.json", "report.txt"});
      log << render_text(report);
    });
  } catch (...) {
    // with_manifest already recorded the message; add where it stopped
    m.results["failed_stage"] = stage;
    m.results["completed_cells"] = done.size();
    if (fs::exists(dir / "report.partial.json")) m.outputs.push_back("report.partial.json");
    write_manifest(dir, m);
    throw;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// phase-data

struct PhaseOptions {
  std::string checkpoint;
  std::string dataset;
  std::optional<std::uint32_t> sim;
  std::string true_params;
  std::optional<std::size_t> steps;
  std::string out;
};

inline int cmd_phase_data(const PhaseOptions& o, RunManifest& m, std::ostream& log) {
  const auto dir = resolve_out(o.out, "phase-data");
  m.inputs = {o.checkpoint, o.dataset, o.dataset + ".json"};
  m.config = {{"checkpoint", o.checkpoint}, {"dataset", o.dataset}, {"true_params", o.true_params}};
  with_manifest(dir, m, [&] {
    const auto ckpt = load_checkpoint(o.checkpoint);
    const auto ds = load_dataset(o.dataset);
    const auto per_sim = predict_per_simulation(ckpt.predictor, ds, Split::TEST);
    const std::uint32_t sim = o.sim ? *o.sim : per_sim.begin()->first;
    if (!per_sim.contains(sim)) throw ConfigError("simulation " + std::to_string(sim) + " has no TEST chunks");
    const ModelParams truth = parse_params(o.true_params, ds.sims.at(sim).params);
    ModelParams inferred = truth;
    const Target pred = per_sim.at(sim).predicted;
    inferred.b = pred[0];
    inferred.c = pred[1];
    inferred.h = pred[2];
    IntegratorConfig integ = ds.integrator;
    if (o.steps) integ.n_steps = *o.steps;
    m.config["sim"] = sim;
    m.config["integrator"] = config_to_json(integ);
    m.results = {{"true", params_to_json(truth)}, {"inferred", params_to_json(inferred)}};
    inferred.validate();
    const auto d = emit_phase_data(truth, inferred, default_init(truth), integ);
    write_phase_csv(d, (dir / "phase.csv").string());
    write_error_csv(d, (dir / "error.csv").string());
    m.outputs = {"phase.csv", "error.csv"};
    m.results["max_abs_error"] = d.error.size() ? d.error.cwiseAbs().maxCoeff() : 0.0;
    log << "sim " << sim << " true (b,c,h)=(" << truth.b << "," << truth.c << "," << truth.h << ") inferred=("
        << inferred.b << "," << inferred.c << "," << inferred.h << ")\n";
  });
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Two-scale Lorenz-96 parameter inference toolkit", "l96lab"};
  app.set_help_flag("--help", "print this help");  // -h would clash with the coupling flag --h
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SimulateOptions sim_o;
  auto* sim = app.add_subcommand("simulate", "integrate one trajectory from the default initial state");
  sim->add_option("--b", sim_o.params.b, "fast time-scale ratio")->capture_default_str();
  sim->add_option("--c", sim_o.params.c, "fast amplitude ratio")->capture_default_str();
  sim->add_option("--h", sim_o.params.h, "coupling strength")->capture_default_str();
  sim->add_option("--f,--F", sim_o.params.F, "forcing")->capture_default_str();
  sim->add_option("--k", sim_o.params.K, "slow variables")->capture_default_str();
  sim->add_option("--j", sim_o.params.J, "fast variables per slow variable")->capture_default_str();
  sim->add_option("--dt", sim_o.integrator.dt)->capture_default_str();
  sim->add_option("--steps", sim_o.integrator.n_steps, "recorded steps")->capture_default_str();
  sim->add_option("--burn-in", sim_o.integrator.burn_in, "discarded leading steps")->capture_default_str();
  sim->add_option("--seed", sim_o.seed)->capture_default_str();
  sim->add_option("--out", sim_o.out, "run directory");

  DatasetOptions ds_o;
  auto* dset = app.add_subcommand("dataset", "sample parameters, simulate and build a chunk dataset");
  dset->add_option("--n-sims", ds_o.n_sims)->capture_default_str();
  dset->add_option("--steps", ds_o.integrator.n_steps)->capture_default_str();
  dset->add_option("--burn-in", ds_o.integrator.burn_in)->capture_default_str();
  dset->add_option("--dt", ds_o.integrator.dt)->capture_default_str();
  dset->add_option("--f,--F", ds_o.base.F)->capture_default_str();
  dset->add_option("--k", ds_o.base.K)->capture_default_str();
  dset->add_option("--j", ds_o.base.J)->capture_default_str();
  dset->add_option("--ranges", ds_o.ranges, "e.g. b=7:13,c=7:13,h=0.5:1.5");
  dset->add_option("--task", ds_o.task)->check(CLI::IsMember({"xy", "y"}))->capture_default_str();
  dset->add_option("--test-mode", ds_o.test_mode)->check(CLI::IsMember({"false", "true"}))->capture_default_str();
  dset->add_option("--train-fraction", ds_o.train_fraction)->capture_default_str();
  dset->add_option("--holdout-fraction", ds_o.holdout_sim_fraction)->capture_default_str();
  dset->add_option("--seed", ds_o.seed)->capture_default_str();
  dset->add_option("--jobs", ds_o.jobs)->capture_default_str();
  dset->add_option("--out", ds_o.out, "run directory");

  TrainOptions tr_o;
  std::size_t patience = 0;
  auto* trn = app.add_subcommand("train", "train one model on a saved dataset");
  trn->add_option("--dataset", tr_o.dataset, "dataset.l96d path")->required()->check(CLI::ExistingFile);
  trn->add_option("--model", tr_o.model)->check(CLI::IsMember({"lr", "fc", "conv1d", "conv2d"}, CLI::ignore_case))->capture_default_str();
  trn->add_option("--epochs", tr_o.epochs)->capture_default_str();
  trn->add_option("--batch", tr_o.batch)->capture_default_str();
  trn->add_option("--lr", tr_o.lr)->capture_default_str();
  auto* pat = trn->add_option("--patience", patience, "stop after this many epochs without improvement");
  trn->add_option("--seed", tr_o.seed)->capture_default_str();
  trn->add_option("--out", tr_o.out, "run directory");

  EvalOptions ev_o;
  auto* evl = app.add_subcommand("eval", "score a checkpoint on one split of a dataset");
  evl->add_option("--checkpoint", ev_o.checkpoint)->required()->check(CLI::ExistingFile);
  evl->add_option("--dataset", ev_o.dataset)->required()->check(CLI::ExistingFile);
  evl->add_option("--split", ev_o.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  evl->add_option("--report,--out", ev_o.out, "run directory for report.json / report.txt");

  ReproduceOptions rp_o;
  auto* rep = app.add_subcommand("reproduce", "full grid: simulate, build datasets, train and evaluate all models");
  rep->add_option("--scale", rp_o.scale)->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  rep->add_option("--seed", rp_o.seed, "master seed")->capture_default_str();
  rep->add_option("--jobs", rp_o.jobs)->capture_default_str();
  rep->add_flag("--save-datasets", rp_o.save_datasets, "also write the four datasets");
  rep->add_option("--out", rp_o.out, "run directory");

  PhaseOptions ph_o;
  std::uint32_t sim_id = 0;
  std::size_t steps = 0;
  auto* phs = app.add_subcommand("phase-data", "resimulate with true and inferred parameters, write CSVs");
  phs->add_option("--checkpoint", ph_o.checkpoint)->required()->check(CLI::ExistingFile);
  phs->add_option("--dataset", ph_o.dataset)->required()->check(CLI::ExistingFile);
  auto* sim_opt = phs->add_option("--sim", sim_id, "simulation id (default: first with TEST chunks)");
  phs->add_option("--true-params", ph_o.true_params, "override true values, e.g. b=10,c=10,h=1");
  auto* steps_opt = phs->add_option("--steps", steps, "steps to resimulate (default: dataset length)");
  phs->add_option("--out", ph_o.out, "run directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      if (dynamic_cast<const CLI::CallForVersion*>(&e)) out << kVersion << "\n";
      return kOk;
    }
    err << "error: " << e.what() << "\n\n"
        << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kUsage;
  }

  RunManifest m;
  m.argv = args;
  try {
    if (sim->parsed()) {
      m.command = "simulate";
      return cmd_simulate(sim_o, m, out);
    }
    if (dset->parsed()) {
      m.command = "dataset";
      return cmd_dataset(ds_o, m, out);
    }
    if (trn->parsed()) {
      m.command = "train";
      if (pat->count()) tr_o.patience = patience;
      return cmd_train(tr_o, m, out);
    }
    if (evl->parsed()) {
      m.command = "eval";
      return cmd_eval(ev_o, m, out);
    }
    if (rep->parsed()) {
      m.command = "reproduce";
      return cmd_reproduce(rp_o, m, out);
    }
    m.command = "phase-data";
    if (sim_opt->count()) ph_o.sim = sim_id;
    if (steps_opt->count()) ph_o.steps = steps;
    return cmd_phase_data(ph_o, m, out);
  } catch (const IntegrationDiverged& e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << "\n";
    return kTrainFailed;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

inline int run(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }

}  // namespace l96::cli
