#pragma once

// Training loop, chunk-averaged evaluation, r^2, the Table-style report and
// the experiment grid.

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "l96/baseline.hpp"
#include "l96/dataset.hpp"
#include "l96/nn/adam.hpp"
#include "l96/nn/loss.hpp"
#include "l96/nn/model.hpp"
#include "l96/regressor.hpp"
#include "l96/sim.hpp"

namespace l96 {

struct TrainConfig {
  ModelType model = ModelType::FC;
  TaskKind task = TaskKind::XY;
  bool test_mode = false;
  std::size_t epochs = 20;
  std::size_t batch = 64;
  nn::AdamConfig adam;
  std::uint64_t init_seed = 1;
  std::uint64_t shuffle_seed = 2;
  std::optional<std::size_t> patience;  // stop when epoch loss has not improved for this many epochs
  double ridge = 1e-8;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  }
};

struct TrainResult {
  Predictor model;
  std::vector<double> loss_history;  // mean chunk loss per epoch
  double final_train_loss = 0.0;     // post-training loss over all TRAIN chunks
  std::uint64_t steps = 0;
  std::size_t epochs_run = 0;
};

/// Chunk-level weighted MSE over `split`, normalised by the dataset's training sigmas.
inline double evaluate_loss(const Predictor& p, const ChunkDataset& ds, Split split) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw EmptySplit("split has no chunks");
  const auto pred = predict_chunks(p, ds, idx);
  double sum = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto t = ds.target(idx[i]);
    for (std::size_t k = 0; k < 3; ++k) {
      const double r = (pred[i][k] - t[k]) / ds.stats.target_sigma[k];
      sum += r * r;
    }
  }
  return sum / (3.0 * static_cast<double>(idx.size()));
}

namespace detail {

inline LinearModel fit_linear_on(const ChunkDataset& ds, const std::vector<std::size_t>& idx, double ridge) {
  constexpr std::size_t kBlock = 4096;
  const std::size_t n_blocks = (idx.size() + kBlock - 1) / kBlock;
  const auto D = static_cast<Eigen::Index>(ds.chunk_size());
  return fit_linear_blocks(ds.chunk_size(), n_blocks, [&](std::size_t b) {
    const std::size_t start = b * kBlock;
    const std::size_t n = std::min(kBlock, idx.size() - start);
    LinearBlock blk{RowMatrix(static_cast<Eigen::Index>(n), D), RowMatrix(static_cast<Eigen::Index>(n), 3)};
    for (std::size_t i = 0; i < n; ++i) {
      const auto px = ds.pixels_of(idx[start + i]);
      for (Eigen::Index c = 0; c < D; ++c) blk.x(static_cast<Eigen::Index>(i), c) = px[static_cast<std::size_t>(c)];
      const auto t = ds.target(idx[start + i]);
      for (Eigen::Index k = 0; k < 3; ++k) blk.y(static_cast<Eigen::Index>(i), k) = t[static_cast<std::size_t>(k)];
    }
    return blk;
  }, ridge);
}

}  // namespace detail

/// One Adam step on a batch: forward, de-standardize, weighted MSE against raw
/// targets, backward through the scaling. Returns the pre-update batch loss;
/// weights are left untouched when the loss is not finite.
inline double train_step(NetworkRegressor& reg, nn::AdamState& adam, nn::ForwardCache& cache, const nn::Tensor& x,
                         const nn::Tensor& y, const Target& sigma) {
  nn::Tensor pred = nn::forward(reg.net, x, cache);
  for (std::size_t i = 0; i < pred.batch; ++i)
    for (std::size_t k = 0; k < 3; ++k) pred.data[i * 3 + k] = reg.scaling.mean[k] + reg.scaling.sigma[k] * pred.data[i * 3 + k];
  auto loss = nn::weighted_mse(pred, y, sigma);
  if (!std::isfinite(loss.loss)) return loss.loss;
  for (std::size_t i = 0; i < pred.batch; ++i)
    for (std::size_t k = 0; k < 3; ++k) loss.grad.data[i * 3 + k] *= reg.scaling.sigma[k];
  const auto grads = nn::backward(reg.net, cache, loss.grad);
  nn::adam_update(adam, reg.net, grads);
  return loss.loss;
}

/// Seeded minibatch Adam over TRAIN chunks (networks) or the closed-form fit (LR).
inline TrainResult train(const ChunkDataset& ds, const TrainConfig& cfg,
                         const std::function<void(std::size_t, double)>& on_epoch = {}) {
  cfg.validate();
  if (ds.task != cfg.task) throw ConfigError("dataset task does not match the training config");
  const auto train_idx = ds.indices(Split::TRAIN);
  if (train_idx.empty()) throw EmptySplit("dataset has no TRAIN chunks");

  TrainResult result;
  if (cfg.model == ModelType::LR) {
    result.model.impl = detail::fit_linear_on(ds, train_idx, cfg.ridge);
    result.final_train_loss = evaluate_loss(result.model, ds, Split::TRAIN);
    return result;
  }

  NetworkRegressor reg;
  reg.net = nn::build_model(network_kind(cfg.model), ds.height, ds.width);
  nn::init_weights(reg.net, cfg.init_seed);
  reg.scaling = {ds.stats.target_mean, ds.stats.target_sigma};
  const auto& sigma = ds.stats.target_sigma;

  nn::AdamState adam(reg.net, cfg.adam);
  nn::ForwardCache cache;
  std::vector<std::size_t> order = train_idx;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.shuffle_seed, "epoch/" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const auto part = std::span<const std::size_t>(order).subspan(start, std::min(cfg.batch, order.size() - start));
      const double loss = train_step(reg, adam, cache, gather_batch(ds, part), gather_targets(ds, part), sigma);
      if (!std::isfinite(loss))
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(result.steps));
      ++result.steps;
      epoch_sum += loss * static_cast<double>(part.size());
    }
    const double epoch_loss = epoch_sum / static_cast<double>(order.size());
    result.loss_history.push_back(epoch_loss);
    ++result.epochs_run;
    if (on_epoch) on_epoch(epoch, epoch_loss);
    if (cfg.patience) {
      if (epoch_loss < best) {
        best = epoch_loss;
        since_best = 0;
      } else if (++since_best >= *cfg.patience) {
        break;
      }
    }
  }
  for (const auto& p : reg.net.parameters())
    if (!all_finite(p)) throw TrainingDiverged("non-finite weights after training");
  result.model.impl = std::move(reg);
  result.final_train_loss = evaluate_loss(result.model, ds, Split::TRAIN);
  if (!std::isfinite(result.final_train_loss)) throw TrainingDiverged("non-finite final training loss");
  return result;
}

// ---------------------------------------------------------------------------
// Chunk-averaged inference and r^2

struct SimPrediction {
  Target truth{};
  Target predicted{};
  std::size_t n_chunks = 0;
};

/// Mean of chunk predictions per simulation. Each simulation's chunks are summed
/// in chunk_index order, so the result does not depend on dataset order.
inline std::map<std::uint32_t, SimPrediction> predict_per_simulation(const Predictor& p, const ChunkDataset& ds,
                                                                     Split split) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw EmptySplit("split has no chunks");
  const auto pred = predict_chunks(p, ds, idx);

  std::map<std::uint32_t, std::vector<std::pair<std::uint32_t, Target>>> by_sim;
  for (std::size_t i = 0; i < idx.size(); ++i) by_sim[ds.sim_ids[idx[i]]].emplace_back(ds.chunk_indices[idx[i]], pred[i]);

  std::map<std::uint32_t, SimPrediction> out;
  for (auto& [sim, rows] : by_sim) {
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    SimPrediction sp;
    sp.truth = target_of(ds.sims.at(sim).params);
    sp.n_chunks = rows.size();
    // shifted mean: exact when every chunk predicts the same value
    const Target anchor = rows.front().second;
    Target acc{};
    for (const auto& [ci, v] : rows)
      for (std::size_t k = 0; k < 3; ++k) acc[k] += v[k] - anchor[k];
    for (std::size_t k = 0; k < 3; ++k) sp.predicted[k] = anchor[k] + acc[k] / static_cast<double>(rows.size());
    out.emplace(sim, sp);
  }
  return out;
}

struct RSquared {
  Target per_param{};
  double mean = 0.0;
};

/// r^2_p = 1 - sum (yhat - y)^2 / sum (y - ybar)^2 per parameter; headline is the
/// unweighted mean over (b, c, h).
inline RSquared r_squared(std::span<const Target> predicted, std::span<const Target> truth) {
  if (predicted.size() != truth.size()) throw ShapeMismatch("r_squared: prediction/truth length mismatch");
  if (truth.size() < 2) throw ZeroVariance("r_squared needs at least 2 points");
  RSquared r;
  for (std::size_t k = 0; k < 3; ++k) {
    double mean = 0.0;
    for (const auto& t : truth) mean += t[k];
    mean /= static_cast<double>(truth.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      ss_tot += (truth[i][k] - mean) * (truth[i][k] - mean);
      ss_res += (predicted[i][k] - truth[i][k]) * (predicted[i][k] - truth[i][k]);
    }
    if (!(ss_tot > 0.0)) throw ZeroVariance("all truths equal for parameter " + std::to_string(k));
    r.per_param[k] = 1.0 - ss_res / ss_tot;
  }
  r.mean = (r.per_param[0] + r.per_param[1] + r.per_param[2]) / 3.0;
  return r;
}

inline RSquared r_squared(const std::map<std::uint32_t, SimPrediction>& per_sim) {
  std::vector<Target> pred, truth;
  for (const auto& [id, sp] : per_sim) {
    pred.push_back(sp.predicted);
    truth.push_back(sp.truth);
  }
  return r_squared(pred, truth);
}

/// r^2 over raw chunk predictions (no averaging); diagnostic only.
inline RSquared chunk_level_r_squared(const Predictor& p, const ChunkDataset& ds, Split split) {
  const auto idx = ds.indices(split);
  const auto pred = predict_chunks(p, ds, idx);
  std::vector<Target> truth;
  for (auto i : idx) truth.push_back(ds.target(i));
  return r_squared(pred, truth);
}

// ---------------------------------------------------------------------------
// Report

struct CellMetrics {
  double train_loss = 0.0;
  double test_loss = 0.0;
  RSquared train_r2;
  RSquared test_r2;
  RSquared test_chunk_r2;
  std::map<std::uint32_t, SimPrediction> test_predictions;
};

struct ReportCell {
  bool test_mode = false;
  TaskKind task = TaskKind::XY;
  ModelType model = ModelType::LR;
  CellMetrics metrics;
};

struct EvalReport {
  std::vector<ReportCell> cells;

  const ReportCell* find(bool test_mode, TaskKind task, ModelType model) const {
    for (const auto& c : cells)
      if (c.test_mode == test_mode && c.task == task && c.model == model) return &c;
    return nullptr;
  }

  /// Table order: test_mode false then true; XY then Y-only; LR, FC, Conv1D, Conv2D.
  void sort_cells() {
    auto key = [](const ReportCell& c) {
      return std::tuple(c.test_mode, static_cast<int>(c.task), static_cast<int>(c.model));
    };
    std::stable_sort(cells.begin(), cells.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });
  }
};

inline CellMetrics evaluate(const Predictor& p, const ChunkDataset& ds) {
  CellMetrics m;
  m.train_loss = evaluate_loss(p, ds, Split::TRAIN);
  m.test_loss = evaluate_loss(p, ds, Split::TEST);
  m.train_r2 = r_squared(predict_per_simulation(p, ds, Split::TRAIN));
  m.test_predictions = predict_per_simulation(p, ds, Split::TEST);
  m.test_r2 = r_squared(m.test_predictions);
  m.test_chunk_r2 = chunk_level_r_squared(p, ds, Split::TEST);
  return m;
}

inline nlohmann::json to_json(const RSquared& r) { return {{"mean", r.mean}, {"b", r.per_param[0]}, {"c", r.per_param[1]}, {"h", r.per_param[2]}}; }

inline RSquared rsquared_from_json(const nlohmann::json& j) {
  return {{j.at("b").get<double>(), j.at("c").get<double>(), j.at("h").get<double>()}, j.at("mean").get<double>()};
}

inline nlohmann::json to_json(const CellMetrics& m) {
  nlohmann::json sims = nlohmann::json::array();
  for (const auto& [id, sp] : m.test_predictions)
    sims.push_back({{"sim_id", id}, {"truth", sp.truth}, {"predicted", sp.predicted}, {"n_chunks", sp.n_chunks}});
  return {{"train_loss", m.train_loss},
          {"test_loss", m.test_loss},
          {"train_r2", to_json(m.train_r2)},
          {"test_r2", to_json(m.test_r2)},
          {"test_chunk_r2", to_json(m.test_chunk_r2)},
          {"test_predictions", sims}};
}

inline CellMetrics metrics_from_json(const nlohmann::json& j) {
  CellMetrics m;
  m.train_loss = j.at("train_loss").get<double>();
  m.test_loss = j.at("test_loss").get<double>();
  m.train_r2 = rsquared_from_json(j.at("train_r2"));
  m.test_r2 = rsquared_from_json(j.at("test_r2"));
  m.test_chunk_r2 = rsquared_from_json(j.at("test_chunk_r2"));
  for (const auto& s : j.at("test_predictions"))
    m.test_predictions[s.at("sim_id").get<std::uint32_t>()] = {s.at("truth").get<Target>(), s.at("predicted").get<Target>(),
                                                               s.at("n_chunks").get<std::size_t>()};
  return m;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"test_mode", c.test_mode}, {"task", to_string(c.task)}, {"model", to_string(c.model)},
                     {"metrics", to_json(c.metrics)}});
  return {{"format", "l96-report"}, {"version", 1}, {"cells", cells}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  for (const auto& c : j.at("cells"))
    r.cells.push_back({c.at("test_mode").get<bool>(), task_from_string(c.at("task").get<std::string>()),
                       model_type_from_string(c.at("model").get<std::string>()), metrics_from_json(c.at("metrics"))});
  return r;
}

/// Human-readable table mirroring the published layout, plus per-parameter test r^2.
inline std::string render_text(const EvalReport& report) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
  };
  auto left = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  std::ostringstream os;
  os << left("test mode", 11) << left("model", 8) << pad("train loss", 11) << pad("test loss", 11)
     << pad("train r2", 10) << pad("test r2", 10) << pad("test r2(b)", 12) << pad("test r2(c)", 12)
     << pad("test r2(h)", 12) << "\n";
  std::optional<std::pair<bool, TaskKind>> block;
  for (const auto& c : report.cells) {
    if (!block || block->first != c.test_mode || block->second != c.task) {
      block = std::pair(c.test_mode, c.task);
      os << std::string(19, ' ')
         << (c.task == TaskKind::XY ? "-- Learning from X and Y --" : "-- Learning from Y only --") << "\n";
    }
    const auto& m = c.metrics;
    os << left(c.test_mode ? "True" : "False", 11) << left(to_string(c.model), 8) << pad(num(m.train_loss), 11)
       << pad(num(m.test_loss), 11) << pad(num(m.train_r2.mean), 10) << pad(num(m.test_r2.mean), 10)
       << pad(num(m.test_r2.per_param[0]), 12) << pad(num(m.test_r2.per_param[1]), 12)
       << pad(num(m.test_r2.per_param[2]), 12) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment grid

struct DatasetKey {
  bool test_mode;
  TaskKind task;
  auto operator<=>(const DatasetKey&) const = default;
};

struct GridConfig {
  std::vector<ModelType> models{kAllModelTypes.begin(), kAllModelTypes.end()};
  std::vector<TaskKind> tasks{TaskKind::XY, TaskKind::Y_ONLY};
  std::vector<bool> test_modes{false, true};
  TrainConfig train;  // hyperparameters shared by all cells; seeds are derived per cell
  std::map<ModelType, std::size_t> epochs_by_model;  // overrides train.epochs per model
  std::uint64_t master_seed = 0;
  std::size_t jobs = 1;
};

inline TrainConfig cell_train_config(const GridConfig& grid, bool test_mode, TaskKind task, ModelType model) {
  TrainConfig cfg = grid.train;
  cfg.model = model;
  cfg.task = task;
  cfg.test_mode = test_mode;
  if (const auto it = grid.epochs_by_model.find(model); it != grid.epochs_by_model.end()) cfg.epochs = it->second;
  cfg.init_seed = derive_seed(grid.master_seed, "init/" + to_string(model));
  cfg.shuffle_seed = derive_seed(grid.master_seed, "shuffle/" + to_string(model) + "/" + to_string(task) + "/" +
                                                       (test_mode ? "true" : "false"));
  return cfg;
}

/// Trains and evaluates every (test_mode, task, model) cell. Cells run
/// independently on up to grid.jobs threads; the report is assembled in table
/// order. on_cell fires (serialised) as each cell completes.
inline EvalReport run_experiment_grid(const std::map<DatasetKey, ChunkDataset>& datasets, const GridConfig& grid,
                                      const std::function<void(const ReportCell&)>& on_cell = {}) {
  std::vector<ReportCell> cells;
  for (bool mode : grid.test_modes)
    for (TaskKind task : grid.tasks)
      for (ModelType model : grid.models) {
        if (!datasets.contains({mode, task})) throw ConfigError("missing dataset for a grid cell");
        cells.push_back({mode, task, model, {}});
      }
  // heaviest models first so a worker pool drains evenly
  std::vector<std::size_t> order(cells.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return static_cast<int>(cells[a].model) > static_cast<int>(cells[b].model); });

  std::mutex mu;
  parallel_for(order.size(), grid.jobs, [&](std::size_t i) {
    auto& cell = cells[order[i]];
    const auto& ds = datasets.at({cell.test_mode, cell.task});
    const auto result = train(ds, cell_train_config(grid, cell.test_mode, cell.task, cell.model));
    cell.metrics = evaluate(result.model, ds);
    if (on_cell) {
      std::lock_guard lock(mu);
      on_cell(cell);
    }
  });

  EvalReport report{std::move(cells)};
  report.sort_cells();
  return report;
}

// ---------------------------------------------------------------------------
// Phase-diagram / error data

struct PhaseData {
  Trajectory truth;
  Trajectory inferred;
  RowMatrix error;  // inferred - truth, n_steps x (K + J*K)
};

inline PhaseData emit_phase_data(const ModelParams& params_true, const ModelParams& params_inferred,
                                 const SimState& init, const IntegratorConfig& config) {
  PhaseData d;
  d.truth = simulate(params_true, init, config);
  d.inferred = simulate(params_inferred, init, config);
  d.error = d.inferred.states - d.truth.states;
  return d;
}

namespace detail {

inline void append_number(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline std::string variable_name(std::size_t col, std::size_t K, std::size_t J) {
  if (col < K) return "X" + std::to_string(col + 1);
  const std::size_t m = col - K;
  return "Y" + std::to_string(m % J + 1) + "_" + std::to_string(m / J + 1);
}

}  // namespace detail

/// Columns X1..X3 and Y1_1..Y3_1 (first three fast variables) for both
/// parameter sets, one row per recorded step.
inline void write_phase_csv(const PhaseData& d, const std::string& path) {
  const std::size_t K = d.truth.params.K, J = d.truth.params.J;
  const std::vector<std::size_t> cols{0, 1, 2, K, K + 1, K + 2};
  std::string out = "step";
  for (const char* tag : {"true", "inferred"})
    for (auto c : cols) out += "," + detail::variable_name(c, K, J) + "_" + tag;
  out += "\n";
  for (Eigen::Index r = 0; r < d.truth.states.rows(); ++r) {
    out += std::to_string(r);
    for (const auto* t : {&d.truth, &d.inferred})
      for (auto c : cols) {
        out += ',';
        detail::append_number(out, t->states(r, static_cast<Eigen::Index>(c)));
      }
    out += '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << out;
}

inline void write_error_csv(const PhaseData& d, const std::string& path) {
  const std::size_t K = d.truth.params.K, J = d.truth.params.J;
  std::string out = "step";
  for (std::size_t c = 0; c < d.truth.params.width(); ++c) out += "," + detail::variable_name(c, K, J);
  out += "\n";
  for (Eigen::Index r = 0; r < d.error.rows(); ++r) {
    out += std::to_string(r);
    for (Eigen::Index c = 0; c < d.error.cols(); ++c) {
      out += ',';
      detail::append_number(out, d.error(r, c));
    }
    out += '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << out;
}

}  // namespace l96
