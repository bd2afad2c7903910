#pragma once

// Trajectories -> normalized grayscale image chunks with (b, c, h) targets.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "l96/common.hpp"
#include "l96/sim.hpp"

namespace l96 {

enum class TaskKind { XY, Y_ONLY };
enum class Split : std::uint8_t { TRAIN, TEST };

inline std::string to_string(TaskKind t) { return t == TaskKind::XY ? "xy" : "y"; }

inline TaskKind task_from_string(std::string_view s) {
  if (s == "xy" || s == "XY") return TaskKind::XY;
  if (s == "y" || s == "Y_ONLY" || s == "y_only") return TaskKind::Y_ONLY;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected xy or y)");
}

using Target = std::array<double, 3>;  // (b, c, h)

inline Target target_of(const ModelParams& p) { return {p.b, p.c, p.h}; }

// ---------------------------------------------------------------------------
// Parameter sampling

struct Range {
  double low = 0.0;
  double high = 0.0;
};

struct ParameterRanges {
  Range b{7.0, 13.0};
  Range c{7.0, 13.0};
  Range h{0.5, 1.5};
};

struct ParameterSampler {
  ParameterRanges ranges;
  std::uint64_t seed = 0;
  std::size_t n_sims = 200;
  ModelParams base;  // supplies F, K, J

  void validate() const {
    for (const auto& [name, r] : {std::pair{"b", ranges.b}, {"c", ranges.c}, {"h", ranges.h}}) {
      if (!(r.low < r.high)) throw RangeEmpty(std::string("empty range for ") + name);
    }
  }
};

/// Infinite deterministic stream of parameter draws; sample_parameters takes
/// its first n_sims elements and divergence replacements continue from there.
class ParameterStream {
 public:
  explicit ParameterStream(const ParameterSampler& sampler) : sampler_(sampler), rng_(sampler.seed) {
    sampler_.validate();
  }

  ModelParams next() {
    ModelParams p = sampler_.base;
    p.b = draw(sampler_.ranges.b);
    p.c = draw(sampler_.ranges.c);
    p.h = draw(sampler_.ranges.h);
    return p;
  }

 private:
  double draw(const Range& r) { return std::uniform_real_distribution<double>(r.low, r.high)(rng_); }

  ParameterSampler sampler_;
  std::mt19937_64 rng_;
};

inline std::vector<ModelParams> sample_parameters(const ParameterSampler& sampler) {
  ParameterStream stream(sampler);
  std::vector<ModelParams> out;
  out.reserve(sampler.n_sims);
  for (std::size_t i = 0; i < sampler.n_sims; ++i) out.push_back(stream.next());
  return out;
}

struct ResampledDraw {
  std::size_t slot = 0;
  ModelParams rejected;
  std::int64_t step = -1;
};

struct SimulationSet {
  std::vector<Trajectory> trajectories;
  std::vector<ResampledDraw> resampled;
};

/// Samples parameters and simulates each from the shared default initial state.
/// A draw whose integration diverges is replaced by the next draw of the stream;
/// replacements are assigned in slot order so the result does not depend on `jobs`.
inline SimulationSet generate_simulations(const ParameterSampler& sampler, const IntegratorConfig& config,
                                          std::size_t jobs = 1, std::size_t max_resamples = 1000) {
  ParameterStream stream(sampler);
  std::vector<ModelParams> params(sampler.n_sims);
  for (auto& p : params) p = stream.next();

  SimulationSet set;
  set.trajectories.resize(sampler.n_sims);
  std::vector<std::size_t> pending(sampler.n_sims);
  std::iota(pending.begin(), pending.end(), 0);

  while (!pending.empty()) {
    std::vector<std::int64_t> diverged_at(pending.size(), -2);
    parallel_for(pending.size(), jobs, [&](std::size_t i) {
      const std::size_t slot = pending[i];
      try {
        set.trajectories[slot] = simulate(params[slot], default_init(params[slot]), config);
      } catch (const IntegrationDiverged& e) {
        diverged_at[i] = e.step();
      }
    });
    std::vector<std::size_t> retry;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (diverged_at[i] == -2) continue;
      const std::size_t slot = pending[i];
      if (set.resampled.size() >= max_resamples)
        throw IntegrationDiverged(diverged_at[i], 0);
      set.resampled.push_back({slot, params[slot], diverged_at[i]});
      params[slot] = stream.next();
      retry.push_back(slot);
    }
    pending = std::move(retry);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Normalization and rendering

struct NormalizationStats {
  std::vector<double> col_min;  // per variable column, K + J*K entries
  std::vector<double> col_max;
  Target target_mean{};
  Target target_sigma{};

  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

struct ColumnRange {
  std::size_t first = 0;
  std::size_t count = 0;
};

inline ColumnRange retained_columns(TaskKind task, std::size_t K, std::size_t J) {
  return task == TaskKind::XY ? ColumnRange{0, K + J * K} : ColumnRange{K, J * K};
}

/// Per-column affine map (v - min) / (max - min), clamped to [0, 1].
inline RowMatrix render_image(const Trajectory& traj, const NormalizationStats& stats, TaskKind task) {
  const auto cols = retained_columns(task, traj.params.K, traj.params.J);
  if (stats.col_min.size() < cols.first + cols.count || stats.col_max.size() < cols.first + cols.count)
    throw ConfigError("normalization stats do not cover the trajectory's columns");
  for (std::size_t c = cols.first; c < cols.first + cols.count; ++c)
    if (!(stats.col_max[c] > stats.col_min[c])) throw DegenerateColumn(c);

  const auto rows = traj.states.rows();
  RowMatrix image(rows, static_cast<Eigen::Index>(cols.count));
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols.count; ++c) {
      const std::size_t src = cols.first + c;
      const double v = (traj.states(r, static_cast<Eigen::Index>(src)) - stats.col_min[src]) /
                       (stats.col_max[src] - stats.col_min[src]);
      image(r, static_cast<Eigen::Index>(c)) = std::clamp(v, 0.0, 1.0);
    }
  }
  return image;
}

struct ChunkedImage {
  std::vector<RowMatrix> chunks;
  std::size_t dropped_rows = 0;
};

/// Consecutive non-overlapping row blocks; trailing rows that do not fill a
/// block are dropped and counted.
inline ChunkedImage chunk_image(const RowMatrix& image, std::size_t height = 20) {
  if (height == 0) throw ConfigError("chunk height must be >= 1");
  ChunkedImage out;
  const auto rows = static_cast<std::size_t>(image.rows());
  const std::size_t n = rows / height;
  out.dropped_rows = rows - n * height;
  out.chunks.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.chunks.emplace_back(image.middleRows(static_cast<Eigen::Index>(i * height), static_cast<Eigen::Index>(height)));
  return out;
}

// ---------------------------------------------------------------------------
// Chunk dataset

struct SimRecord {
  std::uint32_t id = 0;
  ModelParams params;
  std::string trajectory_digest;
  std::size_t n_chunks = 0;
  std::size_t dropped_rows = 0;
};

struct ChunkView {
  std::span<const float> pixels;  // height x width, row-major
  Target target;
  std::uint32_t sim_id;
  std::uint32_t chunk_index;
  Split split;
};

struct ChunkDataset {
  TaskKind task = TaskKind::XY;
  bool test_mode = false;
  std::size_t height = 20;
  std::size_t width = 20;
  std::size_t K = 4;
  std::size_t J = 4;

  std::vector<float> pixels;  // chunk-major
  std::vector<std::uint32_t> sim_ids;
  std::vector<std::uint32_t> chunk_indices;
  std::vector<Split> splits;

  std::vector<SimRecord> sims;  // sims[i].id == i
  NormalizationStats stats;

  std::uint64_t split_seed = 0;
  double train_fraction = 0.9;
  double holdout_sim_fraction = 0.2;
  IntegratorConfig integrator;

  std::size_t size() const noexcept { return sim_ids.size(); }
  std::size_t chunk_size() const noexcept { return height * width; }

  std::span<const float> pixels_of(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * chunk_size(), chunk_size());
  }

  Target target(std::size_t i) const { return target_of(sims.at(sim_ids[i]).params); }

  ChunkView chunk(std::size_t i) const {
    return {pixels_of(i), target(i), sim_ids[i], chunk_indices[i], splits[i]};
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  friend bool operator==(const ChunkDataset& a, const ChunkDataset& b) {
    auto same_sims = [&] {
      if (a.sims.size() != b.sims.size()) return false;
      for (std::size_t i = 0; i < a.sims.size(); ++i) {
        const auto& x = a.sims[i];
        const auto& y = b.sims[i];
        if (x.id != y.id || !(x.params == y.params) || x.trajectory_digest != y.trajectory_digest ||
            x.n_chunks != y.n_chunks || x.dropped_rows != y.dropped_rows)
          return false;
      }
      return true;
    };
    return a.task == b.task && a.test_mode == b.test_mode && a.height == b.height && a.width == b.width &&
           a.K == b.K && a.J == b.J && a.pixels == b.pixels && a.sim_ids == b.sim_ids &&
           a.chunk_indices == b.chunk_indices && a.splits == b.splits && same_sims() && a.stats == b.stats &&
           a.split_seed == b.split_seed && a.train_fraction == b.train_fraction &&
           a.holdout_sim_fraction == b.holdout_sim_fraction && a.integrator.dt == b.integrator.dt &&
           a.integrator.n_steps == b.integrator.n_steps && a.integrator.burn_in == b.integrator.burn_in;
  }
};

namespace detail {

inline std::size_t rounded_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

/// Split labels per simulation, indexed [sim][chunk].
inline std::vector<std::vector<Split>> assign_splits(const std::vector<std::size_t>& chunk_counts, bool test_mode,
                                                     std::uint64_t split_seed, double train_fraction,
                                                     double holdout_sim_fraction) {
  const std::size_t n_sims = chunk_counts.size();
  std::vector<std::vector<Split>> labels(n_sims);
  if (!test_mode) {
    for (std::size_t s = 0; s < n_sims; ++s) {
      const std::size_t n = chunk_counts[s];
      if (n < 2) throw InsufficientData("simulation " + std::to_string(s) + " has fewer than 2 chunks");
      const std::size_t n_train = std::clamp<std::size_t>(rounded_count(train_fraction, n), 1, n - 1);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(split_seed, "chunks/" + std::to_string(s)));
      std::shuffle(order.begin(), order.end(), rng);
      labels[s].assign(n, Split::TEST);
      for (std::size_t i = 0; i < n_train; ++i) labels[s][order[i]] = Split::TRAIN;
    }
  } else {
    const std::size_t n_test = rounded_count(holdout_sim_fraction, n_sims);
    if (n_test == 0 || n_test >= n_sims)
      throw InsufficientData("held-out simulation split leaves one side empty");
    std::vector<std::size_t> order(n_sims);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(split_seed, "sims"));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < n_sims; ++s) labels[s].assign(chunk_counts[s], Split::TRAIN);
    for (std::size_t i = 0; i < n_test; ++i) labels[order[i]].assign(chunk_counts[order[i]], Split::TEST);
  }
  return labels;
}

}  // namespace detail

/// Column min/max over the raw rows of TRAIN chunks and target mean/sigma over
/// TRAIN chunks, reduced sequentially in sim-then-chunk order.
inline NormalizationStats fit_normalization(const std::vector<Trajectory>& trajectories,
                                            const std::vector<std::vector<Split>>& labels, std::size_t height) {
  const std::size_t width = trajectories.front().params.width();
  NormalizationStats stats;
  stats.col_min.assign(width, std::numeric_limits<double>::infinity());
  stats.col_max.assign(width, -std::numeric_limits<double>::infinity());
  Target sum{}, sum_sq{};
  std::size_t n_train = 0;
  std::vector<Target> train_targets;
  for (std::size_t s = 0; s < trajectories.size(); ++s) {
    const auto& traj = trajectories[s];
    for (std::size_t ci = 0; ci < labels[s].size(); ++ci) {
      if (labels[s][ci] != Split::TRAIN) continue;
      for (std::size_t r = ci * height; r < (ci + 1) * height; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          const double v = traj.states(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
          stats.col_min[c] = std::min(stats.col_min[c], v);
          stats.col_max[c] = std::max(stats.col_max[c], v);
        }
      }
      const Target t = target_of(traj.params);
      for (int p = 0; p < 3; ++p) sum[p] += t[p];
      train_targets.push_back(t);
      ++n_train;
    }
  }
  if (n_train == 0) throw InsufficientData("no TRAIN chunks");
  for (int p = 0; p < 3; ++p) stats.target_mean[p] = sum[p] / static_cast<double>(n_train);
  for (const auto& t : train_targets)
    for (int p = 0; p < 3; ++p) sum_sq[p] += (t[p] - stats.target_mean[p]) * (t[p] - stats.target_mean[p]);
  for (int p = 0; p < 3; ++p) {
    stats.target_sigma[p] = std::sqrt(sum_sq[p] / static_cast<double>(n_train));
    if (!(stats.target_sigma[p] > 0.0)) throw InsufficientData("training targets have zero spread");
  }
  return stats;
}

inline ChunkDataset build_dataset(const std::vector<Trajectory>& trajectories, TaskKind task, bool test_mode,
                                  std::uint64_t split_seed, double train_fraction = 0.9,
                                  double holdout_sim_fraction = 0.2, std::size_t jobs = 1,
                                  std::size_t height = 20) {
  if (trajectories.size() < 2) throw InsufficientData("need at least 2 trajectories");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0,1)");
  if (!(holdout_sim_fraction > 0.0 && holdout_sim_fraction < 1.0))
    throw ConfigError("holdout_sim_fraction must be in (0,1)");
  const auto& p0 = trajectories.front().params;
  for (const auto& t : trajectories)
    if (t.params.K != p0.K || t.params.J != p0.J) throw ConfigError("trajectories disagree on (K, J)");

  std::vector<std::size_t> chunk_counts;
  for (const auto& t : trajectories) chunk_counts.push_back(t.n_steps() / height);
  const auto labels = detail::assign_splits(chunk_counts, test_mode, split_seed, train_fraction, holdout_sim_fraction);

  ChunkDataset ds;
  ds.task = task;
  ds.test_mode = test_mode;
  ds.height = height;
  ds.K = p0.K;
  ds.J = p0.J;
  ds.width = retained_columns(task, p0.K, p0.J).count;
  ds.split_seed = split_seed;
  ds.train_fraction = train_fraction;
  ds.holdout_sim_fraction = holdout_sim_fraction;
  ds.integrator = trajectories.front().config;
  ds.stats = fit_normalization(trajectories, labels, height);

  std::vector<ChunkedImage> rendered(trajectories.size());
  parallel_for(trajectories.size(), jobs, [&](std::size_t s) {
    rendered[s] = chunk_image(render_image(trajectories[s], ds.stats, task), height);
  });

  const std::size_t total = std::accumulate(chunk_counts.begin(), chunk_counts.end(), std::size_t{0});
  ds.pixels.reserve(total * ds.chunk_size());
  for (std::size_t s = 0; s < trajectories.size(); ++s) {
    ds.sims.push_back({static_cast<std::uint32_t>(s), trajectories[s].params, trajectories[s].digest(),
                       chunk_counts[s], rendered[s].dropped_rows});
    for (std::size_t ci = 0; ci < rendered[s].chunks.size(); ++ci) {
      const auto& chunk = rendered[s].chunks[ci];
      for (Eigen::Index i = 0; i < chunk.size(); ++i) ds.pixels.push_back(static_cast<float>(chunk.data()[i]));
      ds.sim_ids.push_back(static_cast<std::uint32_t>(s));
      ds.chunk_indices.push_back(static_cast<std::uint32_t>(ci));
      ds.splits.push_back(labels[s][ci]);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: <path> holds a 24-byte header + f32 payload, <path>.json the manifest.

inline constexpr std::uint32_t kDatasetFormatVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 24;

inline std::string payload_digest(const ChunkDataset& ds) {
  Digest d;
  d.update_values(std::span<const float>(ds.pixels));
  return d.hex();
}

inline nlohmann::json dataset_manifest(const ChunkDataset& ds) {
  nlohmann::json sims = nlohmann::json::array();
  for (const auto& s : ds.sims)
    sims.push_back({{"id", s.id},
                    {"params", params_to_json(s.params)},
                    {"trajectory_digest", s.trajectory_digest},
                    {"n_chunks", s.n_chunks},
                    {"dropped_rows", s.dropped_rows}});
  std::string split_codes(ds.size(), 'T');
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.splits[i] == Split::TEST) split_codes[i] = 'E';
  return {
      {"format", "l96-dataset"},
      {"version", kDatasetFormatVersion},
      {"task", to_string(ds.task)},
      {"test_mode", ds.test_mode},
      {"height", ds.height},
      {"width", ds.width},
      {"K", ds.K},
      {"J", ds.J},
      {"chunk_count", ds.size()},
      {"stats",
       {{"col_min", ds.stats.col_min},
        {"col_max", ds.stats.col_max},
        {"target_mean", ds.stats.target_mean},
        {"target_sigma", ds.stats.target_sigma}}},
      {"split_seed", ds.split_seed},
      {"train_fraction", ds.train_fraction},
      {"holdout_sim_fraction", ds.holdout_sim_fraction},
      {"integrator", config_to_json(ds.integrator)},
      {"sims", sims},
      {"sim_ids", ds.sim_ids},
      {"chunk_indices", ds.chunk_indices},
      {"splits", split_codes},
      {"payload_digest", payload_digest(ds)},
  };
}

inline void save_dataset(const ChunkDataset& ds, const std::string& path) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path);
    out.write("L96D", 4);
    io::write_le<std::uint32_t>(out, kDatasetFormatVersion);
    io::write_le<std::uint64_t>(out, ds.size());
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.height));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.width));
    io::write_array_le(out, std::span<const float>(ds.pixels));
    if (!out) throw ConfigError("write failed: " + path);
  }
  std::ofstream(path + ".json") << dataset_manifest(ds).dump() << "\n";
}

inline ChunkDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path);
  io::expect_magic(in, "L96D");
  if (io::read_le<std::uint32_t>(in) != kDatasetFormatVersion) throw FormatError("unsupported dataset version");
  const auto count = io::read_le<std::uint64_t>(in);
  const auto height = io::read_le<std::uint32_t>(in);
  const auto width = io::read_le<std::uint32_t>(in);
  const std::uint64_t expected = kDatasetHeaderBytes + count * height * width * sizeof(float);
  if (io::stream_size(in) != expected) throw FormatError("dataset payload size mismatch (truncated file?)");

  ChunkDataset ds;
  ds.height = height;
  ds.width = width;
  ds.pixels.resize(count * height * width);
  io::read_array_le(in, std::span<float>(ds.pixels));

  std::ifstream meta_in(path + ".json");
  if (!meta_in) throw FormatError("missing dataset manifest " + path + ".json");
  std::string digest;
  try {
    const auto m = nlohmann::json::parse(meta_in);
    if (m.at("format") != "l96-dataset" || m.at("version") != kDatasetFormatVersion)
      throw FormatError("manifest format/version mismatch");
    if (m.at("chunk_count").get<std::uint64_t>() != count || m.at("height").get<std::size_t>() != height ||
        m.at("width").get<std::size_t>() != width)
      throw FormatError("manifest disagrees with binary header");
    ds.task = task_from_string(m.at("task").get<std::string>());
    ds.test_mode = m.at("test_mode").get<bool>();
    ds.K = m.at("K").get<std::size_t>();
    ds.J = m.at("J").get<std::size_t>();
    const auto& st = m.at("stats");
    ds.stats.col_min = st.at("col_min").get<std::vector<double>>();
    ds.stats.col_max = st.at("col_max").get<std::vector<double>>();
    ds.stats.target_mean = st.at("target_mean").get<Target>();
    ds.stats.target_sigma = st.at("target_sigma").get<Target>();
    ds.split_seed = m.at("split_seed").get<std::uint64_t>();
    ds.train_fraction = m.at("train_fraction").get<double>();
    ds.holdout_sim_fraction = m.at("holdout_sim_fraction").get<double>();
    ds.integrator = config_from_json(m.at("integrator"));
    for (const auto& s : m.at("sims")) {
      ds.sims.push_back({s.at("id").get<std::uint32_t>(), params_from_json(s.at("params")),
                         s.at("trajectory_digest").get<std::string>(), s.at("n_chunks").get<std::size_t>(),
                         s.at("dropped_rows").get<std::size_t>()});
    }
    ds.sim_ids = m.at("sim_ids").get<std::vector<std::uint32_t>>();
    ds.chunk_indices = m.at("chunk_indices").get<std::vector<std::uint32_t>>();
    const auto codes = m.at("splits").get<std::string>();
    if (ds.sim_ids.size() != count || ds.chunk_indices.size() != count || codes.size() != count)
      throw FormatError("manifest chunk tables disagree with chunk count");
    for (char ch : codes) {
      if (ch != 'T' && ch != 'E') throw FormatError("bad split code");
      ds.splits.push_back(ch == 'T' ? Split::TRAIN : Split::TEST);
    }
    digest = m.at("payload_digest").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset manifest: ") + e.what());
  }
  for (std::size_t i = 0; i < ds.sims.size(); ++i)
    if (ds.sims[i].id != i) throw FormatError("sim ids must be dense and ordered");
  for (auto id : ds.sim_ids)
    if (id >= ds.sims.size()) throw FormatError("chunk refers to unknown sim id");
  if (digest != payload_digest(ds)) throw ChecksumError("dataset payload digest mismatch");
  return ds;
}

}  // namespace l96
