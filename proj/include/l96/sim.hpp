#pragma once

// Two-timescale Lorenz-96 system and its RK4 integrator.
//
// State layout used throughout: a flat row [X_1..X_K | Y_1,1..Y_J,1, Y_1,2 .. Y_J,K]
// where fast variable (j,k) sits at K + (k-1)*J + (j-1). The fast variables form a
// single ring of length J*K, so the neighbour after (J,k) is (1,k+1).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "l96/common.hpp"

namespace l96 {

struct ModelParams {
  double b = 10.0;
  double c = 10.0;
  double h = 1.0;
  double F = 10.0;
  std::size_t K = 4;
  std::size_t J = 4;

  std::size_t n_fast() const noexcept { return J * K; }
  std::size_t width() const noexcept { return K + J * K; }

  void validate() const {
    if (K < 4 || J < 4) throw ConfigError("K and J must both be >= 4");
    if (!(b > 0.0) || !std::isfinite(b)) throw ConfigError("b must be finite and > 0");
    if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("c must be finite and > 0");
    if (!std::isfinite(h)) throw ConfigError("h must be finite");
    if (!std::isfinite(F)) throw ConfigError("F must be finite");
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct SimState {
  std::vector<double> x;  // K slow variables
  std::vector<double> y;  // J*K fast variables, j fastest

  bool consistent_with(const ModelParams& p) const noexcept {
    return x.size() == p.K && y.size() == p.n_fast();
  }

  std::vector<double> flat() const {
    std::vector<double> row(x);
    row.insert(row.end(), y.begin(), y.end());
    return row;
  }

  static SimState from_flat(std::span<const double> row, const ModelParams& p) {
    SimState s;
    s.x.assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(p.K));
    s.y.assign(row.begin() + static_cast<std::ptrdiff_t>(p.K), row.end());
    return s;
  }

  friend bool operator==(const SimState&, const SimState&) = default;
};

struct IntegratorConfig {
  double dt = 0.005;
  std::size_t n_steps = 50000;
  std::size_t burn_in = 0;

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("dt must be > 0");
    if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  }
};

struct Trajectory {
  ModelParams params;
  RowMatrix states;  // n_steps x (K + J*K)
  double dt = 0.0;
  SimState init;
  IntegratorConfig config;

  std::size_t n_steps() const noexcept { return static_cast<std::size_t>(states.rows()); }

  std::string digest() const {
    Digest d;
    d.update_values(std::span<const double>(states.data(), static_cast<std::size_t>(states.size())));
    return d.hex();
  }
};

// ---------------------------------------------------------------------------

/// Fixed initial state shared by every simulation: X_1 = 1.01, other X = 1,
/// all Y = 0.1.
inline SimState default_init(const ModelParams& p) {
  SimState s;
  s.x.assign(p.K, 1.0);
  s.x[0] = 1.01;
  s.y.assign(p.n_fast(), 0.1);
  return s;
}

inline void mean_fast(std::span<const double> y, const ModelParams& p, std::span<double> out) noexcept {
  const double inv_j = 1.0 / static_cast<double>(p.J);
  for (std::size_t k = 0; k < p.K; ++k) {
    double sum = 0.0;
    for (std::size_t j = 0; j < p.J; ++j) sum += y[k * p.J + j];
    out[k] = sum * inv_j;
  }
}

inline std::vector<double> mean_fast(const SimState& state, const ModelParams& p) {
  std::vector<double> out(p.K);
  mean_fast(state.y, p, out);
  return out;
}

/// Tendencies on the flat layout. Throws IntegrationDiverged (step -1) naming the
/// first non-finite output index.
inline void tendencies(std::span<const double> s, const ModelParams& p, std::span<double> out) {
  const std::size_t K = p.K;
  const std::size_t N = p.n_fast();
  const double* X = s.data();
  const double* Y = s.data() + K;
  double* dX = out.data();
  double* dY = out.data() + K;

  const double inv_j = 1.0 / static_cast<double>(p.J);
  const double hc = p.h * p.c;
  for (std::size_t k = 0; k < K; ++k) {
    double ybar = 0.0;
    for (std::size_t j = 0; j < p.J; ++j) ybar += Y[k * p.J + j];
    ybar *= inv_j;
    const double xm1 = X[(k + K - 1) % K];
    const double xm2 = X[(k + K - 2) % K];
    const double xp1 = X[(k + 1) % K];
    dX[k] = -xm1 * (xm2 - xp1) - X[k] + p.F - hc * ybar;
  }

  const double h_over_j = p.h * inv_j;
  for (std::size_t m = 0; m < N; ++m) {
    const double yp1 = Y[(m + 1) % N];
    const double yp2 = Y[(m + 2) % N];
    const double ym1 = Y[(m + N - 1) % N];
    dY[m] = p.c * (-p.b * yp1 * (yp2 - ym1) - Y[m] + h_over_j * X[m / p.J]);
  }

  for (std::size_t i = 0; i < K + N; ++i)
    if (!std::isfinite(out[i])) throw IntegrationDiverged(-1, i);
}

inline SimState tendencies(const SimState& state, const ModelParams& p) {
  const auto row = state.flat();
  std::vector<double> d(row.size());
  tendencies(row, p, d);
  return SimState::from_flat(d, p);
}

// ---------------------------------------------------------------------------
// Classical RK4

/// Scratch buffers for rk4_step so the stepping loop does not allocate.
struct Rk4Workspace {
  std::vector<double> k1, k2, k3, k4, tmp;

  void resize(std::size_t n) {
    for (auto* v : {&k1, &k2, &k3, &k4, &tmp}) v->resize(n);
  }
};

/// One RK4 step in place. deriv(in, out) writes the derivative of `in`.
template <class Deriv>
void rk4_step(std::span<double> y, double dt, Deriv&& deriv, Rk4Workspace& ws) {
  const std::size_t n = y.size();
  ws.resize(n);
  deriv(std::span<const double>(y), std::span<double>(ws.k1));
  for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = y[i] + 0.5 * dt * ws.k1[i];
  deriv(std::span<const double>(ws.tmp), std::span<double>(ws.k2));
  for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = y[i] + 0.5 * dt * ws.k2[i];
  deriv(std::span<const double>(ws.tmp), std::span<double>(ws.k3));
  for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = y[i] + dt * ws.k3[i];
  deriv(std::span<const double>(ws.tmp), std::span<double>(ws.k4));
  for (std::size_t i = 0; i < n; ++i)
    y[i] += dt / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
}

inline void rk4_step(std::span<double> row, const ModelParams& p, double dt, Rk4Workspace& ws) {
  rk4_step(row, dt, [&p](std::span<const double> in, std::span<double> out) { tendencies(in, p, out); },
           ws);
  for (std::size_t i = 0; i < row.size(); ++i)
    if (!std::isfinite(row[i])) throw IntegrationDiverged(-1, i);
}

inline SimState rk4_step(const SimState& state, const ModelParams& p, double dt) {
  if (!(dt > 0.0)) throw ConfigError("dt must be > 0");
  if (!state.consistent_with(p)) throw ConfigError("state shape does not match params");
  auto row = state.flat();
  Rk4Workspace ws;
  rk4_step(std::span<double>(row), p, dt, ws);
  return SimState::from_flat(row, p);
}

/// Integrates burn_in discarded steps, then records n_steps rows. Deterministic:
/// identical inputs yield bit-identical trajectories.
inline Trajectory simulate(const ModelParams& p, const SimState& init, const IntegratorConfig& config) {
  p.validate();
  config.validate();
  if (!init.consistent_with(p)) throw ConfigError("initial state shape does not match params");

  Trajectory traj;
  traj.params = p;
  traj.dt = config.dt;
  traj.init = init;
  traj.config = config;
  traj.states.resize(static_cast<Eigen::Index>(config.n_steps), static_cast<Eigen::Index>(p.width()));

  auto row = init.flat();
  if (!all_finite(row)) throw ConfigError("initial state contains non-finite values");
  Rk4Workspace ws;
  ws.resize(row.size());
  const std::size_t total = config.burn_in + config.n_steps;
  for (std::size_t step = 0; step < total; ++step) {
    try {
      rk4_step(std::span<double>(row), p, config.dt, ws);
    } catch (const IntegrationDiverged& e) {
      throw IntegrationDiverged(static_cast<std::int64_t>(step), e.index());
    }
    if (step >= config.burn_in) {
      const auto r = static_cast<Eigen::Index>(step - config.burn_in);
      std::copy(row.begin(), row.end(), traj.states.row(r).data());
    }
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Trajectory export: 32-byte header + row-major f64 payload, sibling <path>.json.

inline constexpr std::uint32_t kTrajectoryFormatVersion = 1;

inline nlohmann::json params_to_json(const ModelParams& p) {
  return {{"b", p.b}, {"c", p.c}, {"h", p.h}, {"F", p.F}, {"K", p.K}, {"J", p.J}};
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  ModelParams p;
  p.b = j.at("b").get<double>();
  p.c = j.at("c").get<double>();
  p.h = j.at("h").get<double>();
  p.F = j.at("F").get<double>();
  p.K = j.at("K").get<std::size_t>();
  p.J = j.at("J").get<std::size_t>();
  return p;
}

inline nlohmann::json config_to_json(const IntegratorConfig& c) {
  return {{"dt", c.dt}, {"n_steps", c.n_steps}, {"burn_in", c.burn_in}};
}

inline IntegratorConfig config_from_json(const nlohmann::json& j) {
  IntegratorConfig c;
  c.dt = j.at("dt").get<double>();
  c.n_steps = j.at("n_steps").get<std::size_t>();
  c.burn_in = j.at("burn_in").get<std::size_t>();
  return c;
}

inline void save_trajectory(const Trajectory& traj, const std::string& path) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path);
    out.write("L96T", 4);
    io::write_le<std::uint32_t>(out, kTrajectoryFormatVersion);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(traj.params.K));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(traj.params.J));
    io::write_le<std::uint64_t>(out, traj.n_steps());
    io::write_le<double>(out, traj.dt);
    io::write_array_le(out, std::span<const double>(traj.states.data(), static_cast<std::size_t>(traj.states.size())));
    if (!out) throw ConfigError("write failed: " + path);
  }
  nlohmann::json meta = {
      {"format", "l96-trajectory"},
      {"version", kTrajectoryFormatVersion},
      {"params", params_to_json(traj.params)},
      {"init", {{"x", traj.init.x}, {"y", traj.init.y}}},
      {"config", config_to_json(traj.config)},
      {"digest", traj.digest()},
  };
  std::ofstream(path + ".json") << meta.dump(2) << "\n";
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  io::expect_magic(in, "L96T");
  if (io::read_le<std::uint32_t>(in) != kTrajectoryFormatVersion) throw FormatError("unsupported trajectory version");
  const auto K = io::read_le<std::uint32_t>(in);
  const auto J = io::read_le<std::uint32_t>(in);
  const auto n = io::read_le<std::uint64_t>(in);
  const double dt = io::read_le<double>(in);
  const std::uint64_t width = K + static_cast<std::uint64_t>(J) * K;
  if (io::stream_size(in) != 32 + n * width * sizeof(double)) throw FormatError("trajectory payload size mismatch");

  Trajectory traj;
  traj.dt = dt;
  traj.states.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(width));
  io::read_array_le(in, std::span<double>(traj.states.data(), static_cast<std::size_t>(traj.states.size())));

  std::ifstream meta_in(path + ".json");
  if (!meta_in) throw FormatError("missing metadata " + path + ".json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_in);
    traj.params = params_from_json(meta.at("params"));
    traj.config = config_from_json(meta.at("config"));
    traj.init.x = meta.at("init").at("x").get<std::vector<double>>();
    traj.init.y = meta.at("init").at("y").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad trajectory metadata: ") + e.what());
  }
  if (traj.params.K != K || traj.params.J != J) throw FormatError("metadata shape disagrees with header");
  if (meta.value("digest", "") != traj.digest()) throw ChecksumError("trajectory digest mismatch");
  return traj;
}

}  // namespace l96
