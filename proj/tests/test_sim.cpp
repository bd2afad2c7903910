#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "l96/sim.hpp"

namespace {

using namespace l96;

ModelParams canonical() { return ModelParams{10.0, 10.0, 1.0, 10.0, 4, 4}; }

SimState random_state(const ModelParams& p, std::mt19937_64& rng, double scale = 5.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  SimState s;
  for (std::size_t k = 0; k < p.K; ++k) s.x.push_back(d(rng));
  for (std::size_t m = 0; m < p.n_fast(); ++m) s.y.push_back(d(rng) * 0.2);
  return s;
}

ModelParams random_params(std::mt19937_64& rng) {
  ModelParams p;
  p.b = std::uniform_real_distribution<double>(7, 13)(rng);
  p.c = std::uniform_real_distribution<double>(7, 13)(rng);
  p.h = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
  return p;
}

// Oracle indexing: fast variable (j, k) with 1-based j in [1, J], k in [1, K].
// Stepping j past J moves to the next slow sector; stepping below 1 to the previous.
double y_at(const SimState& s, const ModelParams& p, long j, long k) {
  const long J = static_cast<long>(p.J), K = static_cast<long>(p.K);
  while (j > J) { j -= J; ++k; }
  while (j < 1) { j += J; --k; }
  k = ((k - 1) % K + K) % K + 1;
  return s.y[static_cast<std::size_t>((k - 1) * J + (j - 1))];
}

double x_at(const SimState& s, const ModelParams& p, long k) {
  const long K = static_cast<long>(p.K);
  k = ((k - 1) % K + K) % K + 1;
  return s.x[static_cast<std::size_t>(k - 1)];
}

double ybar_oracle(const SimState& s, const ModelParams& p, long k) {
  std::vector<double> block;
  for (long j = 1; j <= static_cast<long>(p.J); ++j) block.push_back(y_at(s, p, j, k));
  return std::accumulate(block.begin(), block.end(), 0.0) / static_cast<double>(p.J);
}

double dx_oracle(const SimState& s, const ModelParams& p, long k) {
  return -x_at(s, p, k - 1) * (x_at(s, p, k - 2) - x_at(s, p, k + 1)) - x_at(s, p, k) + p.F -
         p.h * p.c * ybar_oracle(s, p, k);
}

double dy_oracle(const SimState& s, const ModelParams& p, long j, long k) {
  const double rhs = -p.b * y_at(s, p, j + 1, k) * (y_at(s, p, j + 2, k) - y_at(s, p, j - 1, k)) - y_at(s, p, j, k) +
                     p.h / static_cast<double>(p.J) * x_at(s, p, k);
  return p.c * rhs;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

TEST(ModelParams, RejectsDegenerateShapesAndNonPositiveCoefficients) {
  auto p = canonical();
  p.K = 3;
  EXPECT_THROW(p.validate(), ConfigError);
  p = canonical();
  p.c = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = canonical();
  p.h = std::nan("");
  EXPECT_THROW(p.validate(), ConfigError);
  EXPECT_NO_THROW(canonical().validate());
}

TEST(MeanFast, ZeroState) {
  const auto p = canonical();
  SimState s{std::vector<double>(4, 0.0), std::vector<double>(16, 0.0)};
  for (double v : mean_fast(s, p)) EXPECT_EQ(v, 0.0);
}

TEST(MeanFast, ArithmeticMeanOfFirstSector) {
  const auto p = canonical();
  SimState s{std::vector<double>(4, 0.0), std::vector<double>(16, 0.0)};
  s.y[0] = 1;
  s.y[1] = 2;
  s.y[2] = 3;
  s.y[3] = 4;
  EXPECT_DOUBLE_EQ(mean_fast(s, p)[0], 2.5);
}

TEST(MeanFast, MatchesIndependentSummation) {
  std::mt19937_64 rng(1);
  const auto p = canonical();
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_state(p, rng);
    const auto got = mean_fast(s, p);
    for (long k = 1; k <= 4; ++k) EXPECT_LE(rel_err(got[k - 1], ybar_oracle(s, p, k)), 1e-15);
  }
}

TEST(Tendencies, ZeroStateGivesForcing) {
  auto p = canonical();
  p.F = 8.5;
  SimState s{std::vector<double>(4, 0.0), std::vector<double>(16, 0.0)};
  const auto d = tendencies(s, p);
  for (double v : d.x) EXPECT_EQ(v, 8.5);
  for (double v : d.y) EXPECT_EQ(v, 0.0);
}

TEST(Tendencies, DecoupledReducesToSingleScale) {
  auto p = canonical();
  p.h = 0.0;
  std::mt19937_64 rng(2);
  auto s = random_state(p, rng);
  std::fill(s.y.begin(), s.y.end(), 0.0);
  const auto d = tendencies(s, p);
  for (double v : d.y) EXPECT_EQ(v, 0.0);
  const auto& X = s.x;
  for (std::size_t k = 0; k < 4; ++k) {
    const double single = -X[(k + 3) % 4] * (X[(k + 2) % 4] - X[(k + 1) % 4]) - X[k] + p.F;
    EXPECT_DOUBLE_EQ(d.x[k], single);
  }
}

TEST(Tendencies, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(3);
  const auto p = canonical();
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_state(p, rng);
    const auto d = tendencies(s, p);
    for (long k = 1; k <= 4; ++k) {
      EXPECT_LE(rel_err(d.x[k - 1], dx_oracle(s, p, k)), 1e-14);
      for (long j = 1; j <= 4; ++j) {
        // rel error is ill-posed when the value nearly cancels; compare against term scale
        const double want = dy_oracle(s, p, j, k);
        const double got = d.y[static_cast<std::size_t>((k - 1) * 4 + (j - 1))];
        EXPECT_LE(std::abs(got - want), 1e-14 * std::max(1.0, std::abs(want))) << "j=" << j << " k=" << k;
      }
    }
  }
}

TEST(Tendencies, LargerRingsUseFlatFastNeighbours) {
  std::mt19937_64 rng(4);
  ModelParams p = canonical();
  p.K = 5;
  p.J = 6;
  const auto s = random_state(p, rng);
  const auto d = tendencies(s, p);
  for (long k = 1; k <= 5; ++k)
    for (long j = 1; j <= 6; ++j) {
      const double want = dy_oracle(s, p, j, k);
      EXPECT_NEAR(d.y[static_cast<std::size_t>((k - 1) * 6 + (j - 1))], want, 1e-13 * std::max(1.0, std::abs(want)));
    }
}

TEST(Tendencies, NonFiniteOutputReportsIndex) {
  const auto p = canonical();
  SimState s{std::vector<double>(4, 0.0), std::vector<double>(16, 0.0)};
  s.y[5] = std::numeric_limits<double>::infinity();
  try {
    tendencies(s, p);
    FAIL() << "expected IntegrationDiverged";
  } catch (const IntegrationDiverged& e) {
    EXPECT_EQ(e.step(), -1);
    EXPECT_LT(e.index(), 20u);
  }
}

// --- Conservation identities ----------------------------------------------

TEST(Invariants, QuadraticAdvectionAndCouplingAreEnergyNeutral) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = random_params(rng);
    const auto s = random_state(p, rng);
    const auto& X = s.x;
    const auto& Y = s.y;
    const std::size_t K = p.K, N = p.n_fast();

    double slow = 0.0, slow_mag = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double term = X[k] * (-X[(k + K - 1) % K] * (X[(k + K - 2) % K] - X[(k + 1) % K]));
      slow += term;
      slow_mag += std::abs(term);
    }
    EXPECT_LE(std::abs(slow), 1e-10 * slow_mag);

    double fast = 0.0, fast_mag = 0.0;
    for (std::size_t m = 0; m < N; ++m) {
      const double term = Y[m] * (-p.b * Y[(m + 1) % N] * (Y[(m + 2) % N] - Y[(m + N - 1) % N]));
      fast += term;
      fast_mag += std::abs(term);
    }
    EXPECT_LE(std::abs(fast), 1e-10 * fast_mag);

    const auto ybar = mean_fast(s, p);
    double coupling = 0.0, coupling_mag = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double t = X[k] * (-p.h * p.c * ybar[k]);
      coupling += t;
      coupling_mag += std::abs(t);
    }
    for (std::size_t m = 0; m < N; ++m) {
      const double t = Y[m] * (p.c * p.h / static_cast<double>(p.J)) * X[m / p.J];
      coupling += t;
      coupling_mag += std::abs(t);
    }
    EXPECT_LE(std::abs(coupling), 1e-10 * coupling_mag);

    const auto d = tendencies(s, p);
    double energy_rate = 0.0, sum_x = 0.0, sum_x2 = 0.0, sum_y2 = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      energy_rate += X[k] * d.x[k];
      sum_x += X[k];
      sum_x2 += X[k] * X[k];
    }
    for (std::size_t m = 0; m < N; ++m) {
      energy_rate += Y[m] * d.y[m];
      sum_y2 += Y[m] * Y[m];
    }
    const double expected = p.F * sum_x - sum_x2 - p.c * sum_y2;
    const double scale = std::abs(p.F * sum_x) + sum_x2 + p.c * sum_y2;
    EXPECT_LE(std::abs(energy_rate - expected), 1e-8 * scale);
  }
}

TEST(Invariants, RotationEquivariance) {
  std::mt19937_64 rng(6);
  const auto p = canonical();
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_state(p, rng);
    SimState rotated = s;
    std::rotate(rotated.x.begin(), rotated.x.begin() + 1, rotated.x.end());
    std::rotate(rotated.y.begin(), rotated.y.begin() + static_cast<long>(p.J), rotated.y.end());
    auto expected = tendencies(s, p);
    std::rotate(expected.x.begin(), expected.x.begin() + 1, expected.x.end());
    std::rotate(expected.y.begin(), expected.y.begin() + static_cast<long>(p.J), expected.y.end());
    const auto got = tendencies(rotated, p);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(got.x[i], expected.x[i]);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(got.y[i], expected.y[i]);
  }
}

// --- RK4 -------------------------------------------------------------------

TEST(Rk4, FixedPointIsUnchanged) {
  ModelParams p = canonical();
  p.h = 0.0;
  p.F = 0.0;
  SimState s{std::vector<double>(4, 0.0), std::vector<double>(16, 0.0)};
  EXPECT_EQ(rk4_step(s, p, 0.01), s);
}

TEST(Rk4, ScalarDecayLocalError) {
  std::vector<double> y{1.0};
  Rk4Workspace ws;
  rk4_step(std::span<double>(y), 0.1, [](std::span<const double> in, std::span<double> out) { out[0] = -in[0]; }, ws);
  EXPECT_LT(std::abs(y[0] - std::exp(-0.1)), 1e-7);
}

std::vector<double> integrate(const ModelParams& p, std::vector<double> row, double dt, std::size_t steps) {
  Rk4Workspace ws;
  for (std::size_t i = 0; i < steps; ++i) rk4_step(std::span<double>(row), p, dt, ws);
  return row;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Three-level ratio |y(dt) - y(dt/2)| / |y(dt/2) - y(dt/4)| after one time unit from the
// default start. On the attractor the fast scale's Lyapunov growth swamps truncation error.
TEST(Rk4, SelfConvergenceRatioNearSixteen) {
  const auto p = canonical();
  const auto row = default_init(p).flat();
  const double dt = 0.005;
  const auto coarse = integrate(p, row, dt, 200);
  const auto mid = integrate(p, row, dt / 2, 400);
  const auto fine = integrate(p, row, dt / 4, 800);
  const double ratio = max_abs_diff(coarse, mid) / max_abs_diff(mid, fine);
  EXPECT_GE(ratio, 12.0);
  EXPECT_LE(ratio, 20.0);
  EXPECT_GE(std::log2(ratio), 3.5);
}

TEST(Rk4, RejectsNonPositiveStep) {
  const auto p = canonical();
  EXPECT_THROW(rk4_step(default_init(p), p, 0.0), ConfigError);
}

// --- simulate ---------------------------------------------------------------

TEST(Simulate, SingleStepShape) {
  const auto p = canonical();
  const auto t = simulate(p, default_init(p), {0.123, 1, 0});
  EXPECT_EQ(t.states.rows(), 1);
  EXPECT_EQ(t.states.cols(), 20);
}

TEST(Simulate, IsBitDeterministic) {
  const auto p = canonical();
  const auto a = simulate(p, default_init(p), {0.005, 500, 10});
  const auto b = simulate(p, default_init(p), {0.005, 500, 10});
  EXPECT_TRUE(a.states == b.states);
  EXPECT_EQ(a.digest(), b.digest());
}

TEST(Simulate, BurnInDiscardsLeadingSteps) {
  const auto p = canonical();
  const auto full = simulate(p, default_init(p), {0.005, 15, 0});
  const auto tail = simulate(p, default_init(p), {0.005, 5, 10});
  EXPECT_TRUE(tail.states == full.states.bottomRows(5));
}

TEST(Simulate, LongRunStaysBounded) {
  const auto p = canonical();
  const auto t = simulate(p, default_init(p), {0.005, 50000, 0});
  EXPECT_TRUE(t.states.allFinite());
  EXPECT_LT(t.states.leftCols(4).cwiseAbs().maxCoeff(), 25.0);
}

TEST(Simulate, DivergenceCarriesStepIndex) {
  auto p = canonical();
  p.c = 13.0;
  try {
    simulate(p, default_init(p), {0.5, 1000, 0});
    FAIL() << "expected divergence";
  } catch (const IntegrationDiverged& e) {
    EXPECT_GE(e.step(), 0);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(DefaultInit, Definition) {
  const auto p = canonical();
  const auto s = default_init(p);
  EXPECT_EQ(s.x, (std::vector<double>{1.01, 1.0, 1.0, 1.0}));
  EXPECT_EQ(s.y, std::vector<double>(16, 0.1));
}

TEST(DefaultInit, ExactlyOneSlowEntryDiffersFromOne) {
  for (std::size_t K : {4u, 7u, 12u}) {
    ModelParams p = canonical();
    p.K = K;
    const auto s = default_init(p);
    EXPECT_EQ(std::count_if(s.x.begin(), s.x.end(), [](double v) { return v != 1.0; }), 1);
  }
}

TEST(DefaultInit, IndependentOfCouplingParameters) {
  ModelParams a = canonical(), b = canonical();
  b.b = 7.5;
  b.c = 12.0;
  b.h = 0.6;
  EXPECT_EQ(default_init(a), default_init(b));
}

// --- export -----------------------------------------------------------------

class TrajectoryFile : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("l96_traj_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
    path_ = (dir_ / "t.l96t").string();
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::filesystem::path dir_;
  std::string path_;
};

TEST_F(TrajectoryFile, RoundTripAndHeaderLayout) {
  const auto p = canonical();
  const auto t = simulate(p, default_init(p), {0.005, 37, 3});
  save_trajectory(t, path_);
  EXPECT_EQ(std::filesystem::file_size(path_), 32u + 37u * 20u * 8u);
  const auto back = load_trajectory(path_);
  EXPECT_TRUE(back.states == t.states);
  EXPECT_EQ(back.params, t.params);
  EXPECT_EQ(back.config.burn_in, 3u);
  EXPECT_EQ(back.init, t.init);

  std::ifstream in(path_, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "L96T");
}

TEST_F(TrajectoryFile, TruncatedFileIsFormatError) {
  const auto p = canonical();
  save_trajectory(simulate(p, default_init(p), {0.005, 10, 0}), path_);
  std::filesystem::resize_file(path_, 100);
  EXPECT_THROW(load_trajectory(path_), FormatError);
}

TEST_F(TrajectoryFile, BadMagicIsFormatError) {
  std::ofstream(path_, std::ios::binary) << "NOPE0000000000000000000000000000";
  EXPECT_THROW(load_trajectory(path_), FormatError);
}

}  // namespace
