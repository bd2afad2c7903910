#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gradient_check.hpp"
#include "l96/nn/adam.hpp"
#include "l96/nn/loss.hpp"
#include "l96/nn/model.hpp"
#include "test_support.hpp"

namespace {

using namespace l96;
using namespace l96::nn;
using l96::testing::check_layer;
using l96::testing::fill_normal;

// --- finite-difference checks --------------------------------------------------

TEST(GradientCheck, Dense) {
  const auto r = check_layer(Dense(12, 9), {12}, 3, 150, 1);
  EXPECT_GE(r.checked, 300u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, Conv1DOnFlatChannels) {
  const auto r = check_layer(Conv1D(5, 4, 3), {11, 5}, 2, 150, 2);
  EXPECT_GE(r.checked, 300u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, Conv1DOnImageInput) {
  const auto r = check_layer(Conv1D(6, 3, 3), {9, 6, 1}, 2, 120, 3);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, Conv2D) {
  const auto r = check_layer(Conv2D(2, 3, 3, 3), {7, 6, 2}, 2, 150, 4);
  EXPECT_GE(r.checked, 300u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, Conv2DRectangularKernel) {
  const auto r = check_layer(Conv2D(1, 2, 2, 3), {5, 6, 1}, 3, 100, 5);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, MaxPool1D) {
  const auto r = check_layer(MaxPool1D{2}, {9, 4}, 3, 100, 6);
  EXPECT_EQ(r.checked, 100u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, MaxPool2D) {
  const auto r = check_layer(MaxPool2D{2, 2}, {5, 7, 3}, 2, 150, 7);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, LeakyReLU) {
  const auto r = check_layer(LeakyReLU{0.001}, {30}, 4, 120, 8);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, Flatten) {
  const auto r = check_layer(Flatten{}, {4, 3, 2}, 2, 48, 9);
  EXPECT_LT(r.max_rel, 1e-6);
}

TEST(GradientCheck, WeightedMse) {
  const auto r = l96::testing::check_loss(40, 120, 10);
  EXPECT_EQ(r.checked, 120u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradientCheck, WeightedMseTight) {
  const auto r = l96::testing::check_loss(40, 120, 10, 1e-2);
  EXPECT_LT(r.max_rel, 1e-8);
}

TEST(GradientCheck, FullModels) {
  for (auto kind : {ModelKind::FC, ModelKind::CONV1D, ModelKind::CONV2D}) {
    const auto r = l96::testing::check_model(build_model(kind, 20, 16), 3, 12, 11);
    EXPECT_LT(r.max_rel, 1e-4) << to_string(kind);
  }
}

// --- naive-loop oracles for the convolutions --------------------------------

TEST(Conv1DForward, MatchesDirectSummation) {
  std::mt19937_64 rng(20);
  Conv1D conv(4, 3, 3);
  fill_normal(conv.weight, rng);
  fill_normal(conv.bias, rng);
  Tensor x(2, {8, 4});
  fill_normal(x.data, rng);
  Tensor y(2, conv.output_shape(x.shape));
  LayerAux aux;
  conv.forward(x, y, aux);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t f = 0; f < 3; ++f) {
        double s = conv.bias[f];
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t c = 0; c < 4; ++c) s += conv.weight[f * 12 + k * 4 + c] * x.data[n * 32 + (t + k) * 4 + c];
        EXPECT_NEAR(y.data[n * 18 + t * 3 + f], s, 1e-12);
      }
}

TEST(Conv2DForward, MatchesDirectSummation) {
  std::mt19937_64 rng(21);
  Conv2D conv(2, 3, 3, 2);
  fill_normal(conv.weight, rng);
  fill_normal(conv.bias, rng);
  Tensor x(2, {6, 5, 2});
  fill_normal(x.data, rng);
  const auto os = conv.output_shape(x.shape);
  ASSERT_EQ(os, (Shape{4, 4, 3}));
  Tensor y(2, os);
  LayerAux aux;
  conv.forward(x, y, aux);
  // weight layout: filter-major, then (kh, kw, c)
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t f = 0; f < 3; ++f) {
          double s = conv.bias[f];
          for (std::size_t di = 0; di < 3; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj)
              for (std::size_t c = 0; c < 2; ++c)
                s += conv.weight[f * 12 + (di * 2 + dj) * 2 + c] * x.data[n * 60 + ((i + di) * 5 + (j + dj)) * 2 + c];
          EXPECT_NEAR(y.data[n * 48 + (i * 4 + j) * 3 + f], s, 1e-12);
        }
}

TEST(Conv1DForward, ConstantSignalWithZeroSumFiltersGivesBias) {
  std::mt19937_64 rng(22);
  Conv1D conv(3, 4, 3);
  fill_normal(conv.weight, rng);
  fill_normal(conv.bias, rng);
  // make each filter's taps sum to zero per channel so a constant signal cancels
  for (std::size_t f = 0; f < 4; ++f)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += conv.weight[f * 9 + k * 3 + c];
      conv.weight[f * 9 + 2 * 3 + c] -= s;
    }
  Tensor x(1, {10, 3});
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t c = 0; c < 3; ++c) x.data[t * 3 + c] = 0.3 + 0.2 * static_cast<double>(c);
  Tensor y(1, conv.output_shape(x.shape));
  LayerAux aux;
  conv.forward(x, y, aux);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t f = 0; f < 4; ++f) EXPECT_NEAR(y.data[t * 4 + f], conv.bias[f], 1e-12);
}

TEST(Conv1DForward, TranslationEquivariantInInterior) {
  std::mt19937_64 rng(23);
  Conv1D conv(2, 3, 3);
  fill_normal(conv.weight, rng);
  Tensor x(1, {16, 2}), shifted(1, {16, 2});
  // a bump in the interior, then the same bump two steps later
  for (std::size_t c = 0; c < 2; ++c) {
    x.data[5 * 2 + c] = 1.0 + static_cast<double>(c);
    x.data[6 * 2 + c] = -0.5;
    shifted.data[7 * 2 + c] = 1.0 + static_cast<double>(c);
    shifted.data[8 * 2 + c] = -0.5;
  }
  Tensor a(1, conv.output_shape(x.shape)), b(1, conv.output_shape(x.shape));
  LayerAux aux;
  conv.forward(x, a, aux);
  conv.forward(shifted, b, aux);
  for (std::size_t t = 0; t + 2 < 14; ++t)
    for (std::size_t f = 0; f < 3; ++f) EXPECT_DOUBLE_EQ(b.data[(t + 2) * 3 + f], a.data[t * 3 + f]);
}

TEST(Conv2DForward, OneHotPixelHasLocalFootprint) {
  std::mt19937_64 rng(24);
  Conv2D conv(1, 4, 3, 3);
  fill_normal(conv.weight, rng);
  Tensor x(1, {20, 20, 1});
  x.data[10 * 20 + 9] = 1.0;
  Tensor y(1, conv.output_shape(x.shape));
  LayerAux aux;
  conv.forward(x, y, aux);
  for (std::size_t i = 0; i < 18; ++i)
    for (std::size_t j = 0; j < 18; ++j) {
      const bool inside = i >= 8 && i <= 10 && j >= 7 && j <= 9;
      for (std::size_t f = 0; f < 4; ++f) {
        const double v = y.data[(i * 18 + j) * 4 + f];
        if (inside) EXPECT_NE(v, 0.0);
        else EXPECT_EQ(v, 0.0);
      }
    }
}

// --- pooling ------------------------------------------------------------------

TEST(MaxPool, TiesGoToFirstElementInScanOrder) {
  Tensor x(1, {2, 2, 1});
  std::fill(x.data.begin(), x.data.end(), 3.0);
  MaxPool2D pool{2, 2};
  Tensor y(1, pool.output_shape(x.shape));
  LayerAux aux;
  pool.forward(x, y, aux);
  Tensor g(1, y.shape);
  g.data[0] = 1.0;
  Tensor dx(1, x.shape);
  pool.backward(x, g, aux, &dx, {}, {});
  EXPECT_EQ(dx.data, (Buffer{1.0, 0.0, 0.0, 0.0}));

  Tensor x1(1, {4, 1});
  x1.data = {2.0, 2.0, -1.0, -1.0};
  MaxPool1D p1{2};
  Tensor y1(1, p1.output_shape(x1.shape));
  p1.forward(x1, y1, aux);
  Tensor g1(1, y1.shape);
  g1.data = {1.0, 1.0};
  Tensor dx1(1, x1.shape);
  p1.backward(x1, g1, aux, &dx1, {}, {});
  EXPECT_EQ(dx1.data, (Buffer{1.0, 0.0, 1.0, 0.0}));
}

TEST(MaxPool, FloorsOddExtents) {
  EXPECT_EQ(MaxPool1D{2}.output_shape({9, 3}), (Shape{4, 3}));
  EXPECT_EQ((MaxPool2D{2, 2}.output_shape({12, 7, 2})), (Shape{6, 3, 2}));
}

// --- architectures ----------------------------------------------------------------

std::vector<Shape> chain(ModelKind k, std::size_t w) { return build_model(k, 20, w).shape_chain(); }

std::size_t valid_extent(std::size_t n, std::size_t k) { return n - k + 1; }

TEST(Architecture, FcShapes) {
  for (std::size_t w : {20u, 16u}) {
    const auto m = build_fc(20, w);
    const auto& first = std::get<Dense>(m.layers.at(1));
    EXPECT_EQ(first.n_in, 20 * w);
    EXPECT_EQ(first.n_out, 400u);
    EXPECT_EQ(m.output_shape(), (Shape{3}));
    std::vector<std::size_t> widths;
    for (const auto& l : m.layers)
      if (const auto* d = std::get_if<Dense>(&l)) widths.push_back(d->n_out);
    EXPECT_EQ(widths, (std::vector<std::size_t>{400, 200, 60, 3}));
  }
}

TEST(Architecture, Conv1DShapeChain) {
  for (std::size_t w : {20u, 16u}) {
    const auto c = chain(ModelKind::CONV1D, w);
    std::size_t t = valid_extent(valid_extent(20, 3), 3) / 2;
    EXPECT_EQ(t, 8u);
    bool saw_flat = false;
    for (const auto& s : c)
      if (s.size() == 1 && s[0] == t * 32) saw_flat = true;
    EXPECT_TRUE(saw_flat);
    EXPECT_EQ(c.back(), (Shape{3}));
    EXPECT_EQ(c.at(1), (Shape{18, 32}));
  }
}

TEST(Architecture, Conv2DShapeChain) {
  for (std::size_t w : {20u, 16u}) {
    const auto c = chain(ModelKind::CONV2D, w);
    const std::size_t h_out = valid_extent(valid_extent(20, 3), 3) / 2;
    const std::size_t w_out = valid_extent(valid_extent(w, 3), 3) / 2;
    const std::size_t flat = h_out * w_out * 32;
    EXPECT_EQ(flat, w == 20 ? 2048u : 1536u);
    bool saw_flat = false;
    for (const auto& s : c)
      if (s == Shape{flat}) saw_flat = true;
    EXPECT_TRUE(saw_flat) << "W=" << w;
    EXPECT_EQ(c.back(), (Shape{3}));
  }
}

TEST(Architecture, ProbeForwardEmitsThreeOutputs) {
  for (auto k : {ModelKind::FC, ModelKind::CONV1D, ModelKind::CONV2D})
    for (std::size_t w : {20u, 16u}) {
      auto m = build_model(k, 20, w);
      init_weights(m, 5);
      const auto y = predict(m, Tensor(1, {20, w, 1}));
      EXPECT_EQ(y.full_shape(), (Shape{1, 3}));
    }
}

TEST(Architecture, EveryHiddenLayerUsesTheFixedLeakySlope) {
  for (auto k : {ModelKind::FC, ModelKind::CONV1D, ModelKind::CONV2D}) {
    const auto m = build_model(k, 20, 20);
    std::size_t n_act = 0, n_param = 0;
    for (const auto& l : m.layers) {
      if (const auto* a = std::get_if<LeakyReLU>(&l)) {
        EXPECT_EQ(a->alpha, 0.001);
        ++n_act;
      }
      std::visit([&](const auto& x) { n_param += HasParameters<std::decay_t<decltype(x)>> ? 1 : 0; }, l);
    }
    EXPECT_EQ(n_act + 1, n_param);  // everything but the output layer is activated
    EXPECT_TRUE(std::holds_alternative<Dense>(m.layers.back()));
  }
}

TEST(Architecture, ParameterCountIndependentOfSeed) {
  auto a = build_fc(20, 20), b = build_fc(20, 20);
  init_weights(a, 1);
  init_weights(b, 2);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  EXPECT_EQ(a.parameter_count(), 400u * 400 + 400 + 400 * 200 + 200 + 200 * 60 + 60 + 60 * 3 + 3);
  EXPECT_NE(a.parameters()[0][0], b.parameters()[0][0]);
}

TEST(Architecture, NarrowInputsRejected) { EXPECT_THROW(build_conv2d(20, 4), ConfigError); }

TEST(Architecture, WrongInputShapeIsShapeMismatch) {
  const auto m = build_fc(20, 20);
  EXPECT_THROW(predict(m, Tensor(1, {20, 16, 1})), ShapeMismatch);
}

// --- forward / backward contracts ---------------------------------------------

TEST(Forward, ZeroWeightsGiveZeroPredictions) {
  for (auto k : {ModelKind::FC, ModelKind::CONV1D, ModelKind::CONV2D}) {
    const auto m = build_model(k, 20, 20);
    Tensor x(2, {20, 20, 1});
    std::fill(x.data.begin(), x.data.end(), 0.7);
    for (double v : predict(m, x).data) EXPECT_EQ(v, 0.0);
  }
}

TEST(Forward, LeakyReluValues) {
  LeakyReLU a{0.001};
  Tensor x(1, {2}), y(1, {2});
  x.data = {-1.0, 1.0};
  LayerAux aux;
  a.forward(x, y, aux);
  EXPECT_DOUBLE_EQ(y.data[0], -0.001);
  EXPECT_DOUBLE_EQ(y.data[1], 1.0);
}

TEST(Forward, BatchOfTwoEqualsTwoSingles) {
  std::mt19937_64 rng(30);
  for (auto k : {ModelKind::FC, ModelKind::CONV1D, ModelKind::CONV2D}) {
    auto m = build_model(k, 20, 16);
    init_weights(m, 3);
    Tensor both(2, m.input_shape);
    fill_normal(both.data, rng);
    Tensor first(1, m.input_shape), second(1, m.input_shape);
    std::copy(both.data.begin(), both.data.begin() + 320, first.data.begin());
    std::copy(both.data.begin() + 320, both.data.end(), second.data.begin());
    const auto y = predict(m, both);
    const auto y0 = predict(m, first);
    const auto y1 = predict(m, second);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(y.data[i], y0.data[i], 1e-12);
      EXPECT_NEAR(y.data[3 + i], y1.data[i], 1e-12);
    }
  }
}

TEST(Backward, ZeroLossGradientGivesZeroParameterGradients) {
  auto m = build_conv1d(20, 20);
  init_weights(m, 4);
  ForwardCache cache;
  Tensor x(3, m.input_shape);
  std::fill(x.data.begin(), x.data.end(), 0.25);
  forward(m, x, cache);
  const auto g = backward(m, cache, Tensor(3, {3}));
  for (const auto& t : g.tensors)
    for (double v : t) EXPECT_EQ(v, 0.0);
}

TEST(Backward, DuplicatedExampleDoublesContribution) {
  std::mt19937_64 rng(31);
  auto m = build_fc(20, 16);
  init_weights(m, 5);
  Tensor one(1, m.input_shape), two(2, m.input_shape);
  fill_normal(one.data, rng);
  std::copy(one.data.begin(), one.data.end(), two.data.begin());
  std::copy(one.data.begin(), one.data.end(), two.data.begin() + 320);
  Tensor g1(1, {3}), g2(2, {3});
  g1.data = {0.3, -0.2, 0.5};
  g2.data = {0.3, -0.2, 0.5, 0.3, -0.2, 0.5};
  ForwardCache c1, c2;
  forward(m, one, c1);
  forward(m, two, c2);
  const auto a = backward(m, c1, g1);
  const auto b = backward(m, c2, g2);
  for (std::size_t k = 0; k < a.tensors.size(); ++k)
    for (std::size_t i = 0; i < a.tensors[k].size(); ++i)
      EXPECT_NEAR(b.tensors[k][i], 2.0 * a.tensors[k][i], 1e-12 * std::max(1.0, std::abs(a.tensors[k][i])));
}

TEST(Backward, CacheFromAnotherModelIsStale) {
  auto fc = build_fc(20, 20);
  auto conv = build_conv1d(20, 20);
  ForwardCache cache;
  forward(fc, Tensor(1, fc.input_shape), cache);
  EXPECT_THROW(backward(conv, cache, Tensor(1, {3})), StaleCache);
  EXPECT_THROW(backward(fc, cache, Tensor(2, {3})), StaleCache);
}

// --- loss ------------------------------------------------------------------------

TEST(Loss, PerfectPredictionIsZero) {
  Tensor p(4, {3});
  std::iota(p.data.begin(), p.data.end(), 1.0);
  const auto r = weighted_mse(p, p, {1.0, 2.0, 3.0});
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.grad.data) EXPECT_EQ(g, 0.0);
}

TEST(Loss, UnitResidual) {
  Tensor p(1, {3}), t(1, {3});
  p.data = {1.0, 1.0, 1.0};
  EXPECT_DOUBLE_EQ(weighted_mse(p, t, {1.0, 1.0, 1.0}).loss, 1.0);
}

TEST(Loss, SigmaWeighting) {
  Tensor p(2, {3}), t(2, {3});
  p.data = {2.0, 0.0, 0.0, 0.0, 0.0, 0.5};
  // ((2/2)^2 + (0.5/0.25)^2) / 6
  EXPECT_DOUBLE_EQ(weighted_mse(p, t, {2.0, 1.0, 0.25}).loss, 5.0 / 6.0);
}

TEST(Loss, NonPositiveSigmaRejected) {
  Tensor p(1, {3});
  EXPECT_THROW(weighted_mse(p, p, {1.0, 0.0, 1.0}), NonPositiveSigma);
  EXPECT_THROW(weighted_mse(p, p, {1.0, 1.0, -2.0}), NonPositiveSigma);
}

// --- Adam ------------------------------------------------------------------------

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
  auto m = build_fc(20, 6);
  init_weights(m, 7);
  const auto before = m.parameters()[0][0];
  AdamState st(m, {});
  auto g = Gradients::zeros_like(m);
  g.tensors[0][0] = 0.37;
  g.tensors[0][1] = -2e-3;
  const double w1 = m.parameters()[0][1];
  adam_update(st, m, g);
  EXPECT_NEAR(m.parameters()[0][0], before - 1e-3, 1e-10);
  EXPECT_NEAR(m.parameters()[0][1], w1 + 1e-3, 1e-8);
}

TEST(Adam, ZeroGradientIsAFixedPoint) {
  auto m = build_conv1d(20, 16);
  init_weights(m, 8);
  const auto snapshot = m;
  AdamState st(m, {});
  const auto g = Gradients::zeros_like(m);
  for (int i = 0; i < 25; ++i) adam_update(st, m, g);
  const auto a = m.parameters();
  const auto b = snapshot.parameters();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(std::equal(a[k].begin(), a[k].end(), b[k].begin()));
}

TEST(Adam, MatchesScalarRecurrence) {
  std::vector<double> w{0.5, -1.0};
  AdamState st;
  st.config = {0.01, 0.8, 0.99, 1e-6};
  st.m = {{0.0, 0.0}};
  st.v = {{0.0, 0.0}};
  double m0 = 0, v0 = 0, w0 = 0.5;
  const std::vector<std::span<double>> params{std::span<double>(w)};
  for (int t = 1; t <= 5; ++t) {
    const double g = 0.3 * t - 0.7;
    Gradients grads;
    grads.tensors = {{g, 0.0}};
    adam_update(st, std::span<const std::span<double>>(params), grads);
    m0 = 0.8 * m0 + 0.2 * g;
    v0 = 0.99 * v0 + 0.01 * g * g;
    w0 -= 0.01 * (m0 / (1 - std::pow(0.8, t))) / (std::sqrt(v0 / (1 - std::pow(0.99, t))) + 1e-6);
    EXPECT_NEAR(w[0], w0, 1e-15);
    EXPECT_EQ(w[1], -1.0);
  }
  EXPECT_EQ(st.t, 5u);
}

// --- initialisation ---------------------------------------------------------------

TEST(Init, BiasesZeroAndSeedDeterministic) {
  auto a = build_conv2d(20, 20), b = build_conv2d(20, 20), c = build_conv2d(20, 20);
  init_weights(a, 42);
  init_weights(b, 42);
  init_weights(c, 43);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    EXPECT_TRUE(std::equal(pa[k].begin(), pa[k].end(), pb[k].begin()));
    if (k % 2 == 1) {
      for (double v : pa[k]) EXPECT_EQ(v, 0.0);
    }
  }
  EXPECT_FALSE(std::equal(pa[0].begin(), pa[0].end(), pc[0].begin()));
}

TEST(Init, UniformFanInMoments) {
  auto m = build_fc(20, 20);
  init_weights(m, 9);
  const auto params = m.parameters();
  const std::vector<std::size_t> fan_in{400, 400, 200, 60};
  for (std::size_t layer = 0; layer < 3; ++layer) {  // fan_in >= 100
    const auto w = params[layer * 2];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in[layer]));
    double sum = 0, sq = 0, max_abs = 0;
    for (double v : w) {
      sum += v;
      sq += v * v;
      max_abs = std::max(max_abs, std::abs(v));
    }
    const double n = static_cast<double>(w.size());
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    // U(-a, a) has standard deviation a / sqrt(3) = sqrt(2 / fan_in)
    const double expected = std::sqrt(2.0 / static_cast<double>(fan_in[layer]));
    EXPECT_NEAR(sd / expected, 1.0, 0.2);
    EXPECT_NEAR(sd / expected, 1.0, 0.02);
    EXPECT_LE(max_abs, limit);
  }
}

// --- overfit -----------------------------------------------------------------------

TEST(Overfit, FcMemorisesFixedBatch) {
  const auto r = l96::testing::overfit_fixed_batch(ModelType::FC, 1);
  EXPECT_TRUE(r.reached) << "loss " << r.loss << " after " << r.steps << " steps";
}

TEST(Overfit, Conv1DMemorisesFixedBatch) {
  const auto r = l96::testing::overfit_fixed_batch(ModelType::CONV1D, 1);
  EXPECT_TRUE(r.reached) << "loss " << r.loss << " after " << r.steps << " steps";
}

}  // namespace
