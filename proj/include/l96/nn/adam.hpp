#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "l96/common.hpp"
#include "l96/nn/model.hpp"

namespace l96::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Buffer> m;
  std::vector<Buffer> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(const Model& model, AdamConfig cfg) : config(cfg) {
    for (const auto& p : model.parameters()) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
  }
};

/// One bias-corrected Adam step applied in place to `params`.
inline void adam_update(AdamState& state, std::span<const std::span<double>> params, const Gradients& grads) {
  if (params.size() != state.m.size() || grads.tensors.size() != state.m.size())
    throw ShapeMismatch("Adam state, parameters and gradients disagree");
  ++state.t;
  const auto& c = state.config;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k];
    const auto& g = grads.tensors[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (w.size() != g.size() || w.size() != m.size()) throw ShapeMismatch("gradient tensor shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

inline void adam_update(AdamState& state, Model& model, const Gradients& grads) {
  const auto params = model.parameters();
  adam_update(state, std::span<const std::span<double>>(params), grads);
}

}  // namespace l96::nn
