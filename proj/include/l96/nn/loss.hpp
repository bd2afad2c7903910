#pragma once

#include <array>
#include <cmath>

#include "l96/common.hpp"
#include "l96/nn/tensor.hpp"

namespace l96::nn {

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d(loss)/d(pred), same shape as pred
};

/// Mean over batch and the three outputs of ((pred - target) / sigma_p)^2.
inline LossResult weighted_mse(const Tensor& pred, const Tensor& target, const std::array<double, 3>& sigma) {
  for (double s : sigma)
    if (!(s > 0.0)) throw NonPositiveSigma("loss sigmas must be > 0");
  if (pred.shape != Shape{3} || target.shape != Shape{3} || pred.batch != target.batch)
    throw ShapeMismatch("weighted_mse expects matching (batch, 3) tensors");
  if (pred.batch == 0) throw ShapeMismatch("weighted_mse on an empty batch");

  LossResult r;
  r.grad = Tensor(pred.batch, {3});
  const double denom = 3.0 * static_cast<double>(pred.batch);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.batch; ++i)
    for (std::size_t p = 0; p < 3; ++p) {
      const std::size_t k = i * 3 + p;
      const double diff = pred.data[k] - target.data[k];
      const double inv_var = 1.0 / (sigma[p] * sigma[p]);
      sum += diff * diff * inv_var;
      r.grad.data[k] = 2.0 * diff * inv_var / denom;
    }
  r.loss = sum / denom;
  return r;
}

}  // namespace l96::nn
