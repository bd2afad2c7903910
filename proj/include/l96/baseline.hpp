#pragma once

// Closed-form ridge-stabilised least squares for the LR baseline.

#include <array>
#include <cmath>
#include <functional>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "l96/common.hpp"

namespace l96 {

struct LinearModel {
  RowMatrix weight;         // input_dim x 3
  Eigen::RowVector3d bias = Eigen::RowVector3d::Zero();
  double ridge = 1e-8;

  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(weight.rows()); }
};

/// Row block of design matrix and matching targets.
struct LinearBlock {
  RowMatrix x;  // n x D
  RowMatrix y;  // n x 3
};

/// Fits over data supplied as `n_blocks` row blocks (so large corpora need not
/// be materialised). Two passes: column means, then centred normal equations
///   (Xc^T Xc + ridge I) W = Xc^T Yc,  bias = mean_y - mean_x W.
inline LinearModel fit_linear_blocks(std::size_t input_dim, std::size_t n_blocks,
                                     const std::function<LinearBlock(std::size_t)>& block, double ridge = 1e-8) {
  if (!(ridge > 0.0)) throw ConfigError("ridge must be > 0");
  const auto D = static_cast<Eigen::Index>(input_dim);

  Eigen::RowVectorXd sum_x = Eigen::RowVectorXd::Zero(D);
  Eigen::RowVector3d sum_y = Eigen::RowVector3d::Zero();
  std::size_t n = 0;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const auto blk = block(b);
    if (blk.x.cols() != D || blk.y.cols() != 3 || blk.x.rows() != blk.y.rows())
      throw ShapeMismatch("linear fit block has wrong shape");
    sum_x += blk.x.colwise().sum();
    sum_y += blk.y.colwise().sum();
    n += static_cast<std::size_t>(blk.x.rows());
  }
  if (n == 0) throw EmptySplit("no rows to fit");
  const Eigen::RowVectorXd mean_x = sum_x / static_cast<double>(n);
  const Eigen::RowVector3d mean_y = sum_y / static_cast<double>(n);

  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(D, D);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(D, 3);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    auto blk = block(b);
    blk.x.rowwise() -= mean_x;
    blk.y.rowwise() -= mean_y;
    normal.selfadjointView<Eigen::Lower>().rankUpdate(blk.x.transpose());
    rhs.noalias() += blk.x.transpose() * blk.y;
  }
  normal.diagonal().array() += ridge;

  Eigen::LLT<Eigen::MatrixXd, Eigen::Lower> llt(normal);
  if (llt.info() != Eigen::Success) throw SingularSystem("regularized normal matrix is not positive definite");

  LinearModel model;
  model.ridge = ridge;
  model.weight = llt.solve(rhs);
  model.bias = mean_y - mean_x * model.weight;
  if (!all_finite(std::span<const double>(model.weight.data(), static_cast<std::size_t>(model.weight.size()))) ||
      !model.bias.allFinite())
    throw SingularSystem("linear solve produced non-finite coefficients");
  return model;
}

inline LinearModel fit_linear(const RowMatrix& x, const RowMatrix& y, double ridge = 1e-8) {
  return fit_linear_blocks(static_cast<std::size_t>(x.cols()), 1,
                           [&](std::size_t) { return LinearBlock{x, y}; }, ridge);
}

inline RowMatrix predict_linear(const LinearModel& model, const RowMatrix& x) {
  if (x.cols() != model.weight.rows()) throw ShapeMismatch("input width does not match the linear model");
  RowMatrix out = x * model.weight;
  out.rowwise() += model.bias;
  return out;
}

}  // namespace l96
