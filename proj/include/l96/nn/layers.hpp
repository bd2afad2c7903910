#pragma once

// Layer kinds with hand-written forward and reverse-mode passes. All layers
// are batch-first and channels-last; parameter gradients are accumulated (+=)
// into caller-provided buffers.

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "l96/common.hpp"
#include "l96/nn/tensor.hpp"

namespace l96::nn {

using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

/// Per-layer side data produced by forward and consumed by backward.
struct LayerAux {
  std::vector<std::uint32_t> argmax;  // max-pool winners, flat input index per output element
};

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// ---------------------------------------------------------------------------

struct Dense {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  Buffer weight;  // n_out x n_in
  Buffer bias;    // n_out

  Dense() = default;
  Dense(std::size_t in, std::size_t out) : n_in(in), n_out(out), weight(in * out, 0.0), bias(out, 0.0) {}

  std::size_t fan_in() const noexcept { return n_in; }

  Shape output_shape(const Shape& in) const {
    if (in.size() != 1 || in[0] != n_in) throw ShapeMismatch("Dense expects (" + std::to_string(n_in) + "), got " + to_string(in));
    return {n_out};
  }

  void forward(const Tensor& in, Tensor& out, LayerAux&) const {
    ConstMatMap x(in.data.data(), ix(in.batch), ix(n_in));
    ConstMatMap w(weight.data(), ix(n_out), ix(n_in));
    MatMap y(out.data.data(), ix(out.batch), ix(n_out));
    y.noalias() = x * w.transpose();
    y.rowwise() += ConstVecMap(bias.data(), ix(n_out));
  }

  void backward(const Tensor& in, const Tensor& grad_out, const LayerAux&, Tensor* grad_in,
                std::span<double> gw, std::span<double> gb) const {
    ConstMatMap x(in.data.data(), ix(in.batch), ix(n_in));
    ConstMatMap dy(grad_out.data.data(), ix(grad_out.batch), ix(n_out));
    MatMap(gw.data(), ix(n_out), ix(n_in)).noalias() += dy.transpose() * x;
    VecMap(gb.data(), ix(n_out)) += dy.colwise().sum();
    if (grad_in) {
      ConstMatMap w(weight.data(), ix(n_out), ix(n_in));
      MatMap(grad_in->data.data(), ix(in.batch), ix(n_in)).noalias() = dy * w;
    }
  }
};

/// Convolution along the leading (time) axis; all trailing axes are treated as
/// input channels. Valid padding, stride 1.
struct Conv1D {
  std::size_t in_channels = 0;
  std::size_t filters = 0;
  std::size_t kernel = 0;
  Buffer weight;  // filters x (kernel * in_channels), tap-major
  Buffer bias;

  Conv1D() = default;
  Conv1D(std::size_t c, std::size_t f, std::size_t k)
      : in_channels(c), filters(f), kernel(k), weight(f * k * c, 0.0), bias(f, 0.0) {}

  std::size_t fan_in() const noexcept { return kernel * in_channels; }

  Shape output_shape(const Shape& in) const {
    if (in.size() < 2) throw ShapeMismatch("Conv1D expects (T, C...), got " + to_string(in));
    const std::size_t c = element_count(Shape(in.begin() + 1, in.end()));
    if (c != in_channels) throw ShapeMismatch("Conv1D channel mismatch: " + to_string(in));
    if (in[0] < kernel) throw ShapeMismatch("Conv1D kernel longer than input");
    return {in[0] - kernel + 1, filters};
  }

  void forward(const Tensor& in, Tensor& out, LayerAux&) const {
    const std::size_t T = in.shape[0];
    const std::size_t T_out = T - kernel + 1;
    ConstMatMap w(weight.data(), ix(filters), ix(kernel * in_channels));
    const ConstVecMap b(bias.data(), ix(filters));
    for (std::size_t n = 0; n < in.batch; ++n) {
      // Rows of the patch matrix overlap: row t starts at t * C and spans kernel * C values.
      ConstStridedMap patches(in.example(n).data(), ix(T_out), ix(kernel * in_channels),
                              Eigen::OuterStride<>(ix(in_channels)));
      MatMap y(out.example(n).data(), ix(T_out), ix(filters));
      y.noalias() = patches * w.transpose();
      y.rowwise() += b;
    }
  }

  void backward(const Tensor& in, const Tensor& grad_out, const LayerAux&, Tensor* grad_in,
                std::span<double> gw, std::span<double> gb) const {
    const std::size_t T = in.shape[0];
    const std::size_t T_out = T - kernel + 1;
    const std::size_t span_len = kernel * in_channels;
    ConstMatMap w(weight.data(), ix(filters), ix(span_len));
    MatMap dw(gw.data(), ix(filters), ix(span_len));
    VecMap db(gb.data(), ix(filters));
    RowMatrix dpatch;
    for (std::size_t n = 0; n < in.batch; ++n) {
      ConstStridedMap patches(in.example(n).data(), ix(T_out), ix(span_len), Eigen::OuterStride<>(ix(in_channels)));
      ConstMatMap dy(grad_out.example(n).data(), ix(T_out), ix(filters));
      dw.noalias() += dy.transpose() * patches;
      db += dy.colwise().sum();
      if (grad_in) {
        dpatch.noalias() = dy * w;
        auto dx = grad_in->example(n);
        std::fill(dx.begin(), dx.end(), 0.0);
        for (std::size_t t = 0; t < T_out; ++t) {
          double* dst = dx.data() + t * in_channels;
          const double* src = dpatch.row(ix(t)).data();
          for (std::size_t i = 0; i < span_len; ++i) dst[i] += src[i];
        }
      }
    }
  }
};

/// 2D convolution over (H, W, C) inputs. Valid padding, stride 1.
struct Conv2D {
  std::size_t in_channels = 0;
  std::size_t filters = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  Buffer weight;  // filters x (kernel_h * kernel_w * in_channels)
  Buffer bias;

  Conv2D() = default;
  Conv2D(std::size_t c, std::size_t f, std::size_t kh, std::size_t kw)
      : in_channels(c), filters(f), kernel_h(kh), kernel_w(kw), weight(f * kh * kw * c, 0.0), bias(f, 0.0) {}

  std::size_t fan_in() const noexcept { return kernel_h * kernel_w * in_channels; }

  Shape output_shape(const Shape& in) const {
    if (in.size() != 3 || in[2] != in_channels) throw ShapeMismatch("Conv2D expects (H, W, " + std::to_string(in_channels) + "), got " + to_string(in));
    if (in[0] < kernel_h || in[1] < kernel_w) throw ShapeMismatch("Conv2D kernel larger than input");
    return {in[0] - kernel_h + 1, in[1] - kernel_w + 1, filters};
  }

  void forward(const Tensor& in, Tensor& out, LayerAux&) const {
    const auto [H_out, W_out] = out_extent(in.shape);
    RowMatrix patches(ix(H_out * W_out), ix(fan_in()));
    ConstMatMap w(weight.data(), ix(filters), ix(fan_in()));
    const ConstVecMap b(bias.data(), ix(filters));
    for (std::size_t n = 0; n < in.batch; ++n) {
      im2col(in.shape, in.example(n).data(), patches);
      MatMap y(out.example(n).data(), ix(H_out * W_out), ix(filters));
      y.noalias() = patches * w.transpose();
      y.rowwise() += b;
    }
  }

  void backward(const Tensor& in, const Tensor& grad_out, const LayerAux&, Tensor* grad_in,
                std::span<double> gw, std::span<double> gb) const {
    const auto [H_out, W_out] = out_extent(in.shape);
    RowMatrix patches(ix(H_out * W_out), ix(fan_in()));
    RowMatrix dpatch;
    ConstMatMap w(weight.data(), ix(filters), ix(fan_in()));
    MatMap dw(gw.data(), ix(filters), ix(fan_in()));
    VecMap db(gb.data(), ix(filters));
    for (std::size_t n = 0; n < in.batch; ++n) {
      im2col(in.shape, in.example(n).data(), patches);
      ConstMatMap dy(grad_out.example(n).data(), ix(H_out * W_out), ix(filters));
      dw.noalias() += dy.transpose() * patches;
      db += dy.colwise().sum();
      if (grad_in) {
        dpatch.noalias() = dy * w;
        col2im(in.shape, dpatch, grad_in->example(n).data());
      }
    }
  }

 private:
  std::pair<std::size_t, std::size_t> out_extent(const Shape& in) const {
    return {in[0] - kernel_h + 1, in[1] - kernel_w + 1};
  }

  void im2col(const Shape& in, const double* x, RowMatrix& patches) const {
    const std::size_t W = in[1];
    const std::size_t C = in_channels;
    const auto [H_out, W_out] = out_extent(in);
    const std::size_t run = kernel_w * C;
    for (std::size_t i = 0; i < H_out; ++i)
      for (std::size_t j = 0; j < W_out; ++j) {
        double* dst = patches.row(ix(i * W_out + j)).data();
        for (std::size_t di = 0; di < kernel_h; ++di)
          std::copy_n(x + ((i + di) * W + j) * C, run, dst + di * run);
      }
  }

  void col2im(const Shape& in, const RowMatrix& dpatch, double* dx) const {
    const std::size_t W = in[1];
    const std::size_t C = in_channels;
    const auto [H_out, W_out] = out_extent(in);
    const std::size_t run = kernel_w * C;
    std::fill_n(dx, element_count(in), 0.0);
    for (std::size_t i = 0; i < H_out; ++i)
      for (std::size_t j = 0; j < W_out; ++j) {
        const double* src = dpatch.row(ix(i * W_out + j)).data();
        for (std::size_t di = 0; di < kernel_h; ++di) {
          double* dst = dx + ((i + di) * W + j) * C;
          for (std::size_t e = 0; e < run; ++e) dst[e] += src[di * run + e];
        }
      }
  }
};

/// Max pooling along the time axis of (T, C) inputs; floor on the output extent.
/// Ties go to the first maximal element in scan order.
struct MaxPool1D {
  std::size_t size = 2;

  Shape output_shape(const Shape& in) const {
    if (in.size() != 2) throw ShapeMismatch("MaxPool1D expects (T, C), got " + to_string(in));
    if (size < 1 || in[0] < size) throw ShapeMismatch("MaxPool1D window larger than input");
    return {in[0] / size, in[1]};
  }

  void forward(const Tensor& in, Tensor& out, LayerAux& aux) const {
    const std::size_t C = in.shape[1];
    const std::size_t T_out = in.shape[0] / size;
    aux.argmax.resize(out.size());
    for (std::size_t n = 0; n < in.batch; ++n) {
      const auto x = in.example(n);
      auto y = out.example(n);
      for (std::size_t t = 0; t < T_out; ++t)
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t best = t * size * C + c;
          for (std::size_t d = 1; d < size; ++d) {
            const std::size_t cand = (t * size + d) * C + c;
            if (x[cand] > x[best]) best = cand;
          }
          y[t * C + c] = x[best];
          aux.argmax[n * T_out * C + t * C + c] = static_cast<std::uint32_t>(best);
        }
    }
  }

  void backward(const Tensor& in, const Tensor& grad_out, const LayerAux& aux, Tensor* grad_in,
                std::span<double>, std::span<double>) const {
    if (!grad_in) return;
    route_max_gradient(in, grad_out, aux, *grad_in);
  }

  static void route_max_gradient(const Tensor& in, const Tensor& grad_out, const LayerAux& aux, Tensor& grad_in) {
    std::fill(grad_in.data.begin(), grad_in.data.end(), 0.0);
    const std::size_t per_out = grad_out.per_example();
    const std::size_t per_in = in.per_example();
    for (std::size_t n = 0; n < grad_out.batch; ++n)
      for (std::size_t o = 0; o < per_out; ++o)
        grad_in.data[n * per_in + aux.argmax[n * per_out + o]] += grad_out.data[n * per_out + o];
  }
};

/// Max pooling over (H, W) of (H, W, C) inputs; window scanned row-major.
struct MaxPool2D {
  std::size_t size_h = 2;
  std::size_t size_w = 2;

  Shape output_shape(const Shape& in) const {
    if (in.size() != 3) throw ShapeMismatch("MaxPool2D expects (H, W, C), got " + to_string(in));
    if (size_h < 1 || size_w < 1 || in[0] < size_h || in[1] < size_w)
      throw ShapeMismatch("MaxPool2D window larger than input");
    return {in[0] / size_h, in[1] / size_w, in[2]};
  }

  void forward(const Tensor& in, Tensor& out, LayerAux& aux) const {
    const std::size_t W = in.shape[1];
    const std::size_t C = in.shape[2];
    const std::size_t H_out = in.shape[0] / size_h;
    const std::size_t W_out = W / size_w;
    aux.argmax.resize(out.size());
    const std::size_t per_out = H_out * W_out * C;
    for (std::size_t n = 0; n < in.batch; ++n) {
      const auto x = in.example(n);
      auto y = out.example(n);
      for (std::size_t i = 0; i < H_out; ++i)
        for (std::size_t j = 0; j < W_out; ++j)
          for (std::size_t c = 0; c < C; ++c) {
            std::size_t best = ((i * size_h) * W + j * size_w) * C + c;
            for (std::size_t di = 0; di < size_h; ++di)
              for (std::size_t dj = 0; dj < size_w; ++dj) {
                const std::size_t cand = ((i * size_h + di) * W + j * size_w + dj) * C + c;
                if (x[cand] > x[best]) best = cand;
              }
            const std::size_t o = (i * W_out + j) * C + c;
            y[o] = x[best];
            aux.argmax[n * per_out + o] = static_cast<std::uint32_t>(best);
          }
    }
  }

  void backward(const Tensor& in, const Tensor& grad_out, const LayerAux& aux, Tensor* grad_in,
                std::span<double>, std::span<double>) const {
    if (!grad_in) return;
    MaxPool1D::route_max_gradient(in, grad_out, aux, *grad_in);
  }
};

struct LeakyReLU {
  double alpha = 0.001;

  Shape output_shape(const Shape& in) const { return in; }

  void forward(const Tensor& in, Tensor& out, LayerAux&) const {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double v = in.data[i];
      out.data[i] = v > 0.0 ? v : alpha * v;
    }
  }

  void backward(const Tensor& in, const Tensor& grad_out, const LayerAux&, Tensor* grad_in,
                std::span<double>, std::span<double>) const {
    if (!grad_in) return;
    for (std::size_t i = 0; i < in.size(); ++i)
      grad_in->data[i] = in.data[i] > 0.0 ? grad_out.data[i] : alpha * grad_out.data[i];
  }
};

struct Flatten {
  Shape output_shape(const Shape& in) const { return {element_count(in)}; }

  void forward(const Tensor& in, Tensor& out, LayerAux&) const { out.data = in.data; }

  void backward(const Tensor&, const Tensor& grad_out, const LayerAux&, Tensor* grad_in,
                std::span<double>, std::span<double>) const {
    if (grad_in) grad_in->data = grad_out.data;
  }
};

using Layer = std::variant<Dense, Conv1D, Conv2D, MaxPool1D, MaxPool2D, LeakyReLU, Flatten>;

template <class L>
concept HasParameters = requires(L l) {
  l.weight;
  l.bias;
};

}  // namespace l96::nn
