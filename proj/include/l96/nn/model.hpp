#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "l96/common.hpp"
#include "l96/nn/layers.hpp"
#include "l96/nn/tensor.hpp"

namespace l96::nn {

enum class ModelKind { FC, CONV1D, CONV2D };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::FC: return "FC";
    case ModelKind::CONV1D: return "CONV1D";
    case ModelKind::CONV2D: return "CONV2D";
  }
  return "?";
}

inline ModelKind model_kind_from_string(std::string_view s) {
  if (s == "FC" || s == "fc") return ModelKind::FC;
  if (s == "CONV1D" || s == "conv1d") return ModelKind::CONV1D;
  if (s == "CONV2D" || s == "conv2d") return ModelKind::CONV2D;
  throw ConfigError("unknown network kind '" + std::string(s) + "'");
}

inline constexpr double kLeakyAlpha = 0.001;
inline constexpr std::size_t kOutputs = 3;

struct Model {
  ModelKind kind = ModelKind::FC;
  Shape input_shape;  // (20, W, 1)
  std::vector<Layer> layers;

  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> out;
    for (auto& layer : layers)
      std::visit(
          [&](auto& l) {
            if constexpr (HasParameters<std::decay_t<decltype(l)>>) {
              out.emplace_back(l.weight);
              out.emplace_back(l.bias);
            }
          },
          layer);
    return out;
  }

  std::vector<std::span<const double>> parameters() const {
    std::vector<std::span<const double>> out;
    for (const auto& p : const_cast<Model*>(this)->parameters()) out.emplace_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }

  /// Shape after each layer; element 0 is the input shape.
  std::vector<Shape> shape_chain() const {
    std::vector<Shape> chain{input_shape};
    for (const auto& layer : layers)
      chain.push_back(std::visit([&](const auto& l) { return l.output_shape(chain.back()); }, layer));
    return chain;
  }

  Shape output_shape() const { return shape_chain().back(); }
};

/// Appends layers while tracking the running shape, so each layer is created
/// with the input extent it will actually see.
class ModelBuilder {
 public:
  ModelBuilder(ModelKind kind, Shape input) : shape_(input) {
    model_.kind = kind;
    model_.input_shape = std::move(input);
  }

  ModelBuilder& dense(std::size_t n_out) {
    if (shape_.size() != 1) throw ShapeMismatch("Dense needs a flat input; add flatten() first");
    return add(Dense(shape_[0], n_out));
  }
  ModelBuilder& conv1d(std::size_t filters, std::size_t kernel) {
    if (kernel < 1) throw ShapeMismatch("kernel must be >= 1");
    return add(Conv1D(element_count(Shape(shape_.begin() + 1, shape_.end())), filters, kernel));
  }
  ModelBuilder& conv2d(std::size_t filters, std::size_t kh, std::size_t kw) {
    if (kh < 1 || kw < 1) throw ShapeMismatch("kernel must be >= 1");
    if (shape_.size() != 3) throw ShapeMismatch("Conv2D needs an (H, W, C) input");
    return add(Conv2D(shape_[2], filters, kh, kw));
  }
  ModelBuilder& maxpool1d(std::size_t size) { return add(MaxPool1D{size}); }
  ModelBuilder& maxpool2d(std::size_t sh, std::size_t sw) { return add(MaxPool2D{sh, sw}); }
  ModelBuilder& leaky_relu(double alpha = kLeakyAlpha) {
    if (!(alpha > 0.0)) throw ConfigError("LeakyReLU alpha must be > 0");
    return add(LeakyReLU{alpha});
  }
  ModelBuilder& flatten() { return add(Flatten{}); }

  Model build() const {
    if (shape_ != Shape{kOutputs}) throw ShapeMismatch("model must end in a 3-unit output, got " + to_string(shape_));
    return model_;
  }

 private:
  ModelBuilder& add(Layer layer) {
    shape_ = std::visit([&](const auto& l) { return l.output_shape(shape_); }, layer);
    model_.layers.push_back(std::move(layer));
    return *this;
  }

  Model model_;
  Shape shape_;
};

inline void check_width(std::size_t width) {
  if (width < 6) throw ConfigError("chunk width must be >= 6 for the convolutional stacks");
}

/// Flatten -> 400 -> 200 -> 60 -> 3.
inline Model build_fc(std::size_t height, std::size_t width) {
  check_width(width);
  return ModelBuilder(ModelKind::FC, {height, width, 1})
      .flatten()
      .dense(400).leaky_relu()
      .dense(200).leaky_relu()
      .dense(60).leaky_relu()
      .dense(kOutputs)
      .build();
}

/// Time is the convolution axis, the W variables are input channels.
inline Model build_conv1d(std::size_t height, std::size_t width) {
  check_width(width);
  return ModelBuilder(ModelKind::CONV1D, {height, width, 1})
      .conv1d(32, 3).leaky_relu()
      .conv1d(32, 3).leaky_relu()
      .maxpool1d(2)
      .flatten()
      .dense(128).leaky_relu()
      .dense(60).leaky_relu()
      .dense(kOutputs)
      .build();
}

inline Model build_conv2d(std::size_t height, std::size_t width) {
  check_width(width);
  return ModelBuilder(ModelKind::CONV2D, {height, width, 1})
      .conv2d(32, 3, 3).leaky_relu()
      .conv2d(32, 3, 3).leaky_relu()
      .maxpool2d(2, 2)
      .flatten()
      .dense(128).leaky_relu()
      .dense(60).leaky_relu()
      .dense(kOutputs)
      .build();
}

inline Model build_model(ModelKind kind, std::size_t height, std::size_t width) {
  switch (kind) {
    case ModelKind::FC: return build_fc(height, width);
    case ModelKind::CONV1D: return build_conv1d(height, width);
    case ModelKind::CONV2D: return build_conv2d(height, width);
  }
  throw ConfigError("unknown model kind");
}

/// Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero. Each layer draws
/// from its own seeded stream.
inline void init_weights(Model& model, std::uint64_t seed) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    std::visit(
        [&](auto& l) {
          if constexpr (HasParameters<std::decay_t<decltype(l)>>) {
            const double limit = std::sqrt(6.0 / static_cast<double>(l.fan_in()));
            std::mt19937_64 rng(derive_seed(seed, "layer/" + std::to_string(i)));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (auto& w : l.weight) w = dist(rng);
            std::fill(l.bias.begin(), l.bias.end(), 0.0);
          }
        },
        model.layers[i]);
  }
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardCache {
  std::vector<Tensor> activations;  // activations[i] is the input of layer i; back() is the output
  std::vector<LayerAux> aux;

  const Tensor& output() const { return activations.back(); }
};

struct Gradients {
  std::vector<Buffer> tensors;  // aligned with Model::parameters()

  static Gradients zeros_like(const Model& model) {
    Gradients g;
    for (const auto& p : model.parameters()) g.tensors.emplace_back(p.size(), 0.0);
    return g;
  }
};

inline const Tensor& forward(const Model& model, const Tensor& batch, ForwardCache& cache) {
  if (batch.shape != model.input_shape)
    throw ShapeMismatch("model expects " + to_string(model.input_shape) + ", got " + to_string(batch.shape));
  cache.activations.resize(model.layers.size() + 1);
  cache.aux.resize(model.layers.size());
  cache.activations[0] = batch;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    std::visit(
        [&](const auto& l) {
          const Tensor& in = cache.activations[i];
          Tensor& out = cache.activations[i + 1];
          auto out_shape = l.output_shape(in.shape);
          if (out.batch != in.batch || out.shape != out_shape) out = Tensor(in.batch, std::move(out_shape));
          l.forward(in, out, cache.aux[i]);
        },
        model.layers[i]);
  }
  return cache.output();
}

inline Tensor predict(const Model& model, const Tensor& batch) {
  ForwardCache cache;
  return forward(model, batch, cache);
}

/// Reverse-mode pass. Returns parameter gradients aligned with Model::parameters().
/// If input_grad is non-null it receives d(loss)/d(input).
inline Gradients backward(const Model& model, const ForwardCache& cache, const Tensor& loss_grad,
                          Tensor* input_grad = nullptr) {
  if (cache.activations.size() != model.layers.size() + 1 || cache.aux.size() != model.layers.size())
    throw StaleCache("cache does not belong to this model");
  const auto chain = model.shape_chain();
  for (std::size_t i = 0; i < chain.size(); ++i)
    if (cache.activations[i].shape != chain[i] || cache.activations[i].batch != cache.activations[0].batch)
      throw StaleCache("cached activation shapes disagree with the model");
  if (loss_grad.shape != chain.back() || loss_grad.batch != cache.output().batch)
    throw StaleCache("loss gradient shape disagrees with the cached output");

  Gradients grads = Gradients::zeros_like(model);
  std::size_t slot = grads.tensors.size();
  Tensor grad = loss_grad;
  Tensor next;
  for (std::size_t i = model.layers.size(); i-- > 0;) {
    const Tensor& in = cache.activations[i];
    const bool need_input = i > 0 || input_grad != nullptr;
    if (need_input && (next.batch != in.batch || next.shape != in.shape)) next = Tensor(in.batch, in.shape);
    std::visit(
        [&](const auto& l) {
          std::span<double> gw, gb;
          if constexpr (HasParameters<std::decay_t<decltype(l)>>) {
            slot -= 2;
            gw = grads.tensors[slot];
            gb = grads.tensors[slot + 1];
          }
          l.backward(in, grad, cache.aux[i], need_input ? &next : nullptr, gw, gb);
        },
        model.layers[i]);
    if (need_input) std::swap(grad, next);
  }
  if (input_grad) *input_grad = std::move(grad);
  return grads;
}

}  // namespace l96::nn
