#pragma once

// A trained (b, c, h) regressor: either a network plus target scaling, or the
// linear baseline. Both consume chunks straight from a ChunkDataset.

#include <array>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "l96/baseline.hpp"
#include "l96/dataset.hpp"
#include "l96/nn/model.hpp"

namespace l96 {

enum class ModelType { LR, FC, CONV1D, CONV2D };

inline constexpr std::array<ModelType, 4> kAllModelTypes{ModelType::LR, ModelType::FC, ModelType::CONV1D,
                                                         ModelType::CONV2D};

inline std::string to_string(ModelType m) {
  switch (m) {
    case ModelType::LR: return "LR";
    case ModelType::FC: return "FC";
    case ModelType::CONV1D: return "Conv1D";
    case ModelType::CONV2D: return "Conv2D";
  }
  return "?";
}

inline ModelType model_type_from_string(std::string_view s) {
  if (s == "lr" || s == "LR" || s == "LINEAR") return ModelType::LR;
  if (s == "fc" || s == "FC") return ModelType::FC;
  if (s == "conv1d" || s == "Conv1D" || s == "CONV1D") return ModelType::CONV1D;
  if (s == "conv2d" || s == "Conv2D" || s == "CONV2D") return ModelType::CONV2D;
  throw ConfigError("unknown model '" + std::string(s) + "' (expected lr|fc|conv1d|conv2d)");
}

inline nn::ModelKind network_kind(ModelType m) {
  switch (m) {
    case ModelType::FC: return nn::ModelKind::FC;
    case ModelType::CONV1D: return nn::ModelKind::CONV1D;
    case ModelType::CONV2D: return nn::ModelKind::CONV2D;
    case ModelType::LR: break;
  }
  throw ConfigError("LR is not a network model");
}

/// Networks predict standardized targets z; reported predictions are mean + sigma * z.
struct TargetScaling {
  Target mean{0.0, 0.0, 0.0};
  Target sigma{1.0, 1.0, 1.0};
};

struct NetworkRegressor {
  nn::Model net;
  TargetScaling scaling;
};

struct Predictor {
  std::variant<NetworkRegressor, LinearModel> impl;

  ModelType type() const {
    if (const auto* n = std::get_if<NetworkRegressor>(&impl)) {
      switch (n->net.kind) {
        case nn::ModelKind::FC: return ModelType::FC;
        case nn::ModelKind::CONV1D: return ModelType::CONV1D;
        case nn::ModelKind::CONV2D: return ModelType::CONV2D;
      }
    }
    return ModelType::LR;
  }

  std::size_t input_size() const {
    if (const auto* n = std::get_if<NetworkRegressor>(&impl)) return nn::element_count(n->net.input_shape);
    return std::get<LinearModel>(impl).input_dim();
  }
};

/// Chunks `idx` of `ds` as a (n, height, width, 1) tensor, widened to f64.
inline nn::Tensor gather_batch(const ChunkDataset& ds, std::span<const std::size_t> idx) {
  nn::Tensor t(idx.size(), {ds.height, ds.width, 1});
  const std::size_t per = ds.chunk_size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto px = ds.pixels_of(idx[i]);
    std::copy(px.begin(), px.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return t;
}

inline nn::Tensor gather_targets(const ChunkDataset& ds, std::span<const std::size_t> idx) {
  nn::Tensor t(idx.size(), {3});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto tg = ds.target(idx[i]);
    std::copy(tg.begin(), tg.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * 3));
  }
  return t;
}

inline void check_compatible(const Predictor& p, const ChunkDataset& ds) {
  if (p.input_size() != ds.chunk_size())
    throw ConfigError("model input size " + std::to_string(p.input_size()) + " does not match dataset chunks (" +
                      std::to_string(ds.height) + "x" + std::to_string(ds.width) + ")");
}

/// Raw-scale (b, c, h) predictions for a batch tensor.
inline nn::Tensor predict_batch(const Predictor& p, const nn::Tensor& batch) {
  if (const auto* n = std::get_if<NetworkRegressor>(&p.impl)) {
    nn::Tensor out = nn::predict(n->net, batch);
    for (std::size_t i = 0; i < out.batch; ++i)
      for (std::size_t k = 0; k < 3; ++k) out.data[i * 3 + k] = n->scaling.mean[k] + n->scaling.sigma[k] * out.data[i * 3 + k];
    return out;
  }
  const auto& lin = std::get<LinearModel>(p.impl);
  nn::ConstMatMap x(batch.data.data(), nn::ix(batch.batch), nn::ix(batch.per_example()));
  const RowMatrix y = predict_linear(lin, x);
  nn::Tensor out(batch.batch, {3});
  std::copy(y.data(), y.data() + y.size(), out.data.begin());
  return out;
}

inline constexpr std::size_t kEvalBatch = 256;

/// Predictions for chunks `idx`, evaluated in fixed-size batches in the given order.
inline std::vector<Target> predict_chunks(const Predictor& p, const ChunkDataset& ds, std::span<const std::size_t> idx) {
  check_compatible(p, ds);
  std::vector<Target> out(idx.size());
  for (std::size_t start = 0; start < idx.size(); start += kEvalBatch) {
    const auto part = idx.subspan(start, std::min(kEvalBatch, idx.size() - start));
    const auto pred = predict_batch(p, gather_batch(ds, part));
    for (std::size_t i = 0; i < part.size(); ++i)
      out[start + i] = {pred.data[i * 3], pred.data[i * 3 + 1], pred.data[i * 3 + 2]};
  }
  return out;
}

}  // namespace l96
