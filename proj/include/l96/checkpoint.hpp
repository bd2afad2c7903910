#pragma once

// Checkpoint container: "L96W", u32 version, u64 header length, JSON header,
// then every parameter tensor as little-endian f64 in declaration order.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "l96/common.hpp"
#include "l96/regressor.hpp"

namespace l96 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Predictor predictor;
  nlohmann::json meta;  // seeds, step count, task, ... (free-form)
};

namespace detail {

inline nlohmann::json layer_to_json(const nn::Layer& layer) {
  return std::visit(
      [](const auto& l) -> nlohmann::json {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, nn::Dense>) return {{"type", "dense"}, {"n_in", l.n_in}, {"n_out", l.n_out}};
        else if constexpr (std::is_same_v<L, nn::Conv1D>)
          return {{"type", "conv1d"}, {"in_channels", l.in_channels}, {"filters", l.filters}, {"kernel", l.kernel}};
        else if constexpr (std::is_same_v<L, nn::Conv2D>)
          return {{"type", "conv2d"}, {"in_channels", l.in_channels}, {"filters", l.filters},
                  {"kernel_h", l.kernel_h}, {"kernel_w", l.kernel_w}};
        else if constexpr (std::is_same_v<L, nn::MaxPool1D>) return {{"type", "maxpool1d"}, {"size", l.size}};
        else if constexpr (std::is_same_v<L, nn::MaxPool2D>)
          return {{"type", "maxpool2d"}, {"size_h", l.size_h}, {"size_w", l.size_w}};
        else if constexpr (std::is_same_v<L, nn::LeakyReLU>) return {{"type", "leaky_relu"}, {"alpha", l.alpha}};
        else return {{"type", "flatten"}};
      },
      layer);
}

inline nn::Layer layer_from_json(const nlohmann::json& j) {
  const auto type = j.at("type").get<std::string>();
  auto sz = [&](const char* key) { return j.at(key).get<std::size_t>(); };
  if (type == "dense") return nn::Dense(sz("n_in"), sz("n_out"));
  if (type == "conv1d") return nn::Conv1D(sz("in_channels"), sz("filters"), sz("kernel"));
  if (type == "conv2d") return nn::Conv2D(sz("in_channels"), sz("filters"), sz("kernel_h"), sz("kernel_w"));
  if (type == "maxpool1d") return nn::MaxPool1D{sz("size")};
  if (type == "maxpool2d") return nn::MaxPool2D{sz("size_h"), sz("size_w")};
  if (type == "leaky_relu") return nn::LeakyReLU{j.at("alpha").get<double>()};
  if (type == "flatten") return nn::Flatten{};
  throw FormatError("unknown layer type '" + type + "'");
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json header{{"format", "l96-checkpoint"}, {"version", kCheckpointVersion}, {"meta", ckpt.meta}};
  std::vector<std::span<const double>> tensors;
  RowMatrix linear_bias;
  if (const auto* n = std::get_if<NetworkRegressor>(&ckpt.predictor.impl)) {
    header["kind"] = nn::to_string(n->net.kind);
    header["input_shape"] = n->net.input_shape;
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : n->net.layers) layers.push_back(detail::layer_to_json(l));
    header["layers"] = layers;
    header["target_scaling"] = {{"mean", n->scaling.mean}, {"sigma", n->scaling.sigma}};
    tensors = n->net.parameters();
  } else {
    const auto& lin = std::get<LinearModel>(ckpt.predictor.impl);
    header["kind"] = "LINEAR";
    header["input_dim"] = lin.input_dim();
    header["ridge"] = lin.ridge;
    tensors.emplace_back(lin.weight.data(), static_cast<std::size_t>(lin.weight.size()));
    tensors.emplace_back(lin.bias.data(), 3);
  }
  std::vector<std::size_t> sizes;
  Digest digest;
  for (const auto& t : tensors) {
    sizes.push_back(t.size());
    digest.update_values(t);
  }
  header["tensors"] = sizes;
  header["payload_digest"] = digest.hex();

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out.write("L96W", 4);
  io::write_le<std::uint32_t>(out, kCheckpointVersion);
  io::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) io::write_array_le(out, t);
  if (!out) throw ConfigError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  io::expect_magic(in, "L96W");
  if (io::read_le<std::uint32_t>(in) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const auto header_len = io::read_le<std::uint64_t>(in);
  if (header_len > io::stream_size(in)) throw FormatError("checkpoint header length exceeds file size");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::uint64_t>(in.gcount()) != header_len) throw FormatError("truncated checkpoint header");

  Checkpoint ckpt;
  std::vector<std::span<double>> tensors;
  std::vector<std::size_t> sizes;
  std::string digest_expected;
  try {
    const auto header = nlohmann::json::parse(text);
    ckpt.meta = header.value("meta", nlohmann::json::object());
    sizes = header.at("tensors").get<std::vector<std::size_t>>();
    digest_expected = header.at("payload_digest").get<std::string>();
    const auto kind = header.at("kind").get<std::string>();
    if (kind == "LINEAR") {
      LinearModel lin;
      lin.ridge = header.at("ridge").get<double>();
      lin.weight = RowMatrix::Zero(header.at("input_dim").get<Eigen::Index>(), 3);
      ckpt.predictor.impl = std::move(lin);
    } else {
      NetworkRegressor reg;
      reg.net.kind = nn::model_kind_from_string(kind);
      reg.net.input_shape = header.at("input_shape").get<nn::Shape>();
      for (const auto& l : header.at("layers")) reg.net.layers.push_back(detail::layer_from_json(l));
      reg.scaling.mean = header.at("target_scaling").at("mean").get<Target>();
      reg.scaling.sigma = header.at("target_scaling").at("sigma").get<Target>();
      reg.net.shape_chain();  // validates layer compatibility
      ckpt.predictor.impl = std::move(reg);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  } catch (const ShapeMismatch& e) {
    throw FormatError(std::string("inconsistent checkpoint layers: ") + e.what());
  }

  if (auto* n = std::get_if<NetworkRegressor>(&ckpt.predictor.impl)) {
    tensors = n->net.parameters();
  } else {
    auto& lin = std::get<LinearModel>(ckpt.predictor.impl);
    tensors.emplace_back(lin.weight.data(), static_cast<std::size_t>(lin.weight.size()));
    tensors.emplace_back(lin.bias.data(), 3);
  }
  if (tensors.size() != sizes.size()) throw FormatError("checkpoint tensor count mismatch");
  Digest digest;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].size() != sizes[i]) throw FormatError("checkpoint tensor size mismatch");
    io::read_array_le(in, tensors[i]);
    digest.update_values(std::span<const double>(tensors[i]));
  }
  if (digest.hex() != digest_expected) throw ChecksumError("checkpoint payload digest mismatch");
  return ckpt;
}

}  // namespace l96
