#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "l96/common.hpp"

namespace l96::nn {

/// Storage for tensors, weights and optimiser state. Eigen picks its vectorised
/// reduction order from pointer alignment, so heap buffers must be aligned for
/// results to be bitwise reproducible across allocations.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Per-example shape (batch dimension excluded).
using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor with the batch as leading dimension.
struct Tensor {
  std::size_t batch = 0;
  Shape shape;  // per-example
  Buffer data;

  Tensor() = default;
  Tensor(std::size_t batch_, Shape shape_) : batch(batch_), shape(std::move(shape_)) {
    if (shape.size() > 3) throw ShapeMismatch("tensors are limited to 4 dimensions including batch");
    data.assign(batch * element_count(shape), 0.0);
  }

  std::size_t per_example() const { return element_count(shape); }
  std::size_t size() const noexcept { return data.size(); }

  std::span<double> example(std::size_t b) { return std::span<double>(data).subspan(b * per_example(), per_example()); }
  std::span<const double> example(std::size_t b) const {
    return std::span<const double>(data).subspan(b * per_example(), per_example());
  }

  /// Full shape including batch, e.g. (B, 20, W, 1).
  Shape full_shape() const {
    Shape s{batch};
    s.insert(s.end(), shape.begin(), shape.end());
    return s;
  }
};

}  // namespace l96::nn
