#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace l96 {

inline constexpr std::string_view kArtifactVersion = "1.0.0";

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Errors. Every failure surfaced by the library derives from l96::Error so the
// CLI can map categories onto stable exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced while integrating. step is -1 when the failure
/// happened outside a stepping loop (e.g. a direct tendency evaluation).
class IntegrationDiverged : public Error {
 public:
  IntegrationDiverged(std::int64_t step, std::size_t index)
      : Error(make_message(step, index)), step_(step), index_(index) {}

  std::int64_t step() const noexcept { return step_; }
  std::size_t index() const noexcept { return index_; }

 private:
  static std::string make_message(std::int64_t step, std::size_t index) {
    std::ostringstream os;
    os << "integration diverged: non-finite value at variable index " << index;
    if (step >= 0) os << " at step " << step;
    return os.str();
  }

  std::int64_t step_;
  std::size_t index_;
};

class RangeEmpty : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DegenerateColumn : public Error {
 public:
  explicit DegenerateColumn(std::size_t column)
      : Error("degenerate column " + std::to_string(column) + ": max == min"), column_(column) {}
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t column_;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class NonPositiveSigma : public Error {
 public:
  using Error::Error;
};

class StaleCache : public Error {
 public:
  using Error::Error;
};

class SingularSystem : public Error {
 public:
  using Error::Error;
};

class EmptySplit : public Error {
 public:
  using Error::Error;
};

class ZeroVariance : public Error {
 public:
  using Error::Error;
};

/// Loss or weights became non-finite during training (CLI exit code 4).
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Seeds and digests
// ---------------------------------------------------------------------------

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t hash = 0xCBF29CE484222325ull) noexcept {
  for (char ch : bytes) {
    hash ^= static_cast<unsigned char>(ch);
    hash *= 0x100000001B3ull;
  }
  return hash;
}

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes,
                             std::uint64_t hash = 0xCBF29CE484222325ull) noexcept {
  for (std::byte b : bytes) {
    hash ^= static_cast<std::uint64_t>(b);
    hash *= 0x100000001B3ull;
  }
  return hash;
}

/// Child seed for a named randomness consumer. Adding a new label never
/// changes the seeds handed to existing labels.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label) noexcept {
  return splitmix64(master ^ splitmix64(fnv1a64(label)));
}

inline std::string to_hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Streaming FNV-1a digest, rendered as 16 hex digits.
class Digest {
 public:
  void update(std::span<const std::byte> bytes) noexcept { state_ = fnv1a64(bytes, state_); }
  void update(std::string_view s) noexcept { state_ = fnv1a64(s, state_); }
  template <class T>
  void update_values(std::span<const T> values) noexcept {
    update(std::as_bytes(values));
  }
  std::uint64_t value() const noexcept { return state_; }
  std::string hex() const { return to_hex(state_); }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ull;
};

inline std::string digest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  Digest d;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<std::size_t>(in.gcount());
    d.update(std::as_bytes(std::span<const char>(buf.data(), got)));
  }
  return d.hex();
}

// ---------------------------------------------------------------------------
// Little-endian binary IO
// ---------------------------------------------------------------------------

namespace io {

template <class T>
T to_little(T v) noexcept {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

template <class T>
void write_le(std::ostream& out, T v) {
  const T le = to_little(v);
  out.write(reinterpret_cast<const char*>(&le), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw FormatError("unexpected end of file");
  return to_little(v);
}

template <class T>
void write_array_le(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (const T& v : values) write_le(out, v);
  }
}

template <class T>
void read_array_le(std::istream& in, std::span<T> values) {
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (in.gcount() != static_cast<std::streamsize>(values.size_bytes()))
    throw FormatError("unexpected end of file in payload");
  if constexpr (std::endian::native == std::endian::big) {
    for (T& v : values) v = to_little(v);
  }
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (in.gcount() != 4 || std::string_view(got.data(), 4) != magic)
    throw FormatError("bad magic, expected " + std::string(magic));
}

inline std::uintmax_t stream_size(std::istream& in) {
  const auto pos = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(pos);
  return static_cast<std::uintmax_t>(end);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Work distribution
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written
/// to per-index slots by the caller; the first exception (lowest index) is
/// rethrown after all workers join.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  if (n == 0) return;
  jobs = std::clamp<std::size_t>(jobs, 1, n);
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> workers;
    workers.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace l96
