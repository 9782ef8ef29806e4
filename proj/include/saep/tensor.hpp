#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "saep/error.hpp"

namespace saep {

/// Dense row-major f32 tensor, rank 1..4. Values are plain data; copies are
/// deep. All reductions accumulate in f64 over the flat index, left to right,
/// so results do not depend on available parallelism.
class Tensor {
 public:
  using Shape = std::vector<std::int64_t>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(checked_size(shape_)), 0.0f);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(static_cast<std::int64_t>(data_.size()) == checked_size(shape_),
            Errc::shape, "tensor data length does not match shape product");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, float value) {
    Tensor t(std::move(shape));
    for (float& v : t.data_) v = value;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }

  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }

  float& at(std::int64_t i, std::int64_t j) {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  float at(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  float& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  float at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Fixed-order f64 sum over the flat index.
  double sum() const {
    double acc = 0.0;
    for (float v : data_) acc += static_cast<double>(v);
    return acc;
  }

  double mean() const {
    require(!data_.empty(), Errc::arg, "mean of empty tensor");
    return sum() / static_cast<double>(data_.size());
  }

  float max_abs() const {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
  }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  static std::int64_t checked_size(const Shape& shape) {
    require(!shape.empty() && shape.size() <= 4, Errc::arg,
            "tensor rank must be between 1 and 4");
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
      require(e >= 1, Errc::arg, "tensor extents must be positive");
      n *= e;
    }
    return n;
  }

  Shape shape_;
  std::vector<float> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     a.data().size_bytes()) == 0;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), Errc::shape, "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

/// Elementwise a + b, each element computed in f64 and rounded once.
inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), Errc::shape, "add: shape mismatch");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(a[i]) + static_cast<double>(b[i]));
  }
  return out;
}

inline Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(a[i]) * factor);
  }
  return out;
}

/// Deterministic counter-based generator (splitmix64). The stream depends
/// only on the seed, never on platform or call-site threading.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::int64_t next_index(std::int64_t n) {
    require(n >= 1, Errc::arg, "next_index: n must be positive");
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  /// Derives an independent child stream; advances this stream by one draw.
  Rng split() { return Rng(next_u64()); }

 private:
  std::uint64_t state_;
};

/// Uniform tensor in [lo, hi). Identical seeds give bitwise-identical output.
inline Tensor rand_uniform(Rng& rng, Tensor::Shape shape, float lo, float hi) {
  require(lo < hi, Errc::arg, "rand_uniform: lo must be < hi");
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    double u = rng.next_double();
    float v = static_cast<float>(static_cast<double>(lo) +
                                 u * (static_cast<double>(hi) - static_cast<double>(lo)));
    // f32 rounding may land exactly on hi; keep the interval half-open.
    if (v >= hi) v = std::nextafter(hi, lo);
    t[i] = v;
  }
  return t;
}

}  // namespace saep
