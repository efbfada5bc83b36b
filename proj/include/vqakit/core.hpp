#pragma once

// Core value types shared by every module: the dense float32 tensor, the
// seeded deterministic RNG, and the error types thrown on contract
// violations and I/O failures.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vqakit {

// Thrown when a documented precondition is violated by the caller.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Thrown on malformed files, failed reads/writes and the like.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define VQAKIT_REQUIRE(cond, msg)                  \
  do {                                             \
    if (!(cond)) throw ::vqakit::ContractViolation(msg); \
  } while (0)

namespace numkit {

// Dense row-major float32 array with an explicit shape. Parameters,
// activations and gradients are all carried as Tensors.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int e : shape_) {
      VQAKIT_REQUIRE(e > 0, "Tensor: extents must be positive");
      n *= static_cast<std::size_t>(e);
    }
    data_.assign(n, 0.0f);
  }

  Tensor(std::vector<int> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t n = 1;
    for (int e : shape_) {
      VQAKIT_REQUIRE(e > 0, "Tensor: extents must be positive");
      n *= static_cast<std::size_t>(e);
    }
    VQAKIT_REQUIRE(n == data_.size(), "Tensor: data length != product of extents");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    for (float& x : t.data_) x = v;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  int rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int cols() const { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_[1]; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return {data_.data(), data_.size()}; }
  std::span<const float> span() const { return {data_.data(), data_.size()}; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& operator()(int i, int j) {
    return data_[static_cast<std::size_t>(i) * shape_[1] + j];
  }
  float operator()(int i, int j) const {
    return data_[static_cast<std::size_t>(i) * shape_[1] + j];
  }

  std::span<float> row(int i) {
    return {data_.data() + static_cast<std::size_t>(i) * shape_[1],
            static_cast<std::size_t>(shape_[1])};
  }
  std::span<const float> row(int i) const {
    return {data_.data() + static_cast<std::size_t>(i) * shape_[1],
            static_cast<std::size_t>(shape_[1])};
  }

  void fill(float v) {
    for (float& x : data_) x = v;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (float x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

// Seeded deterministic generator. The algorithm is splitmix64 (Steele et
// al.), chosen because the full draw sequence is fixed by the 64-bit seed
// on every platform. All randomness in the project flows through this.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(next_double());
  }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t next_below(std::uint64_t n) {
    VQAKIT_REQUIRE(n > 0, "Rng::next_below: n must be positive");
    const std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  void fill_uniform(Tensor& t, float lo, float hi) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
  }

  // In-place Fisher-Yates shuffle with draws from this generator.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// 64-bit FNV-1a. Used for vocabulary hashes, config hashes and per-stage
// seed derivation; stable across platforms.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Derives the seed for a named stage from the master seed so stages can be
// re-run in isolation: splitmix64 finalizer over (master ^ fnv1a(stage)).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) {
  std::uint64_t z = master ^ fnv1a64(stage);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace numkit
}  // namespace vqakit
