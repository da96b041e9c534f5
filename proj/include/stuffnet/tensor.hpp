#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stuffnet {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

inline size_t shape_numel(const Shape& dims) {
  size_t n = 1;
  for (int d : dims) n *= static_cast<size_t>(d);
  return n;
}

// Dense row-major float64 tensor of rank 1-4 with an optional gradient slot.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape dims, double fill = 0.0) : dims_(std::move(dims)) {
    validate_dims(dims_);
    data_.assign(shape_numel(dims_), fill);
  }

  Tensor(Shape dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims(dims_);
    if (data_.size() != shape_numel(dims_))
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                            " does not match dims " + shape_str(dims_));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& dims() const { return dims_; }
  int dim(size_t i) const { return dims_.at(i); }
  size_t rank() const { return dims_.size(); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](size_t i) { return data_[i]; }
  const double& operator[](size_t i) const { return data_[i]; }

  double& at(int n, int c, int y, int x) {
    return data_[((static_cast<size_t>(n) * dims_[1] + c) * dims_[2] + y) * dims_[3] + x];
  }
  double at(int n, int c, int y, int x) const {
    return data_[((static_cast<size_t>(n) * dims_[1] + c) * dims_[2] + y) * dims_[3] + x];
  }

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  void ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }
  void drop_grad() { grad_.clear(); }

  void reshape(Shape dims) {
    validate_dims(dims);
    if (shape_numel(dims) != data_.size())
      throw InvalidArgument("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    dims_ = std::move(dims);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Bitwise equality of dims and values.
  bool identical(const Tensor& o) const {
    if (dims_ != o.dims_ || data_.size() != o.data_.size()) return false;
    for (size_t i = 0; i < data_.size(); ++i) {
      uint64_t a, b;
      std::memcpy(&a, &data_[i], 8);
      std::memcpy(&b, &o.data_[i], 8);
      if (a != b) return false;
    }
    return true;
  }

 private:
  static void validate_dims(const Shape& dims) {
    if (dims.empty() || dims.size() > 4)
      throw InvalidArgument("tensor rank must be 1-4, got " + std::to_string(dims.size()));
    for (int d : dims)
      if (d <= 0) throw InvalidArgument("tensor dims must be positive: " + shape_str(dims));
  }

  Shape dims_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

// SplitMix64, used to seed and split xorshift streams.
constexpr uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// xorshift64* generator with splittable named streams. Satisfies
// UniformRandomBitGenerator so it can drive std::shuffle.
class Rng {
 public:
  using result_type = uint64_t;

  explicit Rng(uint64_t seed = 0) : seed_(seed) {
    uint64_t s = seed;
    state_ = splitmix64(s);
    if (state_ == 0) state_ = 0x2545F4914F6CDD1DULL;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<uint64_t>::max(); }

  result_type operator()() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  // Independent stream derived from this generator's seed and a stream id.
  Rng split(uint64_t stream) const {
    uint64_t s = seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
    return Rng(splitmix64(s));
  }
  Rng split(const std::string& name) const { return split(fnv1a(name)); }

  // Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>((*this)() % span);
  }

  uint64_t seed() const { return seed_; }

  static uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  uint64_t seed_;
  uint64_t state_;
};

/// Glorot/Xavier uniform initialization: i.i.d. U[-a, a], a = gain * sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_init(int fan_in, int fan_out, const Shape& dims, uint64_t seed, double gain = 1.0) {
  if (fan_in < 1 || fan_out < 1)
    throw InvalidArgument("xavier_init: fan_in and fan_out must be >= 1");
  Tensor t(dims);
  const double a = gain * std::sqrt(6.0 / (fan_in + fan_out));
  Rng rng(seed);
  for (double& v : t.data()) v = rng.uniform(-a, a);
  return t;
}

}  // namespace stuffnet
