#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace liftkd {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. The product of the shape always equals
/// the number of stored values.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Same data under a new shape with an equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double c);
Tensor operator*(double c, const Tensor& a);

double sum(const Tensor& x);
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> x);

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Population mean and variance (divisor n) of all elements.
Moments moments(std::span<const double> x);
inline Moments moments(const Tensor& x) { return moments(x.values()); }

/// Mersenne Twister 64 (std::mt19937_64, whose output sequence is fixed by the
/// C++ standard) with hand-written uniform and Box-Muller normal transforms so
/// that draws are identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();

  /// Independent stream derived from this generator's seed and a stream id.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used for deriving sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

Tensor randn(Rng& rng, const Shape& shape);

nlohmann::json to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

}  // namespace liftkd
