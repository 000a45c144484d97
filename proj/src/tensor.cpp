#include "liftkd/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace liftkd {

std::size_t element_count(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty()) throw ShapeError("tensor shape must have at least one dimension");
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ShapeError("tensor shape must have at least one dimension");
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator+(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.values()) v += c;
  return out;
}

Tensor operator*(double c, const Tensor& a) {
  Tensor out = a;
  for (double& v : out.values()) v *= c;
  return out;
}

double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> x) { return std::sqrt(dot(x, x)); }

Moments moments(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("moments: empty input");
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += v;
  const double mean = s / n;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return {mean, ss / n};
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(engine_());
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return lo + static_cast<std::int64_t>(r % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng Rng::split(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

Tensor randn(Rng& rng, const Shape& shape) {
  if (shape.empty()) throw ShapeError("randn: shape must be nonempty");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("randn: zero-sized dimension in " + shape_string(shape));
  }
  Tensor out(shape);
  for (double& v : out.values()) v = rng.normal();
  return out;
}

nlohmann::json to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", t.data()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace liftkd
