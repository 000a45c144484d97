#include "liftkd/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace liftkd {

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::Gaussians8: return "gaussians8";
    case DatasetKind::SwissRoll: return "swissroll";
    case DatasetKind::GridPatterns: return "grid-patterns";
  }
  return "unknown";
}

DatasetKind dataset_kind_from_string(const std::string& name) {
  if (name == "gaussians8") return DatasetKind::Gaussians8;
  if (name == "swissroll") return DatasetKind::SwissRoll;
  if (name == "grid-patterns") return DatasetKind::GridPatterns;
  throw std::invalid_argument("unknown dataset '" + name + "'");
}

Shape sample_shape(DatasetKind kind) {
  if (kind == DatasetKind::GridPatterns) return {1, 8, 8};
  return {2};
}

namespace {

constexpr double kRingRadius = std::numbers::sqrt2;
constexpr double kRingStd = 0.1;
constexpr std::size_t kGrid = 8;

void fill_gaussians8(std::span<double> row, Rng& rng) {
  const auto k = rng.uniform_int(0, 7);
  const double angle = static_cast<double>(k) * std::numbers::pi / 4.0;
  row[0] = kRingRadius * std::cos(angle) + kRingStd * rng.normal();
  row[1] = kRingRadius * std::sin(angle) + kRingStd * rng.normal();
}

void fill_swissroll(std::span<double> row, Rng& rng) {
  const double t = 1.5 * std::numbers::pi * (1.0 + 2.0 * rng.uniform());
  // Radius spans [1.5pi, 4.5pi]; dividing by 7 gives roughly unit spread.
  row[0] = t * std::cos(t) / 7.0 + 0.05 * rng.normal();
  row[1] = t * std::sin(t) / 7.0 + 0.05 * rng.normal();
}

void fill_grid_pattern(std::span<double> row, Rng& rng) {
  std::fill(row.begin(), row.end(), 0.0);
  for (int blob = 0; blob < 2; ++blob) {
    const double cy = rng.uniform(0.0, kGrid);
    const double cx = rng.uniform(0.0, kGrid);
    const double width = rng.uniform(1.0, 2.5);
    const double amp = rng.uniform(-1.0, 1.0);
    for (std::size_t y = 0; y < kGrid; ++y) {
      for (std::size_t x = 0; x < kGrid; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        row[y * kGrid + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * width * width));
      }
    }
  }
  for (double& v : row) v = std::clamp(v, -1.0, 1.0);
}

}  // namespace

Tensor make_dataset(DatasetKind kind, std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("make_dataset: count must be positive");
  Shape shape = sample_shape(kind);
  const std::size_t row = element_count(shape);
  shape.insert(shape.begin(), count);
  Tensor data(shape);
  for (std::size_t i = 0; i < count; ++i) {
    auto r = data.values().subspan(i * row, row);
    switch (kind) {
      case DatasetKind::Gaussians8: fill_gaussians8(r, rng); break;
      case DatasetKind::SwissRoll: fill_swissroll(r, rng); break;
      case DatasetKind::GridPatterns: fill_grid_pattern(r, rng); break;
    }
  }
  return data;
}

Tensor draw_batch(const Tensor& data, std::size_t batch, Rng& rng) {
  if (data.rank() < 2) throw ShapeError("draw_batch: data needs a leading sample axis");
  const std::size_t n = data.dim(0);
  const std::size_t row = data.size() / n;
  Shape shape = data.shape();
  shape[0] = batch;
  Tensor out(shape);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto src = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    std::copy_n(data.values().begin() + static_cast<std::ptrdiff_t>(src * row), row,
                out.values().begin() + static_cast<std::ptrdiff_t>(b * row));
  }
  return out;
}

}  // namespace liftkd
