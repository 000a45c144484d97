#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "liftkd/tensor.hpp"

namespace liftkd {

/// Affine map y = W x + b applied row-wise to a [rows, in_dim] tensor. Used as
/// the feature regressor that lifts student features to the teacher width.
class LinearMap {
 public:
  LinearMap() = default;
  LinearMap(std::size_t in_dim, std::size_t out_dim);
  /// Kaiming-uniform weights, zero bias.
  LinearMap(std::size_t in_dim, std::size_t out_dim, Rng& rng);

  static LinearMap identity(std::size_t dim);

  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }

  /// Weights (row-major out_dim x in_dim) followed by the bias.
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }

  double weight(std::size_t row, std::size_t col) const { return params_[row * in_dim_ + col]; }
  double bias(std::size_t row) const { return params_[out_dim_ * in_dim_ + row]; }

  Tensor apply(const Tensor& x) const;

  struct Gradients {
    std::vector<double> params;
    Tensor input;
  };
  /// Gradients of a scalar loss given dL/dy for y = apply(x).
  Gradients backward(const Tensor& x, const Tensor& d_out) const;

 private:
  std::size_t in_dim_ = 0;
  std::size_t out_dim_ = 0;
  std::vector<double> params_;
};

}  // namespace liftkd
