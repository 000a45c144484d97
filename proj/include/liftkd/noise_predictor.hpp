#pragma once

#include "liftkd/tensor.hpp"

namespace liftkd {

/// Anything that maps a batch of noisy inputs [B, ...] at timestep t to a
/// noise prediction of the same shape.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Tensor predict(const Tensor& x_t, int t) const = 0;
};

}  // namespace liftkd
