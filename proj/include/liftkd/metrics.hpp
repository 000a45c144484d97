#pragma once

#include <span>
#include <vector>

#include "liftkd/tensor.hpp"

namespace liftkd {

/// Exact W2 between two 1-D empirical distributions with uniform weights
/// (quantile coupling). Inputs need not have equal sizes.
double wasserstein2_1d(std::vector<double> a, std::vector<double> b);

/// Mean over `projections` random unit directions of the 1-D W2 distance
/// between the projected sample sets. Rows are samples; trailing axes are
/// flattened.
double sliced_wasserstein(const Tensor& a, const Tensor& b, std::size_t projections, Rng& rng);

struct MomentGap {
  double mean_err = 0.0;
  double cov_err = 0.0;
};

/// Euclidean norm of the mean difference and Frobenius norm of the (population)
/// covariance difference.
MomentGap moment_gap(const Tensor& a, const Tensor& b);

}  // namespace liftkd
