#pragma once

#include <span>
#include <stdexcept>

#include "liftkd/tensor.hpp"

namespace liftkd {

/// Intercept and slope of the scalar affine map target ~ beta0 + beta1 * source.
struct RegressionCoeffs {
  double beta0 = 0.0;
  double beta1 = 1.0;

  bool operator==(const RegressionCoeffs&) const = default;
};

/// Source variance at or below this is treated as degenerate.
inline constexpr double kDegenerateVariance = 1e-12;

/// Thrown when the source has (numerically) no variance. Carries the shift-only
/// fallback (beta1 = 1, beta0 = mean(target) - mean(source)).
class DegenerateVariance : public std::runtime_error {
 public:
  DegenerateVariance(double variance, RegressionCoeffs fallback);
  double variance() const { return variance_; }
  const RegressionCoeffs& fallback() const { return fallback_; }

 private:
  double variance_;
  RegressionCoeffs fallback_;
};

/// Result of a fit that never throws on degenerate input.
struct OlsFit {
  RegressionCoeffs coeffs;
  double mean_target = 0.0;
  double mean_source = 0.0;
  double var_source = 0.0;
  bool degenerate = false;
};

/// Population-moment OLS. On degenerate variance, returns the fallback
/// coefficients with `degenerate` set.
OlsFit try_ols_fit(std::span<const double> target, std::span<const double> source);

/// beta1 = Cov(target, source) / Var(source), beta0 = mean(target) - beta1 * mean(source).
RegressionCoeffs ols_fit(const Tensor& target, const Tensor& source);

/// Elementwise beta0 + beta1 * source.
Tensor affine_correct(const Tensor& source, const RegressionCoeffs& coeffs);

}  // namespace liftkd
