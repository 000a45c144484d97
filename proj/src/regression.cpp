#include "liftkd/regression.hpp"

#include <cmath>
#include <string>

namespace liftkd {

DegenerateVariance::DegenerateVariance(double variance, RegressionCoeffs fallback)
    : std::runtime_error("degenerate source variance " + std::to_string(variance)),
      variance_(variance),
      fallback_(fallback) {}

OlsFit try_ols_fit(std::span<const double> target, std::span<const double> source) {
  if (target.size() != source.size()) throw ShapeError("ols_fit: length mismatch");
  if (source.size() < 2) throw std::invalid_argument("ols_fit: need at least two points");

  const double n = static_cast<double>(source.size());
  double sum_t = 0.0, sum_s = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    sum_t += target[i];
    sum_s += source[i];
  }
  OlsFit fit;
  fit.mean_target = sum_t / n;
  fit.mean_source = sum_s / n;

  double cov = 0.0, var = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const double ds = source[i] - fit.mean_source;
    cov += (target[i] - fit.mean_target) * ds;
    var += ds * ds;
  }
  cov /= n;
  var /= n;
  fit.var_source = var;

  if (!(var > kDegenerateVariance)) {
    fit.degenerate = true;
    fit.coeffs = {fit.mean_target - fit.mean_source, 1.0};
    return fit;
  }
  fit.coeffs.beta1 = cov / var;
  fit.coeffs.beta0 = fit.mean_target - fit.coeffs.beta1 * fit.mean_source;
  return fit;
}

RegressionCoeffs ols_fit(const Tensor& target, const Tensor& source) {
  require_same_shape(target, source, "ols_fit");
  const OlsFit fit = try_ols_fit(target.values(), source.values());
  if (fit.degenerate) throw DegenerateVariance(fit.var_source, fit.coeffs);
  return fit.coeffs;
}

Tensor affine_correct(const Tensor& source, const RegressionCoeffs& coeffs) {
  if (!std::isfinite(coeffs.beta0) || !std::isfinite(coeffs.beta1)) {
    throw std::invalid_argument("affine_correct: non-finite coefficients");
  }
  Tensor out = source;
  for (double& v : out.values()) v = coeffs.beta0 + coeffs.beta1 * v;
  return out;
}

}  // namespace liftkd
