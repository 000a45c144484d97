#include "liftkd/kd_losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace liftkd {

namespace {

double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

}  // namespace

std::string to_string(WeightScheduler::Kind kind) {
  switch (kind) {
    case WeightScheduler::Kind::Adaptive: return "adaptive";
    case WeightScheduler::Kind::Linear: return "linear";
    case WeightScheduler::Kind::Cosine: return "cosine";
    case WeightScheduler::Kind::Fixed: return "fixed";
  }
  return "unknown";
}

WeightScheduler::Kind scheduler_kind_from_string(const std::string& name) {
  if (name == "adaptive") return WeightScheduler::Kind::Adaptive;
  if (name == "linear") return WeightScheduler::Kind::Linear;
  if (name == "cosine") return WeightScheduler::Kind::Cosine;
  if (name == "fixed") return WeightScheduler::Kind::Fixed;
  throw std::invalid_argument("unknown scheduler '" + name + "'");
}

double mse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("mse: length mismatch");
  if (a.empty()) throw std::invalid_argument("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double outkd_loss(const Tensor& eps_t, const Tensor& eps_s) {
  require_same_shape(eps_t, eps_s, "outkd_loss");
  return mse(eps_t.values(), eps_s.values());
}

Tensor outkd_gradient(const Tensor& eps_t, const Tensor& eps_s) {
  require_same_shape(eps_t, eps_s, "outkd_gradient");
  Tensor g(eps_s.shape());
  const double scale = 2.0 / static_cast<double>(eps_s.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = scale * (eps_s[i] - eps_t[i]);
  return g;
}

namespace {

void check_feature_shapes(const Tensor& f_t, const Tensor& f_s, const LinearMap& regressor) {
  if (f_t.rank() != 2 || f_s.rank() != 2) throw ShapeError("featkd: features must be [rows, dim]");
  if (f_s.dim(1) != regressor.in_dim()) {
    throw ShapeError("featkd: student feature dim " + std::to_string(f_s.dim(1)) +
                     " does not match regressor input " + std::to_string(regressor.in_dim()));
  }
  if (f_t.dim(1) != regressor.out_dim() || f_t.dim(0) != f_s.dim(0)) {
    throw ShapeError("featkd: mapped student features " + std::to_string(f_s.dim(0)) + "x" +
                     std::to_string(regressor.out_dim()) + " do not match teacher features " +
                     shape_string(f_t.shape()));
  }
}

}  // namespace

double featkd_loss(const Tensor& f_t, const Tensor& f_s, const LinearMap& regressor) {
  check_feature_shapes(f_t, f_s, regressor);
  const Tensor mapped = regressor.apply(f_s);
  return mse(f_t.values(), mapped.values());
}

FeatKdGradients featkd_gradient(const Tensor& f_t, const Tensor& f_s, const LinearMap& regressor) {
  check_feature_shapes(f_t, f_s, regressor);
  const Tensor mapped = regressor.apply(f_s);
  FeatKdGradients out;
  out.loss = mse(f_t.values(), mapped.values());
  auto grads = regressor.backward(f_s, outkd_gradient(f_t, mapped));
  out.d_student_features = std::move(grads.input);
  out.d_regressor = std::move(grads.params);
  return out;
}

double coarse_loss(const RegressionCoeffs& coeffs, bool relaxed_l2) {
  const double d1 = coeffs.beta1 - 1.0;
  if (relaxed_l2) return coeffs.beta0 * coeffs.beta0 + d1 * d1;
  return std::abs(coeffs.beta0) + std::abs(d1);
}

double fine_loss(const Tensor& eps_t, const Tensor& eps_s, const RegressionCoeffs& coeffs) {
  require_same_shape(eps_t, eps_s, "fine_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < eps_s.size(); ++i) {
    const double r = eps_t[i] - (coeffs.beta0 + coeffs.beta1 * eps_s[i]);
    s += r * r;
  }
  return s / static_cast<double>(eps_s.size());
}

Tensor fine_gradient(const Tensor& eps_t, const Tensor& eps_s, const RegressionCoeffs& coeffs) {
  require_same_shape(eps_t, eps_s, "fine_gradient");
  Tensor g(eps_s.shape());
  const double scale = -2.0 * coeffs.beta1 / static_cast<double>(eps_s.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = scale * (eps_t[i] - (coeffs.beta0 + coeffs.beta1 * eps_s[i]));
  }
  return g;
}

double adaptive_weight(double l_coarse) {
  if (!(l_coarse >= 0.0)) throw std::invalid_argument("adaptive_weight: negative coarse loss");
  return 1.0 - std::min(1.0, l_coarse);
}

double scheduled_weight(const WeightScheduler& sched, long iter, double l_coarse) {
  using Kind = WeightScheduler::Kind;
  double w = 0.0;
  switch (sched.kind) {
    case Kind::Adaptive:
      w = adaptive_weight(l_coarse);
      break;
    case Kind::Linear:
    case Kind::Cosine: {
      if (sched.total_iters < 1) throw std::invalid_argument("scheduler: total_iters must be >= 1");
      if (iter < 0 || iter > sched.total_iters) {
        throw std::out_of_range("scheduler: iteration " + std::to_string(iter) +
                                " outside [0, " + std::to_string(sched.total_iters) + "]");
      }
      if (iter == sched.total_iters) return 1.0;
      const double frac = static_cast<double>(iter) / static_cast<double>(sched.total_iters);
      // 1 - cos(pi f) written as 1 + sin(pi (f - 1/2)) so the midpoint is exactly 0.5.
      w = sched.kind == Kind::Linear ? frac : 0.5 * (1.0 + std::sin((frac - 0.5) * std::numbers::pi));
      break;
    }
    case Kind::Fixed:
      w = sched.fixed_value;
      break;
  }
  return std::clamp(w, 0.0, 1.0);
}

LiftTerms lift_terms(std::span<const double> target, std::span<const double> source,
                     const std::function<double(double)>& weight_of_coarse,
                     const LiftOptions& options, std::span<double> grad, double grad_scale) {
  const OlsFit fit = try_ols_fit(target, source);
  const RegressionCoeffs& c = fit.coeffs;
  const std::size_t n = source.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  LiftTerms terms;
  terms.coeffs = c;
  terms.degenerate = fit.degenerate;
  terms.coarse = coarse_loss(c, options.relaxed_l2);
  terms.w = weight_of_coarse(terms.coarse);

  double sum_r2 = 0.0, sum_r = 0.0, sum_rs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = target[i] - (c.beta0 + c.beta1 * source[i]);
    sum_r2 += r * r;
    sum_r += r;
    sum_rs += r * source[i];
  }
  terms.fine = sum_r2 * inv_n;
  terms.loss = terms.coarse + terms.w * terms.fine;

  if (grad.empty()) return terms;
  if (grad.size() != n) throw ShapeError("lift_terms: gradient buffer length mismatch");

  // Direct path through the residual at fixed coefficients.
  const double direct = -2.0 * inv_n * c.beta1 * terms.w;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = target[i] - (c.beta0 + c.beta1 * source[i]);
    grad[i] += grad_scale * direct * r;
  }
  if (options.coeff_grad == CoeffGrad::Stop || fit.degenerate) return terms;

  // Chain rule through beta1 = Cov/Var and beta0 = mean_t - beta1 * mean_s.
  const double d_coarse_b0 = options.relaxed_l2 ? 2.0 * c.beta0 : sign(c.beta0);
  const double d_coarse_b1 = options.relaxed_l2 ? 2.0 * (c.beta1 - 1.0) : sign(c.beta1 - 1.0);
  const double g0 = d_coarse_b0 - terms.w * 2.0 * inv_n * sum_r;
  const double g1 = d_coarse_b1 - terms.w * 2.0 * inv_n * sum_rs;
  const double denom = static_cast<double>(n) * fit.var_source;
  for (std::size_t i = 0; i < n; ++i) {
    const double d_b1 = ((target[i] - fit.mean_target) -
                         2.0 * c.beta1 * (source[i] - fit.mean_source)) / denom;
    const double d_b0 = -c.beta1 * inv_n - fit.mean_source * d_b1;
    grad[i] += grad_scale * (g0 * d_b0 + g1 * d_b1);
  }
  return terms;
}

LiftTerms lift_loss(const Tensor& eps_t, const Tensor& eps_s, double w, const LiftOptions& options,
                    Tensor* grad) {
  require_same_shape(eps_t, eps_s, "lift_loss");
  if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("lift_loss: w must lie in [0, 1]");
  const OlsFit probe = try_ols_fit(eps_t.values(), eps_s.values());
  if (probe.degenerate) throw DegenerateVariance(probe.var_source, probe.coeffs);

  std::span<double> g;
  if (grad != nullptr) {
    *grad = Tensor(eps_s.shape());
    g = grad->values();
  }
  return lift_terms(eps_t.values(), eps_s.values(), [w](double) { return w; }, options, g);
}

}  // namespace liftkd
