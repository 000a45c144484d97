#pragma once

// Distillation objectives on noise predictions.
//
// All losses reduce with a mean over elements. Gradients are with respect to
// the student prediction. LIFT fits its regression coefficients from the
// current pair; with CoeffGrad::Stop (the default) those coefficients are
// treated as constants, so the coarse term has no gradient path to the student
// and shapes training only through the weight w (and, under PLACE, through the
// per-step regrouping). CoeffGrad::Full differentiates through the OLS
// solution as well.

#include <functional>
#include <span>
#include <string>

#include "liftkd/linear_map.hpp"
#include "liftkd/regression.hpp"
#include "liftkd/tensor.hpp"

namespace liftkd {

enum class CoeffGrad { Stop, Full };

struct WeightScheduler {
  enum class Kind { Adaptive, Linear, Cosine, Fixed };
  Kind kind = Kind::Adaptive;
  long total_iters = 1;
  double fixed_value = 1.0;

  static WeightScheduler adaptive() { return {Kind::Adaptive, 1, 1.0}; }
  static WeightScheduler linear(long total) { return {Kind::Linear, total, 1.0}; }
  static WeightScheduler cosine(long total) { return {Kind::Cosine, total, 1.0}; }
  static WeightScheduler fixed(double value) { return {Kind::Fixed, 1, value}; }
};

std::string to_string(WeightScheduler::Kind kind);
WeightScheduler::Kind scheduler_kind_from_string(const std::string& name);

/// Per-step record of every loss term. Inactive terms are zero.
struct LossBreakdown {
  long iter = 0;
  double l_diff = 0.0;
  double l_outkd = 0.0;
  double l_featkd = 0.0;
  double l_coarse = 0.0;
  double l_fine = 0.0;
  double w = 0.0;
  double l_lift = 0.0;
  double total = 0.0;
};

double mse(std::span<const double> a, std::span<const double> b);

double outkd_loss(const Tensor& eps_t, const Tensor& eps_s);
Tensor outkd_gradient(const Tensor& eps_t, const Tensor& eps_s);

/// MSE between teacher features and regressor(student features); rows are
/// positions, columns are channels.
double featkd_loss(const Tensor& f_t, const Tensor& f_s, const LinearMap& regressor);

struct FeatKdGradients {
  double loss = 0.0;
  Tensor d_student_features;
  std::vector<double> d_regressor;
};
FeatKdGradients featkd_gradient(const Tensor& f_t, const Tensor& f_s, const LinearMap& regressor);

double coarse_loss(const RegressionCoeffs& coeffs, bool relaxed_l2 = false);
double fine_loss(const Tensor& eps_t, const Tensor& eps_s, const RegressionCoeffs& coeffs);
/// Gradient of fine_loss with the coefficients held fixed.
Tensor fine_gradient(const Tensor& eps_t, const Tensor& eps_s, const RegressionCoeffs& coeffs);

double adaptive_weight(double l_coarse);
double scheduled_weight(const WeightScheduler& sched, long iter, double l_coarse);

struct LiftOptions {
  bool relaxed_l2 = false;
  CoeffGrad coeff_grad = CoeffGrad::Stop;
};

struct LiftTerms {
  double loss = 0.0;
  double coarse = 0.0;
  double fine = 0.0;
  double w = 0.0;
  RegressionCoeffs coeffs;
  bool degenerate = false;
};

/// L_coarse + w * L_fine over one element set. The weight is chosen from the
/// fitted coarse loss via `weight_of_coarse`. On degenerate source variance
/// the shift-only fallback is used (and treated as constant for gradients).
/// When `grad` is nonempty, grad_scale * dL/dsource is added into it.
LiftTerms lift_terms(std::span<const double> target, std::span<const double> source,
                     const std::function<double(double)>& weight_of_coarse,
                     const LiftOptions& options, std::span<double> grad = {},
                     double grad_scale = 1.0);

/// LIFT with a given weight. Throws DegenerateVariance when the student output
/// is constant. When `grad` is non-null it receives dL/d(eps_s).
LiftTerms lift_loss(const Tensor& eps_t, const Tensor& eps_s, double w,
                    const LiftOptions& options = {}, Tensor* grad = nullptr);

}  // namespace liftkd
