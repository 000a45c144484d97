#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "liftkd/noise_predictor.hpp"
#include "liftkd/regression.hpp"
#include "liftkd/tensor.hpp"

namespace liftkd {

/// Per-step constants, indexed by t - 1 for t = 1..T.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> sigmas;

  int steps() const { return static_cast<int>(alphas.size()); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }
  double sigma(int t) const { return sigmas.at(static_cast<std::size_t>(t - 1)); }

  /// alpha = 1 - beta, alpha_bar the running product, sigma = sqrt(beta).
  static NoiseSchedule from_betas(std::vector<double> betas);
};

/// Betas linearly spaced from beta_start to beta_end (inclusive).
NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end);

/// The DDPM endpoints (1e-4, 0.02 at T = 1000) rescaled by 1000 / T so that
/// short schedules still end near pure noise.
NoiseSchedule scaled_linear_schedule(int steps);

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
/// Row-wise variant for a batch [B, ...] with one timestep per row.
Tensor forward_noise(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                     const NoiseSchedule& sched);

/// x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z.
/// z must be all zeros at t = 1.
Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& z,
                 const NoiseSchedule& sched);

/// Ancestral sampling from x_T ~ N(0, I). `shape` includes the batch axis.
/// Draw order: x_T, then z for t = T..2.
Tensor sample(const NoisePredictor& model, const NoiseSchedule& sched, Rng& rng,
              const Shape& shape);

struct StepDiagnostics {
  int t = 0;
  std::size_t sample = 0;
  std::size_t channel = 0;
  RegressionCoeffs coeffs;
  double raw_mse = 0.0;
  double corrected_mse = 0.0;
  bool degenerate = false;
};

struct CorrectedSampleResult {
  Tensor x0;
  std::vector<StepDiagnostics> steps;
};

struct CorrectionOptions {
  /// Fit one (beta0, beta1) per channel (axis 1) instead of per sample.
  bool per_channel = false;
};

/// Sampling driven by the student, with each student prediction replaced by
/// its per-sample OLS fit to the teacher prediction before stepping. A
/// degenerate fit leaves the student prediction uncorrected for that scope.
CorrectedSampleResult corrected_sample(const NoisePredictor& teacher, const NoisePredictor& student,
                                       const NoiseSchedule& sched, Rng& rng, const Shape& shape,
                                       const CorrectionOptions& options = {});

/// CSV: t,sample,channel,beta0,beta1,raw_mse,corrected_mse,degenerate
void write_step_diagnostics_csv(std::span<const StepDiagnostics> steps,
                                const std::filesystem::path& path);

/// Exact noise predictor for 1-D Gaussian data N(mean, stddev^2):
/// E[eps | x_t] = sqrt(1 - ab) (x_t - sqrt(ab) mean) / (ab stddev^2 + 1 - ab).
class GaussianOracleDenoiser : public NoisePredictor {
 public:
  GaussianOracleDenoiser(const NoiseSchedule& sched, double mean, double stddev)
      : sched_(sched), mean_(mean), stddev_(stddev) {}
  Tensor predict(const Tensor& x_t, int t) const override;
  /// Posterior mean E[x0 | x_t].
  double posterior_mean(double x_t, int t) const;

 private:
  const NoiseSchedule& sched_;
  double mean_;
  double stddev_;
};

}  // namespace liftkd
