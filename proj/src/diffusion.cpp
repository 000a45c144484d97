#include "liftkd/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "liftkd/kd_losses.hpp"

namespace liftkd {

namespace {

void check_step(const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(sched.steps()) + "]");
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("schedule: need at least one step");
  NoiseSchedule s;
  double running = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("schedule: beta must lie in (0, 1)");
    const double a = 1.0 - b;
    running *= a;
    s.alphas.push_back(a);
    s.alpha_bars.push_back(running);
    s.sigmas.push_back(std::sqrt(b));
  }
  s.betas = std::move(betas);
  return s;
}

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("linear_schedule: steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

NoiseSchedule scaled_linear_schedule(int steps) {
  if (steps < 1) throw std::invalid_argument("scaled_linear_schedule: steps must be >= 1");
  const double scale = 1000.0 / steps;
  return linear_schedule(steps, 1e-4 * scale, std::min(0.02 * scale, 0.999));
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_noise");
  check_step(sched, t);
  const double a = std::sqrt(sched.alpha_bar(t));
  const double b = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor forward_noise(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                     const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_noise");
  if (x0.rank() < 2 || t.size() != x0.dim(0)) {
    throw ShapeError("forward_noise: need one timestep per batch row");
  }
  const std::size_t row = x0.size() / x0.dim(0);
  Tensor out(x0.shape());
  for (std::size_t b = 0; b < t.size(); ++b) {
    check_step(sched, t[b]);
    const double ca = std::sqrt(sched.alpha_bar(t[b]));
    const double cb = std::sqrt(1.0 - sched.alpha_bar(t[b]));
    for (std::size_t i = b * row; i < (b + 1) * row; ++i) out[i] = ca * x0[i] + cb * eps[i];
  }
  return out;
}

Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& z,
                 const NoiseSchedule& sched) {
  require_same_shape(x_t, eps_hat, "ddpm_step");
  require_same_shape(x_t, z, "ddpm_step");
  check_step(sched, t);
  if (t == 1) {
    for (double v : z.values()) {
      if (v != 0.0) throw std::invalid_argument("ddpm_step: z must be zero at t = 1");
    }
  }
  const double alpha = sched.alpha(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double eps_coef = (1.0 - alpha) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sigma = sched.sigma(t);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_hat[i]) + sigma * z[i];
  }
  return out;
}

namespace {

Tensor draw_z(Rng& rng, const Shape& shape, int t) {
  return t > 1 ? randn(rng, shape) : Tensor(shape, 0.0);
}

}  // namespace

Tensor sample(const NoisePredictor& model, const NoiseSchedule& sched, Rng& rng,
              const Shape& shape) {
  Tensor x = randn(rng, shape);
  for (int t = sched.steps(); t >= 1; --t) {
    const Tensor eps_hat = model.predict(x, t);
    x = ddpm_step(x, t, eps_hat, draw_z(rng, shape, t), sched);
  }
  return x;
}

CorrectedSampleResult corrected_sample(const NoisePredictor& teacher, const NoisePredictor& student,
                                       const NoiseSchedule& sched, Rng& rng, const Shape& shape,
                                       const CorrectionOptions& options) {
  if (shape.size() < 2) throw ShapeError("corrected_sample: shape needs a batch axis");
  if (options.per_channel && shape.size() < 3) {
    throw ShapeError("corrected_sample: per-channel fitting needs [B, C, ...]");
  }
  const std::size_t batch = shape[0];
  const std::size_t channels = options.per_channel ? shape[1] : 1;
  const std::size_t scope = element_count(shape) / (batch * channels);

  CorrectedSampleResult result;
  Tensor x = randn(rng, shape);
  for (int t = sched.steps(); t >= 1; --t) {
    const Tensor eps_t = teacher.predict(x, t);
    const Tensor eps_s = student.predict(x, t);
    require_same_shape(eps_t, x, "corrected_sample teacher");
    require_same_shape(eps_s, x, "corrected_sample student");
    Tensor corrected = eps_s;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t begin = (b * channels + c) * scope;
        const auto tv = eps_t.values().subspan(begin, scope);
        const auto sv = eps_s.values().subspan(begin, scope);
        auto cv = corrected.values().subspan(begin, scope);
        StepDiagnostics diag;
        diag.t = t;
        diag.sample = b;
        diag.channel = c;
        const OlsFit fit = try_ols_fit(tv, sv);
        diag.degenerate = fit.degenerate;
        diag.coeffs = fit.coeffs;
        if (!fit.degenerate) {
          for (std::size_t i = 0; i < scope; ++i) {
            cv[i] = fit.coeffs.beta0 + fit.coeffs.beta1 * sv[i];
          }
        }
        diag.raw_mse = mse(tv, sv);
        diag.corrected_mse = mse(tv, cv);
        result.steps.push_back(diag);
      }
    }
    x = ddpm_step(x, t, corrected, draw_z(rng, shape, t), sched);
  }
  result.x0 = std::move(x);
  return result;
}

void write_step_diagnostics_csv(std::span<const StepDiagnostics> steps,
                                const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "t,sample,channel,beta0,beta1,raw_mse,corrected_mse,degenerate\n";
  for (const auto& s : steps) {
    out << s.t << ',' << s.sample << ',' << s.channel << ',' << s.coeffs.beta0 << ','
        << s.coeffs.beta1 << ',' << s.raw_mse << ',' << s.corrected_mse << ','
        << (s.degenerate ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor GaussianOracleDenoiser::predict(const Tensor& x_t, int t) const {
  check_step(sched_, t);
  const double ab = sched_.alpha_bar(t);
  const double gain = std::sqrt(1.0 - ab) / (ab * stddev_ * stddev_ + 1.0 - ab);
  const double center = std::sqrt(ab) * mean_;
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gain * (x_t[i] - center);
  return out;
}

double GaussianOracleDenoiser::posterior_mean(double x_t, int t) const {
  check_step(sched_, t);
  const double ab = sched_.alpha_bar(t);
  const double var_x = ab * stddev_ * stddev_ + 1.0 - ab;
  return mean_ + stddev_ * stddev_ * std::sqrt(ab) / var_x * (x_t - std::sqrt(ab) * mean_);
}

}  // namespace liftkd
