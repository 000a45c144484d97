#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "liftkd/config.hpp"
#include "liftkd/kd_losses.hpp"
#include "liftkd/metrics.hpp"
#include "liftkd/models.hpp"

namespace liftkd {

struct RunReport {
  std::uint64_t seed = 0;
  std::vector<LossBreakdown> log;
  /// |grad_theta L_diff| of the student on each step's batch.
  std::vector<double> grad_norms;
  double final_sw = 0.0;
  MomentGap final_moments;
  double wall_seconds = 0.0;
  std::size_t degenerate_fits = 0;
  bool diverged = false;
  long diverged_step = -1;
  Denoiser student;
  LinearMap regressor;
};

/// Non-finite loss or parameters. Carries the step index and, for
/// distillation, the report up to the failing step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long step, const std::string& what, std::optional<RunReport> partial = {});
  long step() const { return step_; }
  const std::optional<RunReport>& partial() const { return partial_; }

 private:
  long step_;
  std::optional<RunReport> partial_;
};

/// Seed derivation. Every stream is mix_seed(root, id) with these ids.
namespace streams {
inline constexpr std::uint64_t kTrainData = 1;
inline constexpr std::uint64_t kTeacherInit = 2;
inline constexpr std::uint64_t kTeacherTrain = 3;
inline constexpr std::uint64_t kEvalData = 4;
inline constexpr std::uint64_t kProjections = 5;
// Per-run streams, split from the run seed.
inline constexpr std::uint64_t kStudentInit = 10;
inline constexpr std::uint64_t kBatches = 11;
inline constexpr std::uint64_t kEvalSampling = 12;
inline constexpr std::uint64_t kRegressorInit = 13;
}  // namespace streams

Tensor training_data(const HarnessConfig& cfg);
Tensor evaluation_data(const HarnessConfig& cfg);

/// Plain denoising training against the sampled noise.
Denoiser train_teacher(const HarnessConfig& cfg, Rng& rng);
/// Continue training an existing model (used by train_teacher).
void train_denoiser(Denoiser& model, const HarnessConfig& cfg, long iterations, double lr,
                    Rng& rng);

/// Models and data for a single loss-stack evaluation.
struct LossInputs {
  const Tensor& noise;
  const ForwardResult& teacher;
  const ForwardResult& student;
};

struct LossGradients {
  Tensor d_eps_total;
  Tensor d_eps_diff;
  std::vector<FeatureGradient> feature_grads;
  std::vector<double> d_regressor;
};

struct LossEvaluation {
  LossBreakdown breakdown;
  std::size_t degenerate_fits = 0;
  LossGradients grads;
};

/// Evaluates the configured objective
///   lambda_diff L_diff + lambda_outkd L_OutKD + lambda_lift L_LIFT + lambda_featkd L_FeatKD
/// where only the terms selected by cfg.method contribute. `coarse_state`
/// carries the smoothed coarse loss when cfg.coarse_ema > 0.
LossEvaluation evaluate_loss_stack(const HarnessConfig& cfg, const LossInputs& in,
                                   const LinearMap& regressor, long iter, bool want_grad,
                                   std::optional<double>* coarse_state = nullptr);

/// Resolves a possibly negative feature layer index against a width list.
std::size_t feature_layer(int index, const std::vector<std::size_t>& widths);

/// Student and regressor initialization for a run seed.
Denoiser init_student(const HarnessConfig& cfg, std::uint64_t run_seed);
LinearMap init_regressor(const HarnessConfig& cfg, const Denoiser& teacher,
                         const Denoiser& student, std::uint64_t run_seed);

/// Distills a fresh student from a frozen teacher. Throws DivergenceError
/// with the partial report if the objective becomes non-finite.
RunReport distill(const HarnessConfig& cfg, const Denoiser& teacher, std::uint64_t run_seed);

struct SampleQuality {
  double sw = 0.0;
  MomentGap moments;
};
/// Samples cfg.eval_samples points and compares with the held-out set.
SampleQuality evaluate_samples(const HarnessConfig& cfg, const NoisePredictor& model, Rng& rng);

/// CSV: step,l_diff,l_outkd,l_coarse,l_fine,w,l_lift,l_featkd,total,grad_norm
void write_run_csv(const RunReport& report, const std::filesystem::path& path);

struct GridRun {
  Method method;
  std::vector<std::size_t> teacher_widths;
  std::size_t teacher_params = 0;
  std::vector<std::size_t> student_widths;
  std::size_t student_params = 0;
  std::uint64_t seed = 0;
  double final_sw = 0.0;
  MomentGap moments;
  bool diverged = false;
};

struct GridCell {
  Method method;
  std::size_t teacher_params = 0;
  std::size_t student_params = 0;
  double mean = 0.0;
  /// Sample standard deviation over non-diverged runs (0 with fewer than 2).
  double std = 0.0;
  std::size_t completed = 0;
  std::size_t diverged = 0;
};

struct GridResult {
  std::vector<GridRun> runs;
  std::vector<GridCell> cells;
  const GridCell& cell(const Method& m, std::size_t teacher_params, std::size_t student_params) const;
};

/// Teachers x students x methods x seeds. One teacher is trained per teacher
/// width list (or loaded when exactly one teacher is configured together with
/// run.teacher_checkpoint). Runs are distributed over `workers` threads;
/// results keep grid order regardless of scheduling.
GridResult capacity_gap_experiment(const HarnessConfig& cfg, std::size_t workers = 1,
                                   const std::vector<Denoiser>* teachers = nullptr);

/// CSV: method,teacher_params,student_params,seed,final_sw,mean,std,diverged
void write_grid_csv(const GridResult& grid, const std::filesystem::path& path);

struct SchedulerAblation {
  std::vector<WeightScheduler::Kind> kinds;
  std::vector<RunReport> reports;
};
/// Distills with the adaptive, linear and cosine weight schedules.
SchedulerAblation ablate_scheduler(const HarnessConfig& cfg, const Denoiser& teacher);
/// CSV: scheduler,final_sw,mean_err,cov_err,final_total
void write_ablation_csv(const SchedulerAblation& ablation, const std::filesystem::path& path);

}  // namespace liftkd
