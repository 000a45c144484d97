#pragma once

// Run configuration.
//
// Text format: `[section]` headers followed by `key = value` lines, where each
// value is a JSON literal (number, true/false, "string", or array). `#` starts
// a comment line. Unknown sections or keys are validation errors.
//
//   [data]
//   kind = "gaussians8"
//   samples = 4096
//
//   [model]
//   teacher_widths = [256, 256, 256]

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "liftkd/datasets.hpp"
#include "liftkd/diffusion.hpp"
#include "liftkd/kd_losses.hpp"

namespace liftkd {

/// Validation failure naming the offending `section.key`.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Which output-level distillation term is part of the objective.
enum class KdMode { None, OutKd, Lift, Place };
enum class DiffTarget { Noise, Teacher };

std::string to_string(KdMode mode);
KdMode kd_mode_from_string(const std::string& name);

/// Objective selection for one grid column, written as e.g. "outkd",
/// "outkd+featkd", "place", "finetune".
struct Method {
  KdMode kd = KdMode::None;
  bool featkd = false;

  std::string name() const;
  static Method parse(const std::string& name);
};

struct HarnessConfig {
  // [data]
  DatasetKind dataset = DatasetKind::Gaussians8;
  std::size_t samples = 4096;

  // [schedule]
  int steps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;

  // [model]
  std::vector<std::size_t> teacher_widths{256, 256, 256};
  std::vector<std::size_t> student_widths{64, 64};
  int teacher_feature_layer = -1;
  int student_feature_layer = -1;

  // [loss]
  Method method{KdMode::Place, false};
  double lambda_diff = 1.0;
  double lambda_outkd = 1.0;
  double lambda_lift = 1.0;
  double lambda_featkd = 1e-6;
  std::size_t group_size = 16;
  WeightScheduler::Kind scheduler = WeightScheduler::Kind::Adaptive;
  double fixed_w = 1.0;
  bool relaxed_l2 = false;
  CoeffGrad coeff_grad = CoeffGrad::Stop;
  DiffTarget diff_target = DiffTarget::Teacher;
  bool pooled_w = false;
  double coarse_ema = 0.0;

  // [train]
  long iterations = 2000;
  std::size_t batch_size = 128;
  double lr = 2e-4;
  long teacher_iterations = 5000;
  double teacher_lr = 1e-3;

  // [eval]
  std::size_t eval_samples = 2000;
  std::size_t projections = 128;

  // [run]
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string teacher_checkpoint;
  std::string student_checkpoint;
  int error_map_t = 50;
  std::size_t correct_samples = 4;

  // [grid]
  std::vector<std::vector<std::size_t>> grid_teachers{{256, 256, 256}};
  std::vector<std::vector<std::size_t>> grid_students{{4, 4}};
  std::vector<Method> grid_methods{Method{KdMode::OutKd, false}, Method{KdMode::Place, false}};

  NoiseSchedule schedule() const { return linear_schedule(steps, beta_start, beta_end); }
  WeightScheduler weight_scheduler() const;
  Shape sample_shape() const { return liftkd::sample_shape(dataset); }

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  bool operator==(const HarnessConfig&) const = default;
};

inline bool operator==(const Method& a, const Method& b) {
  return a.kd == b.kd && a.featkd == b.featkd;
}

/// Parses and validates. Keys absent from the text keep their defaults.
HarnessConfig parse_config(const std::string& text);
HarnessConfig load_config(const std::filesystem::path& path);
/// Full dump of every field; parse_config(serialize_config(c)) == c.
std::string serialize_config(const HarnessConfig& cfg);

}  // namespace liftkd
