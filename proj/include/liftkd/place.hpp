#pragma once

// Piecewise grouping of the teacher/student error.
//
// Inputs are either one sample [C, H, W] or a batch [B, C, H, W]. For every
// sample and channel, the H*W positions are sorted by |eps_t - eps_s|
// (ascending, ties by flat index) and cut into N = H*W / K runs of K. LIFT is
// then applied to each run, and the loss is the unweighted mean over all
// B*C*N groups. The grouping is a constant of the step: no gradient flows
// through the sort.

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "liftkd/kd_losses.hpp"
#include "liftkd/tensor.hpp"

namespace liftkd {

class IndivisibleGroupSize : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Elementwise |eps_t - eps_s| for a [C, H, W] or [B, C, H, W] pair.
struct ErrorMap {
  Tensor values;
};

ErrorMap error_map(const Tensor& eps_t, const Tensor& eps_s);

struct GroupPartition {
  std::size_t sample_count = 1;
  std::size_t channel_count = 0;
  std::size_t groups_per_channel = 0;
  std::size_t group_size = 0;
  /// For each (sample, channel), a permutation of [0, H*W) laid out as
  /// groups_per_channel consecutive runs of group_size.
  std::vector<std::vector<std::size_t>> index_map;

  std::size_t plane_size() const { return groups_per_channel * group_size; }
  std::size_t group_count() const { return sample_count * channel_count * groups_per_channel; }
  /// Flat positions (within the plane) of group `g` of plane `plane`.
  std::span<const std::size_t> group(std::size_t plane, std::size_t g) const {
    return std::span<const std::size_t>(index_map[plane]).subspan(g * group_size, group_size);
  }
};

GroupPartition partition(const ErrorMap& emap, std::size_t k);

struct PlaceOptions {
  std::size_t group_size = 16;
  WeightScheduler scheduler = WeightScheduler::adaptive();
  long iter = 0;
  LiftOptions lift;
  /// Use one weight for all groups, computed from the mean coarse loss.
  bool pooled_weight = false;
};

struct GroupDiagnostics {
  std::size_t sample = 0;
  std::size_t channel = 0;
  std::size_t group = 0;
  LossBreakdown breakdown;
  RegressionCoeffs coeffs;
  bool degenerate = false;
};

struct PlaceResult {
  double loss = 0.0;
  double mean_coarse = 0.0;
  double mean_fine = 0.0;
  double mean_w = 0.0;
  std::size_t degenerate_groups = 0;
  std::vector<GroupDiagnostics> groups;
  /// dL/d(eps_s); filled only when requested.
  Tensor grad;
};

/// Group-wise LIFT averaged over groups. The partition is rebuilt from the
/// current pair unless `frozen` is supplied.
PlaceResult place_loss(const Tensor& eps_t, const Tensor& eps_s, const PlaceOptions& options,
                       bool want_grad = false, const GroupPartition* frozen = nullptr);

/// JSON {"shape": [...], "data": [...], "channel_stats": [{"min","max"}...]}.
nlohmann::json error_map_to_json(const ErrorMap& emap);
ErrorMap error_map_from_json(const nlohmann::json& j);
void export_error_map(const ErrorMap& emap, const std::filesystem::path& path);
ErrorMap load_error_map(const std::filesystem::path& path);

}  // namespace liftkd
