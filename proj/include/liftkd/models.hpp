#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "liftkd/linear_map.hpp"
#include "liftkd/noise_predictor.hpp"
#include "liftkd/tensor.hpp"

namespace liftkd {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Timestep features appended to every input row: t/T followed by
/// sin/cos(2^k * pi * t/T) for k = 0..3.
inline constexpr std::size_t kTimeEmbeddingDim = 9;
void time_embedding(int t, int num_steps, std::span<double> out);

/// Everything backward() needs from a forward pass.
struct GradTape {
  std::size_t batch = 0;
  /// layer_inputs[l] is the input to layer l (batch x fan_in).
  std::vector<RowMatrix> layer_inputs;
  /// Pre-activations of the hidden layers.
  std::vector<RowMatrix> pre_activations;
};

struct ForwardResult {
  Tensor eps;
  /// Post-activation output of each hidden layer, [B, width].
  std::vector<Tensor> features;
  GradTape tape;
};

/// Extra upstream gradient injected at a hidden layer's activation.
struct FeatureGradient {
  std::size_t layer = 0;
  Tensor grad;
};

/// MLP noise predictor: input is the flattened sample concatenated with the
/// timestep embedding, hidden layers use SiLU, the output layer is linear.
class Denoiser : public NoisePredictor {
 public:
  Denoiser() = default;
  /// All parameters zero.
  Denoiser(Shape data_shape, std::vector<std::size_t> widths, int num_steps);
  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  Denoiser(Shape data_shape, std::vector<std::size_t> widths, int num_steps, Rng& rng);

  static std::size_t param_count(std::size_t data_dim, const std::vector<std::size_t>& widths);

  const Shape& data_shape() const { return data_shape_; }
  std::size_t data_dim() const { return data_dim_; }
  const std::vector<std::size_t>& widths() const { return widths_; }
  int num_steps() const { return num_steps_; }
  std::size_t layer_count() const { return widths_.size() + 1; }
  std::size_t fan_in(std::size_t layer) const;
  std::size_t fan_out(std::size_t layer) const;

  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::span<const double> weights(std::size_t layer) const;
  std::span<double> weights(std::size_t layer);
  std::span<const double> biases(std::size_t layer) const;
  std::span<double> biases(std::size_t layer);

  /// x_t is [B, data_shape...]; `t` holds one timestep per row.
  ForwardResult forward(const Tensor& x_t, std::span<const int> t) const;
  Tensor predict(const Tensor& x_t, int t) const override;

  /// Reverse-mode gradient of a scalar loss with respect to every parameter.
  std::vector<double> backward(const GradTape& tape, const Tensor& d_output,
                               std::span<const FeatureGradient> feature_grads = {}) const;

  std::uint64_t seed = 0;

 private:
  std::size_t offset(std::size_t layer) const { return offsets_[layer]; }

  Shape data_shape_;
  std::size_t data_dim_ = 0;
  std::vector<std::size_t> widths_;
  int num_steps_ = 1;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

nlohmann::json checkpoint_json(const Denoiser& model);
Denoiser denoiser_from_json(const nlohmann::json& j);
void save_checkpoint(const Denoiser& model, const std::filesystem::path& path);
Denoiser load_checkpoint(const std::filesystem::path& path);

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr);

}  // namespace liftkd
