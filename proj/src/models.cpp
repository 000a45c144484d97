#include "liftkd/models.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace liftkd {

namespace {

using ConstMatMap = Eigen::Map<const RowMatrix>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void kaiming_uniform(std::span<double> w, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : w) v = rng.uniform(-bound, bound);
}

}  // namespace

// ---------------------------------------------------------------------------
// LinearMap

LinearMap::LinearMap(std::size_t in_dim, std::size_t out_dim)
    : in_dim_(in_dim), out_dim_(out_dim), params_(out_dim * in_dim + out_dim, 0.0) {}

LinearMap::LinearMap(std::size_t in_dim, std::size_t out_dim, Rng& rng)
    : LinearMap(in_dim, out_dim) {
  kaiming_uniform(std::span<double>(params_).first(out_dim * in_dim), in_dim, rng);
}

LinearMap LinearMap::identity(std::size_t dim) {
  LinearMap m(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) m.params_[i * dim + i] = 1.0;
  return m;
}

Tensor LinearMap::apply(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_dim_) {
    throw ShapeError("LinearMap: expected [rows, " + std::to_string(in_dim_) + "], got " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = x.dim(0);
  Tensor y({rows, out_dim_});
  ConstMatMap xm(x.values().data(), rows, in_dim_);
  ConstMatMap w(params_.data(), out_dim_, in_dim_);
  ConstVecMap b(params_.data() + out_dim_ * in_dim_, out_dim_);
  MatMap ym(y.values().data(), rows, out_dim_);
  ym.noalias() = xm * w.transpose();
  ym.rowwise() += b.transpose();
  return y;
}

LinearMap::Gradients LinearMap::backward(const Tensor& x, const Tensor& d_out) const {
  if (x.rank() != 2 || x.dim(1) != in_dim_ || d_out.rank() != 2 || d_out.dim(1) != out_dim_ ||
      d_out.dim(0) != x.dim(0)) {
    throw ShapeError("LinearMap::backward: shape mismatch");
  }
  const std::size_t rows = x.dim(0);
  Gradients g;
  g.params.assign(params_.size(), 0.0);
  g.input = Tensor({rows, in_dim_});
  ConstMatMap xm(x.values().data(), rows, in_dim_);
  ConstMatMap dy(d_out.values().data(), rows, out_dim_);
  ConstMatMap w(params_.data(), out_dim_, in_dim_);
  MatMap dw(g.params.data(), out_dim_, in_dim_);
  Eigen::Map<Eigen::VectorXd> db(g.params.data() + out_dim_ * in_dim_, out_dim_);
  dw.noalias() = dy.transpose() * xm;
  db = dy.colwise().sum().transpose();
  MatMap dx(g.input.values().data(), rows, in_dim_);
  dx.noalias() = dy * w;
  return g;
}

// ---------------------------------------------------------------------------
// Denoiser

void time_embedding(int t, int num_steps, std::span<double> out) {
  if (out.size() != kTimeEmbeddingDim) throw ShapeError("time_embedding: wrong buffer size");
  const double phase = static_cast<double>(t) / static_cast<double>(num_steps);
  out[0] = phase;
  for (std::size_t k = 0; k < 4; ++k) {
    const double arg = std::ldexp(std::numbers::pi, static_cast<int>(k)) * phase;
    out[1 + 2 * k] = std::sin(arg);
    out[2 + 2 * k] = std::cos(arg);
  }
}

std::size_t Denoiser::param_count(std::size_t data_dim, const std::vector<std::size_t>& widths) {
  std::size_t n = 0;
  std::size_t in = data_dim + kTimeEmbeddingDim;
  for (auto w : widths) {
    n += w * in + w;
    in = w;
  }
  return n + data_dim * in + data_dim;
}

Denoiser::Denoiser(Shape data_shape, std::vector<std::size_t> widths, int num_steps)
    : data_shape_(std::move(data_shape)), widths_(std::move(widths)), num_steps_(num_steps) {
  if (data_shape_.empty()) throw ShapeError("Denoiser: empty data shape");
  data_dim_ = element_count(data_shape_);
  if (data_dim_ == 0) throw ShapeError("Denoiser: zero-sized data shape");
  if (num_steps_ < 1) throw std::invalid_argument("Denoiser: num_steps must be >= 1");
  for (auto w : widths_) {
    if (w == 0) throw std::invalid_argument("Denoiser: hidden widths must be positive");
  }
  std::size_t off = 0;
  for (std::size_t l = 0; l < layer_count(); ++l) {
    offsets_.push_back(off);
    off += fan_out(l) * fan_in(l) + fan_out(l);
  }
  params_.assign(off, 0.0);
}

Denoiser::Denoiser(Shape data_shape, std::vector<std::size_t> widths, int num_steps, Rng& rng)
    : Denoiser(std::move(data_shape), std::move(widths), num_steps) {
  seed = rng.seed();
  for (std::size_t l = 0; l < layer_count(); ++l) kaiming_uniform(weights(l), fan_in(l), rng);
}

std::size_t Denoiser::fan_in(std::size_t layer) const {
  return layer == 0 ? data_dim_ + kTimeEmbeddingDim : widths_.at(layer - 1);
}

std::size_t Denoiser::fan_out(std::size_t layer) const {
  return layer == widths_.size() ? data_dim_ : widths_.at(layer);
}

std::span<const double> Denoiser::weights(std::size_t layer) const {
  return std::span<const double>(params_).subspan(offset(layer), fan_out(layer) * fan_in(layer));
}
std::span<double> Denoiser::weights(std::size_t layer) {
  return std::span<double>(params_).subspan(offset(layer), fan_out(layer) * fan_in(layer));
}
std::span<const double> Denoiser::biases(std::size_t layer) const {
  return std::span<const double>(params_).subspan(offset(layer) + fan_out(layer) * fan_in(layer),
                                                  fan_out(layer));
}
std::span<double> Denoiser::biases(std::size_t layer) {
  return std::span<double>(params_).subspan(offset(layer) + fan_out(layer) * fan_in(layer),
                                            fan_out(layer));
}

ForwardResult Denoiser::forward(const Tensor& x_t, std::span<const int> t) const {
  if (x_t.rank() != data_shape_.size() + 1 ||
      !std::equal(data_shape_.begin(), data_shape_.end(), x_t.shape().begin() + 1)) {
    throw ShapeError("Denoiser: input " + shape_string(x_t.shape()) +
                     " does not match [B, " + shape_string(data_shape_) + "]");
  }
  const std::size_t batch = x_t.dim(0);
  if (t.size() != batch) throw ShapeError("Denoiser: need one timestep per row");

  ForwardResult out;
  out.tape.batch = batch;
  RowMatrix input(batch, fan_in(0));
  ConstMatMap x(x_t.values().data(), batch, data_dim_);
  input.leftCols(data_dim_) = x;
  for (std::size_t b = 0; b < batch; ++b) {
    if (t[b] < 1 || t[b] > num_steps_) {
      throw std::out_of_range("Denoiser: timestep " + std::to_string(t[b]) + " outside [1, " +
                              std::to_string(num_steps_) + "]");
    }
    time_embedding(t[b], num_steps_,
                   std::span<double>(input.row(b).data() + data_dim_, kTimeEmbeddingDim));
  }

  RowMatrix h = std::move(input);
  for (std::size_t l = 0; l < layer_count(); ++l) {
    ConstMatMap w(weights(l).data(), fan_out(l), fan_in(l));
    ConstVecMap bias(biases(l).data(), fan_out(l));
    RowMatrix z = h * w.transpose();
    z.rowwise() += bias.transpose();
    out.tape.layer_inputs.push_back(std::move(h));
    if (l + 1 == layer_count()) {
      Shape shape = x_t.shape();
      out.eps = Tensor(std::move(shape), std::vector<double>(z.data(), z.data() + z.size()));
      break;
    }
    h = z.unaryExpr([](double v) { return v * sigmoid(v); });
    out.features.emplace_back(Shape{batch, fan_out(l)},
                              std::vector<double>(h.data(), h.data() + h.size()));
    out.tape.pre_activations.push_back(std::move(z));
  }
  return out;
}

Tensor Denoiser::predict(const Tensor& x_t, int t) const {
  const std::vector<int> steps(x_t.rank() > 0 ? x_t.dim(0) : 0, t);
  return forward(x_t, steps).eps;
}

std::vector<double> Denoiser::backward(const GradTape& tape, const Tensor& d_output,
                                       std::span<const FeatureGradient> feature_grads) const {
  if (tape.layer_inputs.size() != layer_count() || d_output.size() != tape.batch * data_dim_) {
    throw ShapeError("Denoiser::backward: tape or upstream gradient does not match the model");
  }
  for (const auto& fg : feature_grads) {
    if (fg.layer >= widths_.size() || fg.grad.size() != tape.batch * widths_[fg.layer]) {
      throw ShapeError("Denoiser::backward: feature gradient does not match hidden layer");
    }
  }
  std::vector<double> grads(params_.size(), 0.0);
  RowMatrix dz = ConstMatMap(d_output.values().data(), tape.batch, data_dim_);
  for (std::size_t l = layer_count(); l-- > 0;) {
    MatMap dw(grads.data() + offset(l), fan_out(l), fan_in(l));
    Eigen::Map<Eigen::VectorXd> db(grads.data() + offset(l) + fan_out(l) * fan_in(l),
                                   fan_out(l));
    dw.noalias() = dz.transpose() * tape.layer_inputs[l];
    db = dz.colwise().sum().transpose();
    if (l == 0) break;

    ConstMatMap w(weights(l).data(), fan_out(l), fan_in(l));
    RowMatrix dh = dz * w;
    for (const auto& fg : feature_grads) {
      if (fg.layer == l - 1) dh += ConstMatMap(fg.grad.values().data(), tape.batch, fan_in(l));
    }
    const RowMatrix& z = tape.pre_activations[l - 1];
    dz = dh.cwiseProduct(z.unaryExpr([](double v) {
      const double s = sigmoid(v);
      return s * (1.0 + v * (1.0 - s));
    }));
  }
  return grads;
}

nlohmann::json checkpoint_json(const Denoiser& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const auto w = model.weights(l);
    const auto b = model.biases(l);
    layers.push_back({{"in", model.fan_in(l)},
                      {"out", model.fan_out(l)},
                      {"weight", std::vector<double>(w.begin(), w.end())},
                      {"bias", std::vector<double>(b.begin(), b.end())}});
  }
  return {{"format", "liftkd-denoiser-v1"},
          {"data_shape", model.data_shape()},
          {"widths", model.widths()},
          {"num_steps", model.num_steps()},
          {"seed", model.seed},
          {"param_count", model.size()},
          {"layers", std::move(layers)}};
}

Denoiser denoiser_from_json(const nlohmann::json& j) {
  Denoiser model(j.at("data_shape").get<Shape>(), j.at("widths").get<std::vector<std::size_t>>(),
                 j.at("num_steps").get<int>());
  model.seed = j.value("seed", std::uint64_t{0});
  const auto& layers = j.at("layers");
  if (layers.size() != model.layer_count()) {
    throw std::invalid_argument("checkpoint: layer count does not match widths");
  }
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const auto w = layers[l].at("weight").get<std::vector<double>>();
    const auto b = layers[l].at("bias").get<std::vector<double>>();
    auto dst_w = model.weights(l);
    auto dst_b = model.biases(l);
    if (w.size() != dst_w.size() || b.size() != dst_b.size()) {
      throw std::invalid_argument("checkpoint: layer " + std::to_string(l) + " has wrong size");
    }
    std::copy(w.begin(), w.end(), dst_w.begin());
    std::copy(b.begin(), b.end(), dst_b.begin());
  }
  return model;
}

void save_checkpoint(const Denoiser& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << checkpoint_json(model).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Denoiser load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return denoiser_from_json(nlohmann::json::parse(in));
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and state sizes differ");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

}  // namespace liftkd
