#pragma once

// Loop-level recomputation of the distillation objective terms.

#include "liftkd/config.hpp"
#include "liftkd/diffusion.hpp"
#include "liftkd/linear_map.hpp"
#include "liftkd/models.hpp"
#include "test_support.hpp"

namespace liftkd::testing {

// Standalone recomputation of every term from raw forward outputs.
struct Reference {
  double l_diff, l_outkd, l_featkd, total;
};

inline Reference reference_terms(const HarnessConfig& cfg, const Tensor& noise, const ForwardResult& t,
                                 const ForwardResult& s, const LinearMap& r) {
  Reference ref{};
  const Tensor& target = cfg.diff_target == DiffTarget::Noise ? noise : t.eps;
  ref.l_diff = mse_loop(target.values(), s.eps.values());
  ref.l_outkd = cfg.method.kd == KdMode::OutKd ? mse_loop(t.eps.values(), s.eps.values()) : 0.0;
  if (cfg.method.featkd) {
    const Tensor& ft = t.features.back();
    const Tensor& fs = s.features.back();
    double acc = 0.0;
    for (std::size_t row = 0; row < fs.dim(0); ++row) {
      for (std::size_t o = 0; o < r.out_dim(); ++o) {
        double y = r.bias(o);
        for (std::size_t k = 0; k < r.in_dim(); ++k) y += r.weight(o, k) * fs[row * r.in_dim() + k];
        acc += (ft[row * r.out_dim() + o] - y) * (ft[row * r.out_dim() + o] - y);
      }
    }
    ref.l_featkd = acc / static_cast<double>(ft.size());
  }
  ref.total = cfg.lambda_diff * ref.l_diff + cfg.lambda_outkd * ref.l_outkd +
              cfg.lambda_featkd * ref.l_featkd;
  return ref;
}

struct Batch {
  Tensor noise, x_t;
  std::vector<int> t;
};

inline Batch fixed_batch(const HarnessConfig& cfg, Rng& rng) {
  Batch b;
  Shape shape = cfg.sample_shape();
  shape.insert(shape.begin(), cfg.batch_size);
  const Tensor x0 = random_tensor(rng, shape);
  b.noise = randn(rng, shape);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    b.t.push_back(static_cast<int>(rng.uniform_int(1, cfg.steps)));
  }
  b.x_t = forward_noise(x0, b.t, b.noise, cfg.schedule());
  return b;
}

}  // namespace liftkd::testing
