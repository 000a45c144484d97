#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the library's loss or regression code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "liftkd/tensor.hpp"

namespace liftkd::testing {

inline Tensor random_tensor(Rng& rng, const Shape& shape, double scale = 1.0, double shift = 0.0) {
  Tensor x(shape);
  for (auto& v : x.values()) v = shift + scale * rng.normal();
  return x;
}

inline double norm(std::span<const double> x) {
  long double s = 0.0L;
  for (double v : x) s += static_cast<long double>(v) * v;
  return static_cast<double>(std::sqrt(s));
}

/// ||a - b|| / max(||a||, ||b||); absolute difference when both are ~0.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double scale = std::max(norm(a), norm(b));
  return scale < 1e-12 ? norm(d) : norm(d) / scale;
}

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale < 1e-300 ? std::abs(a - b) : std::abs(a - b) / scale;
}

/// Central differences of f at x with step h.
inline std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                              std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct Affine {
  double b0 = 0.0;
  double b1 = 1.0;
};

/// Least squares through the 2x2 normal equations
///   [n    Ss ] [b0]   [St ]
///   [Ss   Sss] [b1] = [Sst]
/// accumulated in long double and solved by Cramer's rule.
inline Affine normal_equation_fit(std::span<const double> t, std::span<const double> s) {
  long double n = static_cast<long double>(s.size()), ss = 0, sss = 0, st = 0, sst = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    ss += s[i];
    sss += static_cast<long double>(s[i]) * s[i];
    st += t[i];
    sst += static_cast<long double>(s[i]) * t[i];
  }
  const long double det = n * sss - ss * ss;
  return {static_cast<double>((st * sss - ss * sst) / det),
          static_cast<double>((n * sst - ss * st) / det)};
}

inline double mse_loop(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double residual_mse(std::span<const double> t, std::span<const double> s, Affine c) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = t[i] - (c.b0 + c.b1 * s[i]);
    acc += r * r;
  }
  return acc / static_cast<double>(t.size());
}

inline double coarse_formula(Affine c, bool relaxed) {
  return relaxed ? c.b0 * c.b0 + (c.b1 - 1.0) * (c.b1 - 1.0)
                 : std::abs(c.b0) + std::abs(c.b1 - 1.0);
}

/// Population covariance matrix of rows of a [n, d] array.
inline std::vector<double> covariance(std::span<const double> x, std::size_t n, std::size_t d,
                                      std::vector<double>& mean) {
  mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        cov[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]);
      }
    }
  }
  for (auto& c : cov) c /= static_cast<double>(n);
  return cov;
}

// Reference: sort (error, index) pairs per plane, materialize each group and
// evaluate LIFT from the normal-equation fit.
inline double gather_then_loss(const Tensor& t, const Tensor& s, std::size_t k, bool relaxed) {
  const std::size_t hw = t.dim(t.rank() - 1) * t.dim(t.rank() - 2);
  const std::size_t planes = t.size() / hw;
  double total = 0.0;
  std::size_t groups = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t i = 0; i < hw; ++i) order.emplace_back(std::abs(t[p * hw + i] - s[p * hw + i]), i);
    std::sort(order.begin(), order.end());
    for (std::size_t g = 0; g < hw / k; ++g) {
      std::vector<double> tg, sg;
      for (std::size_t j = 0; j < k; ++j) {
        tg.push_back(t[p * hw + order[g * k + j].second]);
        sg.push_back(s[p * hw + order[g * k + j].second]);
      }
      const Affine c = normal_equation_fit(tg, sg);
      const double coarse = coarse_formula(c, relaxed);
      total += coarse + (1.0 - std::min(1.0, coarse)) * residual_mse(tg, sg, c);
      ++groups;
    }
  }
  return total / static_cast<double>(groups);
}

}  // namespace liftkd::testing
