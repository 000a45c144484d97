#include "liftkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace liftkd {

namespace {

struct SampleSet {
  std::size_t rows = 0;
  std::size_t dim = 0;
};

SampleSet describe(const Tensor& x, const char* what) {
  if (x.rank() < 1 || x.dim(0) < 2) {
    throw std::invalid_argument(std::string(what) + ": need at least two samples");
  }
  return {x.dim(0), x.size() / x.dim(0)};
}

}  // namespace

double wasserstein2_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein2_1d: empty input");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const std::size_t na = a.size(), nb = b.size();
  // Walk the merged quantile breakpoints i/na and j/nb; compare with integer
  // cross-multiplication so equal breakpoints advance together.
  std::size_t i = 0, j = 0;
  double prev = 0.0, acc = 0.0;
  while (i < na && j < nb) {
    const std::size_t next_a = (i + 1) * nb;
    const std::size_t next_b = (j + 1) * na;
    const std::size_t next = std::min(next_a, next_b);
    const double u = static_cast<double>(next) / static_cast<double>(na * nb);
    const double d = a[i] - b[j];
    acc += d * d * (u - prev);
    prev = u;
    if (next_a == next) ++i;
    if (next_b == next) ++j;
  }
  return std::sqrt(acc);
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, std::size_t projections, Rng& rng) {
  const SampleSet sa = describe(a, "sliced_wasserstein");
  const SampleSet sb = describe(b, "sliced_wasserstein");
  if (sa.dim != sb.dim) throw ShapeError("sliced_wasserstein: dimension mismatch");
  if (projections == 0) throw std::invalid_argument("sliced_wasserstein: need projections");

  std::vector<double> dir(sa.dim), pa(sa.rows), pb(sb.rows);
  double total = 0.0;
  for (std::size_t p = 0; p < projections; ++p) {
    double norm = 0.0;
    do {
      for (double& v : dir) v = rng.normal();
      norm = l2_norm(dir);
    } while (norm == 0.0);
    for (double& v : dir) v /= norm;
    for (std::size_t r = 0; r < sa.rows; ++r) pa[r] = dot(dir, a.values().subspan(r * sa.dim, sa.dim));
    for (std::size_t r = 0; r < sb.rows; ++r) pb[r] = dot(dir, b.values().subspan(r * sb.dim, sb.dim));
    total += wasserstein2_1d(pa, pb);
  }
  return total / static_cast<double>(projections);
}

MomentGap moment_gap(const Tensor& a, const Tensor& b) {
  const SampleSet sa = describe(a, "moment_gap");
  const SampleSet sb = describe(b, "moment_gap");
  if (sa.dim != sb.dim) throw ShapeError("moment_gap: dimension mismatch");
  const std::size_t d = sa.dim;

  auto stats = [d](const Tensor& x, std::size_t rows) {
    std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
    const auto v = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < d; ++i) mean[i] += v[r * d + i];
    }
    for (double& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          cov[i * d + j] += (v[r * d + i] - mean[i]) * (v[r * d + j] - mean[j]);
        }
      }
    }
    for (double& c : cov) c /= static_cast<double>(rows);
    return std::pair{mean, cov};
  };
  const auto [ma, ca] = stats(a, sa.rows);
  const auto [mb, cb] = stats(b, sb.rows);
  MomentGap gap;
  for (std::size_t i = 0; i < d; ++i) gap.mean_err += (ma[i] - mb[i]) * (ma[i] - mb[i]);
  for (std::size_t i = 0; i < d * d; ++i) gap.cov_err += (ca[i] - cb[i]) * (ca[i] - cb[i]);
  gap.mean_err = std::sqrt(gap.mean_err);
  gap.cov_err = std::sqrt(gap.cov_err);
  return gap;
}

}  // namespace liftkd
