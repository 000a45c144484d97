#include "liftkd/place.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

namespace liftkd {

namespace {

struct PlaneLayout {
  std::size_t samples = 1;
  std::size_t channels = 0;
  std::size_t plane = 0;
};

PlaneLayout layout_of(const Shape& shape) {
  if (shape.size() == 3) return {1, shape[0], shape[1] * shape[2]};
  if (shape.size() == 4) return {shape[0], shape[1], shape[2] * shape[3]};
  throw ShapeError("place: expected [C,H,W] or [B,C,H,W], got " + shape_string(shape));
}

}  // namespace

ErrorMap error_map(const Tensor& eps_t, const Tensor& eps_s) {
  require_same_shape(eps_t, eps_s, "error_map");
  layout_of(eps_t.shape());
  Tensor e(eps_t.shape());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = std::abs(eps_t[i] - eps_s[i]);
  return {std::move(e)};
}

GroupPartition partition(const ErrorMap& emap, std::size_t k) {
  const PlaneLayout lay = layout_of(emap.values.shape());
  if (k < 2) throw std::invalid_argument("partition: group size must be at least 2");
  if (lay.plane % k != 0) {
    throw IndivisibleGroupSize("partition: group size " + std::to_string(k) +
                               " does not divide H*W = " + std::to_string(lay.plane));
  }
  GroupPartition part;
  part.sample_count = lay.samples;
  part.channel_count = lay.channels;
  part.group_size = k;
  part.groups_per_channel = lay.plane / k;
  part.index_map.resize(lay.samples * lay.channels);

  const auto values = emap.values.values();
  for (std::size_t p = 0; p < part.index_map.size(); ++p) {
    const auto plane = values.subspan(p * lay.plane, lay.plane);
    auto& order = part.index_map[p];
    order.resize(lay.plane);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return plane[a] < plane[b]; });
  }
  return part;
}

PlaceResult place_loss(const Tensor& eps_t, const Tensor& eps_s, const PlaceOptions& options,
                       bool want_grad, const GroupPartition* frozen) {
  require_same_shape(eps_t, eps_s, "place_loss");
  const PlaneLayout lay = layout_of(eps_s.shape());

  GroupPartition computed;
  if (frozen == nullptr) {
    computed = partition(error_map(eps_t, eps_s), options.group_size);
    frozen = &computed;
  } else if (frozen->sample_count != lay.samples || frozen->channel_count != lay.channels ||
             frozen->plane_size() != lay.plane) {
    throw ShapeError("place_loss: frozen partition does not match input shape");
  }
  const GroupPartition& part = *frozen;
  const std::size_t k = part.group_size;
  const std::size_t groups = part.group_count();
  const double inv_groups = 1.0 / static_cast<double>(groups);

  PlaceResult result;
  if (want_grad) result.grad = Tensor(eps_s.shape());
  result.groups.reserve(groups);

  const auto t_all = eps_t.values();
  const auto s_all = eps_s.values();

  std::vector<double> t_buf(k), s_buf(k), g_buf(k);
  auto gather = [&](std::size_t plane, std::size_t g) {
    const auto idx = part.group(plane, g);
    const std::size_t base = plane * lay.plane;
    for (std::size_t j = 0; j < k; ++j) {
      t_buf[j] = t_all[base + idx[j]];
      s_buf[j] = s_all[base + idx[j]];
    }
  };

  std::function<double(double)> weight_of = [&](double coarse) {
    return scheduled_weight(options.scheduler, options.iter, coarse);
  };
  if (options.pooled_weight) {
    double coarse_sum = 0.0;
    for (std::size_t plane = 0; plane < part.index_map.size(); ++plane) {
      for (std::size_t g = 0; g < part.groups_per_channel; ++g) {
        gather(plane, g);
        coarse_sum += coarse_loss(try_ols_fit(t_buf, s_buf).coeffs, options.lift.relaxed_l2);
      }
    }
    const double w = scheduled_weight(options.scheduler, options.iter, coarse_sum * inv_groups);
    weight_of = [w](double) { return w; };
  }

  // Fixed order over (sample, channel, group) keeps the reduction deterministic.
  for (std::size_t plane = 0; plane < part.index_map.size(); ++plane) {
    for (std::size_t g = 0; g < part.groups_per_channel; ++g) {
      gather(plane, g);
      std::span<double> grad_span;
      if (want_grad) {
        std::fill(g_buf.begin(), g_buf.end(), 0.0);
        grad_span = g_buf;
      }
      const LiftTerms terms =
          lift_terms(t_buf, s_buf, weight_of, options.lift, grad_span, inv_groups);
      if (want_grad) {
        const auto idx = part.group(plane, g);
        auto out = result.grad.values();
        const std::size_t base = plane * lay.plane;
        for (std::size_t j = 0; j < k; ++j) out[base + idx[j]] += g_buf[j];
      }
      result.loss += terms.loss;
      result.mean_coarse += terms.coarse;
      result.mean_fine += terms.fine;
      result.mean_w += terms.w;
      if (terms.degenerate) ++result.degenerate_groups;

      GroupDiagnostics diag;
      diag.sample = plane / lay.channels;
      diag.channel = plane % lay.channels;
      diag.group = g;
      diag.coeffs = terms.coeffs;
      diag.degenerate = terms.degenerate;
      diag.breakdown.iter = options.iter;
      diag.breakdown.l_coarse = terms.coarse;
      diag.breakdown.l_fine = terms.fine;
      diag.breakdown.w = terms.w;
      diag.breakdown.l_lift = terms.loss;
      diag.breakdown.total = terms.loss;
      result.groups.push_back(diag);
    }
  }
  result.loss *= inv_groups;
  result.mean_coarse *= inv_groups;
  result.mean_fine *= inv_groups;
  result.mean_w *= inv_groups;
  return result;
}

nlohmann::json error_map_to_json(const ErrorMap& emap) {
  const PlaneLayout lay = layout_of(emap.values.shape());
  nlohmann::json stats = nlohmann::json::array();
  const auto v = emap.values.values();
  for (std::size_t c = 0; c < lay.channels; ++c) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t s = 0; s < lay.samples; ++s) {
      const auto plane = v.subspan((s * lay.channels + c) * lay.plane, lay.plane);
      for (double x : plane) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
    stats.push_back({{"min", lo}, {"max", hi}});
  }
  nlohmann::json j = to_json(emap.values);
  j["channel_stats"] = std::move(stats);
  return j;
}

ErrorMap error_map_from_json(const nlohmann::json& j) {
  ErrorMap emap{tensor_from_json(j)};
  layout_of(emap.values.shape());
  for (double x : emap.values.values()) {
    if (!(x >= 0.0)) throw std::invalid_argument("error map contains negative or NaN values");
  }
  return emap;
}

void export_error_map(const ErrorMap& emap, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << error_map_to_json(emap).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ErrorMap load_error_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return error_map_from_json(nlohmann::json::parse(in));
}

}  // namespace liftkd
