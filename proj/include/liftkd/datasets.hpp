#pragma once

#include <string>

#include "liftkd/tensor.hpp"

namespace liftkd {

enum class DatasetKind { Gaussians8, SwissRoll, GridPatterns };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& name);

/// Per-sample shape: [2] for the planar sets, [1, 8, 8] for grid patterns.
Shape sample_shape(DatasetKind kind);

/// `count` samples stacked along a leading batch axis. Planar sets are scaled
/// to roughly unit variance per coordinate; grid patterns are sums of two
/// random Gaussian blobs with values in [-1, 1].
Tensor make_dataset(DatasetKind kind, std::size_t count, Rng& rng);

/// Rows drawn uniformly with replacement.
Tensor draw_batch(const Tensor& data, std::size_t batch, Rng& rng);

}  // namespace liftkd
