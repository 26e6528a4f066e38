#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cascade_detr/geometry.hpp"
#include "cascade_detr/tensor.hpp"

namespace cdetr::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

inline std::size_t random_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Box random_box(std::mt19937_64& rng, double min_side = 0.02) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double w = min_side + (1.0 - min_side) * u(rng) * 0.8;
    const double h = min_side + (1.0 - min_side) * u(rng) * 0.8;
    return Box{0.5 * w + (1.0 - w) * u(rng), 0.5 * h + (1.0 - h) * u(rng), w, h};
}

// Mask with at least one attendable entry per row.
inline AttentionMask random_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double density = 0.5) {
    std::bernoulli_distribution keep(density);
    AttentionMask mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) mask.set(r, c, keep(rng));
        if (mask.row_count(r) == 0) mask.set(r, random_size(rng, 0, cols - 1), true);
    }
    return mask;
}

}  // namespace cdetr::testing
