#pragma once

#include <vector>

#include "stemdiff/core/tensor.hpp"

namespace stemdiff::unet {

/// Average-pools `cond` ([Cc, s1, ..., sk]) down to `layer_spatial` and tiles
/// the channel axis up to `layer_channels`, truncating the final repeat.
/// Throws ShapeError when a spatial size does not divide evenly.
template <typename T>
Tensor<T> inject_condition(const Tensor<T>& cond, int layer_channels, const Shape& layer_spatial);

/// Sinusoidal encoding of step n: sin components first, cos components second.
/// Throws ConfigError for an odd or non-positive dimension.
std::vector<double> timestep_embed(int n, int dim, int total_steps = 1000);

}  // namespace stemdiff::unet
