#include "stemdiff/unet/conditioning.hpp"

#include <cmath>

namespace stemdiff::unet {

template <typename T>
Tensor<T> inject_condition(const Tensor<T>& cond, int layer_channels, const Shape& layer_spatial) {
  const int rank = static_cast<int>(layer_spatial.size());
  if (cond.rank() != rank + 1) {
    throw ShapeError("condition " + shape_string(cond.shape()) + " has no spatial rank " + std::to_string(rank));
  }
  if (layer_channels < 1) throw ShapeError("layer needs at least one channel");
  const int Cc = cond.dim(0);
  std::vector<int> factor(rank);
  for (int a = 0; a < rank; ++a) {
    const int src = cond.dim(a + 1);
    const int dst = layer_spatial[a];
    if (dst < 1 || src % dst != 0) {
      throw ShapeError("cannot pool condition " + shape_string(cond.shape()) + " to " + shape_string(layer_spatial));
    }
    factor[a] = src / dst;
  }

  // pooled[c, p] over output positions p
  const std::size_t out_points = numel(layer_spatial);
  const std::size_t in_points = cond.size() / Cc;
  std::vector<double> pooled(Cc * out_points, 0.0);
  std::vector<int> idx(rank, 0);
  for (std::size_t q = 0; q < in_points; ++q) {
    std::size_t p = 0;
    for (int a = 0; a < rank; ++a) p = p * layer_spatial[a] + idx[a] / factor[a];
    for (int c = 0; c < Cc; ++c) pooled[c * out_points + p] += cond[c * in_points + q];
    for (int a = rank - 1; a >= 0; --a) {
      if (++idx[a] < cond.dim(a + 1)) break;
      idx[a] = 0;
    }
  }
  const double inv = static_cast<double>(out_points) / static_cast<double>(in_points);

  Shape out_shape{layer_channels};
  out_shape.insert(out_shape.end(), layer_spatial.begin(), layer_spatial.end());
  Tensor<T> out(out_shape);
  for (int c = 0; c < layer_channels; ++c) {
    const double* src = pooled.data() + static_cast<std::size_t>(c % Cc) * out_points;
    T* dst = out.data() + static_cast<std::size_t>(c) * out_points;
    for (std::size_t p = 0; p < out_points; ++p) dst[p] = static_cast<T>(src[p] * inv);
  }
  return out;
}

std::vector<double> timestep_embed(int n, int dim, int total_steps) {
  if (dim <= 0 || dim % 2) throw ConfigError("timestep embedding dimension must be positive and even, got " + std::to_string(dim));
  if (n < 0 || n > total_steps) throw ArgumentError("step " + std::to_string(n) + " outside [0, " + std::to_string(total_steps) + "]");
  const int half = dim / 2;
  std::vector<double> out(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = std::sin(n * freq);
    out[half + i] = std::cos(n * freq);
  }
  return out;
}

template Tensor<float> inject_condition(const Tensor<float>&, int, const Shape&);
template Tensor<double> inject_condition(const Tensor<double>&, int, const Shape&);

}  // namespace stemdiff::unet
