#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "stemdiff/core/autograd.hpp"

namespace stemdiff::nn {

template <typename T>
using Var = ag::Var<T>;
using ag::Triple;

template <typename T>
struct NamedParam {
  std::string name;
  Var<T>* var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Per-call switches for layers whose behaviour differs between training and inference.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

template <typename T>
Var<T> make_param(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> constant_param(Shape shape, T value) {
  return Var<T>(Tensor<T>(std::move(shape), value), true);
}

/// Largest group count <= preferred that divides channels.
inline int group_count(int channels, int preferred = 8) {
  for (int g = std::min(preferred, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int in, int out, Triple kernel, Triple stride, Triple pad, Rng& rng, bool zero_init = false)
      : stride_(stride), pad_(pad) {
    const double fan_in = static_cast<double>(in) * kernel[0] * kernel[1] * kernel[2];
    const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(fan_in);
    weight = make_param<T>({out, in, kernel[0], kernel[1], kernel[2]}, bound, rng);
    bias = make_param<T>({out}, bound, rng);
  }

  Var<T> operator()(const Var<T>& x) const { return ag::conv3d(x, weight, bias, stride_, pad_); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

  int out_channels() const { return weight.value().dim(0); }

  Var<T> weight;
  Var<T> bias;

 private:
  Triple stride_{1, 1, 1};
  Triple pad_{0, 0, 0};
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = make_param<T>({out, in}, bound, rng);
    bias = make_param<T>({out}, bound, rng);
  }

  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

  Var<T> weight;
  Var<T> bias;
};

template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  explicit GroupNorm(int channels)
      : gamma(constant_param<T>({channels}, T(1))), beta(constant_param<T>({channels}, T(0))),
        groups_(group_count(channels)) {}

  Var<T> operator()(const Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups_, T(1e-5)); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }

  Var<T> gamma;
  Var<T> beta;

 private:
  int groups_ = 1;
};

/// Pre-activation residual block: norm, SiLU, conv, optional time bias, norm,
/// SiLU, dropout, conv, plus a pointwise skip when the width changes.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(int in, int out, int time_dim, Triple kernel, Triple pad, Rng& rng)
      : norm1_(in), conv1_(in, out, kernel, {1, 1, 1}, pad, rng), norm2_(out),
        conv2_(out, out, kernel, {1, 1, 1}, pad, rng), has_time_(time_dim > 0), has_skip_(in != out) {
    if (has_time_) time_proj_ = Linear<T>(time_dim, out, rng);
    if (has_skip_) skip_ = Conv3d<T>(in, out, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>* time_embedding, const ForwardContext& ctx) const {
    Var<T> h = conv1_(ag::silu(norm1_(x)));
    if (has_time_ && time_embedding) h = ag::add_channel_bias(h, time_proj_(ag::silu(*time_embedding)));
    h = ag::silu(norm2_(h));
    if (ctx.training && ctx.dropout > 0.0 && ctx.rng) h = ag::dropout(h, ctx.dropout, *ctx.rng);
    h = conv2_(h);
    return ag::add(has_skip_ ? skip_(x) : x, h);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    norm1_.collect(prefix + ".norm1", out);
    conv1_.collect(prefix + ".conv1", out);
    if (has_time_) time_proj_.collect(prefix + ".time_proj", out);
    norm2_.collect(prefix + ".norm2", out);
    conv2_.collect(prefix + ".conv2", out);
    if (has_skip_) skip_.collect(prefix + ".skip", out);
  }

 private:
  GroupNorm<T> norm1_;
  Conv3d<T> conv1_;
  Linear<T> time_proj_;
  GroupNorm<T> norm2_;
  Conv3d<T> conv2_;
  Conv3d<T> skip_;
  bool has_time_ = false;
  bool has_skip_ = false;
};

/// Single-head self-attention across all spatial positions of a [B, C, D, H, W] map.
template <typename T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(int channels, Rng& rng)
      : norm_(channels), qkv_(channels, 3 * channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng),
        proj_(channels, channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng), channels_(channels) {}

  Var<T> operator()(const Var<T>& x) const {
    const Shape& s = x.shape();
    const int B = s[0];
    const int P = s[2] * s[3] * s[4];
    Var<T> qkv = qkv_(norm_(x));
    auto flat = [&](int start) { return ag::reshape(ag::slice_channels(qkv, start, channels_), {B, channels_, P}); };
    Var<T> q = flat(0);
    Var<T> k = flat(channels_);
    Var<T> v = flat(2 * channels_);
    // scores[b, i, j] = <q_i, k_j> / sqrt(C)
    Var<T> scores = ag::scale(ag::bmm(q, k, true, false), static_cast<T>(1.0 / std::sqrt(double(channels_))));
    Var<T> attn = ag::softmax_last(scores);
    Var<T> mixed = ag::bmm(v, attn, false, true);
    return ag::add(x, proj_(ag::reshape(mixed, s)));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    norm_.collect(prefix + ".norm", out);
    qkv_.collect(prefix + ".qkv", out);
    proj_.collect(prefix + ".proj", out);
  }

 private:
  GroupNorm<T> norm_;
  Conv3d<T> qkv_;
  Conv3d<T> proj_;
  int channels_ = 0;
};

/// Adam with bias correction. Moments are keyed by parameter name so that
/// state survives checkpointing.
template <typename T>
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global-norm clip; 0 disables
  };

  Adam() = default;
  explicit Adam(Options options) : options_(options) {}

  void step(ParamList<T>& params) {
    ++steps_;
    double scale = 1.0;
    if (options_.grad_clip > 0.0) {
      double sq = 0;
      for (auto& p : params) {
        if (!p.var->has_grad()) continue;
        for (T g : p.var->grad().values()) sq += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > options_.grad_clip) scale = options_.grad_clip / norm;
    }
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const double lr = options_.learning_rate * std::sqrt(c2) / c1;
    for (auto& p : params) {
      if (!p.var->has_grad()) continue;
      auto& value = p.var->mutable_value();
      const auto& grad = p.var->grad();
      auto& m = moment(first_, p.name, value.shape());
      auto& v = moment(second_, p.name, value.shape());
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) * scale;
        m[i] = static_cast<T>(options_.beta1 * m[i] + (1.0 - options_.beta1) * g);
        v[i] = static_cast<T>(options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g);
        value[i] -= static_cast<T>(lr * m[i] / (std::sqrt(static_cast<double>(v[i])) + options_.eps));
      }
    }
  }

  long steps() const { return steps_; }
  void set_steps(long steps) { steps_ = steps; }
  Options& options() { return options_; }
  std::map<std::string, Tensor<T>>& first_moments() { return first_; }
  std::map<std::string, Tensor<T>>& second_moments() { return second_; }

 private:
  static Tensor<T>& moment(std::map<std::string, Tensor<T>>& store, const std::string& name, const Shape& shape) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor<T>(shape)).first;
    return it->second;
  }

  Options options_;
  long steps_ = 0;
  std::map<std::string, Tensor<T>> first_;
  std::map<std::string, Tensor<T>> second_;
};

template <typename T>
void zero_grad(ParamList<T>& params) {
  for (auto& p : params) p.var->zero_grad();
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var->value().size();
  return n;
}

}  // namespace stemdiff::nn
