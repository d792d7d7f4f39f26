#include "stemdiff/core/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace stemdiff::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<T>& in) { return in && in->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward_fn = std::move(fn);
    }
  }
  return Var<T>(std::move(node));
}

template <typename T>
Tensor<T>* grad_of(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

struct ConvGeom {
  int B, Ci, D, H, W;
  int Co, kd, kh, kw;
  int sd, sh, sw;
  int pd, ph, pw;
  int Do, Ho, Wo;

  long K() const { return static_cast<long>(Ci) * kd * kh * kw; }
  long P() const { return static_cast<long>(Do) * Ho * Wo; }
  long in_volume() const { return static_cast<long>(D) * H * W; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && sd == 1 && sh == 1 && sw == 1 && pd == 0 && ph == 0 && pw == 0;
  }
};

// Output rows (od, oh) are processed in chunks so the column buffer stays bounded.
constexpr long kColumnBudget = 1L << 21;

int rows_per_chunk(const ConvGeom& g) {
  const long per_row = g.K() * g.Wo;
  return static_cast<int>(std::max<long>(1, kColumnBudget / std::max<long>(1, per_row)));
}

/// Output columns ow in [lo, hi) read inside the input row for kernel tap c.
struct ColumnRange {
  int lo, hi;
};

ColumnRange valid_columns(const ConvGeom& g, int c) {
  auto ceil_div = [](int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); };
  const int lo = std::max(0, ceil_div(g.pw - c, g.sw));
  const int hi = std::min(g.Wo, (g.W - 1 + g.pw - c) / g.sw + 1);
  return {lo, std::max(lo, hi)};
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, int q0, int q1, T* cols) {
  const long L = static_cast<long>(q1 - q0) * g.Wo;
  long r = 0;
  for (int ci = 0; ci < g.Ci; ++ci) {
    for (int a = 0; a < g.kd; ++a) {
      for (int b = 0; b < g.kh; ++b) {
        for (int c = 0; c < g.kw; ++c, ++r) {
          const ColumnRange cr = valid_columns(g, c);
          const int offset = c - g.pw;
          T* dst = cols + r * L;
          int od = q0 / g.Ho, oh = q0 % g.Ho;
          for (int q = q0; q < q1; ++q, dst += g.Wo) {
            const int id = od * g.sd - g.pd + a;
            const int ih = oh * g.sh - g.ph + b;
            if (++oh == g.Ho) oh = 0, ++od;
            if (id < 0 || id >= g.D || ih < 0 || ih >= g.H) {
              std::fill(dst, dst + g.Wo, T(0));
              continue;
            }
            const T* src = x + ((static_cast<long>(ci) * g.D + id) * g.H + ih) * g.W + offset;
            std::fill(dst, dst + cr.lo, T(0));
            if (g.sw == 1) {
              std::copy(src + cr.lo, src + cr.hi, dst + cr.lo);
            } else {
              for (int ow = cr.lo; ow < cr.hi; ++ow) dst[ow] = src[ow * g.sw];
            }
            std::fill(dst + cr.hi, dst + g.Wo, T(0));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, int q0, int q1, T* dx) {
  const long L = static_cast<long>(q1 - q0) * g.Wo;
  long r = 0;
  for (int ci = 0; ci < g.Ci; ++ci) {
    for (int a = 0; a < g.kd; ++a) {
      for (int b = 0; b < g.kh; ++b) {
        for (int c = 0; c < g.kw; ++c, ++r) {
          const ColumnRange cr = valid_columns(g, c);
          const int offset = c - g.pw;
          const T* src = cols + r * L;
          int od = q0 / g.Ho, oh = q0 % g.Ho;
          for (int q = q0; q < q1; ++q, src += g.Wo) {
            const int id = od * g.sd - g.pd + a;
            const int ih = oh * g.sh - g.ph + b;
            if (++oh == g.Ho) oh = 0, ++od;
            if (id < 0 || id >= g.D || ih < 0 || ih >= g.H) continue;
            T* dst = dx + ((static_cast<long>(ci) * g.D + id) * g.H + ih) * g.W + offset;
            if (g.sw == 1) {
              for (int ow = cr.lo; ow < cr.hi; ++ow) dst[ow] += src[ow];
            } else {
              for (int ow = cr.lo; ow < cr.hi; ++ow) dst[ow * g.sw] += src[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    Node<T>* node = stack.back().first;
    const std::size_t next = stack.back().second;
    if (next < node->inputs.size()) {
      ++stack.back().second;
      Node<T>* child = node->inputs[next].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && node->has_grad) node->backward_fn(*node);
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return make_result<T>(std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return make_result<T>(std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return make_result<T>(std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return make_result<T>(std::move(out), {a.node_ptr()}, [factor](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v / (T(1) + std::exp(-v));
  return make_result<T>(std::move(out), {x.node_ptr()}, [](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-xv[i]));
        (*g)[i] += self.grad[i] * (s + xv[i] * s * (T(1) - s));
      }
    }
  });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = std::exp(v);
  return make_result<T>(std::move(out), {x.node_ptr()}, [](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.value[i];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x.node_ptr()}, [](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  const auto& xv = x.value();
  if (xv.rank() < 2 || bias.value().rank() != 2 || bias.shape()[0] != xv.dim(0) ||
      bias.shape()[1] != xv.dim(1)) {
    throw ShapeError("add_channel_bias: x " + shape_string(xv.shape()) + ", bias " +
                     shape_string(bias.shape()));
  }
  const long BC = static_cast<long>(xv.dim(0)) * xv.dim(1);
  const long inner = static_cast<long>(xv.size()) / std::max<long>(1, BC);
  Tensor<T> out = xv;
  const T* pb = bias.value().data();
  for (long bc = 0; bc < BC; ++bc) {
    T* p = out.data() + bc * inner;
    for (long i = 0; i < inner; ++i) p[i] += pb[bc];
  }
  return make_result<T>(std::move(out), {x.node_ptr(), bias.node_ptr()}, [BC, inner](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (long bc = 0; bc < BC; ++bc) {
        const T* p = self.grad.data() + bc * inner;
        T acc = 0;
        for (long i = 0; i < inner; ++i) acc += p[i];
        (*g)[bc] += acc;
      }
    }
  });
}

template <typename T>
Var<T> add_broadcast_batch(const Var<T>& x, const Var<T>& addend) {
  const auto& xv = x.value();
  const Shape inner_shape(xv.shape().begin() + 1, xv.shape().end());
  require_same_shape(inner_shape, addend.shape(), "add_broadcast_batch");
  const int B = xv.dim(0);
  const std::size_t inner = addend.value().size();
  Tensor<T> out = xv;
  for (int b = 0; b < B; ++b) {
    T* p = out.data() + b * inner;
    const T* q = addend.value().data();
    for (std::size_t i = 0; i < inner; ++i) p[i] += q[i];
  }
  return make_result<T>(std::move(out), {x.node_ptr(), addend.node_ptr()}, [B, inner](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (int b = 0; b < B; ++b) {
        const T* p = self.grad.data() + b * inner;
        for (std::size_t i = 0; i < inner; ++i) (*g)[i] += p[i];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || av.rank() != bv.rank() || av.dim(0) != bv.dim(0) ||
      !std::equal(av.shape().begin() + 2, av.shape().end(), bv.shape().begin() + 2)) {
    throw ShapeError("concat_channels: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  const int B = av.dim(0);
  const std::size_t na = av.size() / B;
  const std::size_t nb = bv.size() / B;
  Shape shape = av.shape();
  shape[1] += bv.dim(1);
  Tensor<T> out(shape);
  for (int i = 0; i < B; ++i) {
    std::copy_n(av.data() + i * na, na, out.data() + i * (na + nb));
    std::copy_n(bv.data() + i * nb, nb, out.data() + i * (na + nb) + na);
  }
  return make_result<T>(std::move(out), {a.node_ptr(), b.node_ptr()}, [B, na, nb](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (int i = 0; i < B; ++i) {
        const T* src = self.grad.data() + i * (na + nb);
        T* dst = g->data() + i * na;
        for (std::size_t k = 0; k < na; ++k) dst[k] += src[k];
      }
    }
    if (auto* g = grad_of(self, 1)) {
      for (int i = 0; i < B; ++i) {
        const T* src = self.grad.data() + i * (na + nb) + na;
        T* dst = g->data() + i * nb;
        for (std::size_t k = 0; k < nb; ++k) dst[k] += src[k];
      }
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int start, int count) {
  const auto& xv = x.value();
  if (xv.rank() < 2 || start < 0 || count < 0 || start + count > xv.dim(1)) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") out of " + shape_string(xv.shape()));
  }
  const int B = xv.dim(0);
  const std::size_t per_channel = xv.size() / (static_cast<std::size_t>(B) * xv.dim(1));
  const std::size_t stride = per_channel * xv.dim(1);
  const std::size_t offset = per_channel * start;
  const std::size_t n = per_channel * count;
  Shape shape = xv.shape();
  shape[1] = count;
  Tensor<T> out(shape);
  for (int i = 0; i < B; ++i) std::copy_n(xv.data() + i * stride + offset, n, out.data() + i * n);
  return make_result<T>(std::move(out), {x.node_ptr()}, [B, stride, offset, n](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (int i = 0; i < B; ++i) {
        T* dst = g->data() + i * stride + offset;
        const T* src = self.grad.data() + i * n;
        for (std::size_t k = 0; k < n; ++k) dst[k] += src[k];
      }
    }
  });
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Triple stride, Triple pad) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank(xv, 5, "conv3d input");
  require_rank(wv, 5, "conv3d weight");
  if (wv.dim(1) != xv.dim(1)) {
    throw ShapeError("conv3d: weight " + shape_string(wv.shape()) + " does not accept input " +
                     shape_string(xv.shape()));
  }
  ConvGeom g{};
  g.B = xv.dim(0);
  g.Ci = xv.dim(1);
  g.D = xv.dim(2);
  g.H = xv.dim(3);
  g.W = xv.dim(4);
  g.Co = wv.dim(0);
  g.kd = wv.dim(2);
  g.kh = wv.dim(3);
  g.kw = wv.dim(4);
  g.sd = stride[0];
  g.sh = stride[1];
  g.sw = stride[2];
  g.pd = pad[0];
  g.ph = pad[1];
  g.pw = pad[2];
  g.Do = (g.D + 2 * g.pd - g.kd) / g.sd + 1;
  g.Ho = (g.H + 2 * g.ph - g.kh) / g.sh + 1;
  g.Wo = (g.W + 2 * g.pw - g.kw) / g.sw + 1;
  if (g.Do <= 0 || g.Ho <= 0 || g.Wo <= 0) {
    throw ShapeError("conv3d: kernel larger than padded input " + shape_string(xv.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.value().rank() != 1 || bias.value().dim(0) != g.Co)) {
    throw ShapeError("conv3d: bias " + shape_string(bias.shape()) + " for " + std::to_string(g.Co) +
                     " output channels");
  }

  Tensor<T> out({g.B, g.Co, g.Do, g.Ho, g.Wo});
  const long K = g.K();
  const long P = g.P();
  const int Q = g.Do * g.Ho;
  const int rpc = rows_per_chunk(g);
  CMapR<T> wmat(wv.data(), g.Co, K);
  std::vector<T> cols;
  for (int b = 0; b < g.B; ++b) {
    const T* xb = xv.data() + static_cast<long>(b) * g.Ci * g.in_volume();
    T* ob = out.data() + static_cast<long>(b) * g.Co * P;
    if (g.pointwise()) {
      MapR<T>(ob, g.Co, P).noalias() = wmat * CMapR<T>(xb, K, P);
    } else {
      for (int q0 = 0; q0 < Q; q0 += rpc) {
        const int q1 = std::min(Q, q0 + rpc);
        const long L = static_cast<long>(q1 - q0) * g.Wo;
        cols.resize(static_cast<std::size_t>(K * L));
        im2col(xb, g, q0, q1, cols.data());
        StridedMapR<T> oblk(ob + static_cast<long>(q0) * g.Wo, g.Co, L, Eigen::OuterStride<>(P));
        oblk.noalias() = wmat * CMapR<T>(cols.data(), K, L);
      }
    }
    if (has_bias) {
      for (int co = 0; co < g.Co; ++co) {
        const T bv = bias.value()[co];
        T* p = ob + co * P;
        for (long i = 0; i < P; ++i) p[i] += bv;
      }
    }
  }

  std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
  if (has_bias) inputs.push_back(bias.node_ptr());
  return make_result<T>(std::move(out), std::move(inputs), [g, has_bias](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    Tensor<T>* gx = grad_of(self, 0);
    Tensor<T>* gw = grad_of(self, 1);
    Tensor<T>* gb = has_bias ? grad_of(self, 2) : nullptr;
    const long K = g.K();
    const long P = g.P();
    const int Q = g.Do * g.Ho;
    const int rpc = rows_per_chunk(g);
    CMapR<T> wmat(wv.data(), g.Co, K);
    std::vector<T> cols;
    std::vector<T> dcols;
    for (int b = 0; b < g.B; ++b) {
      const T* xb = xv.data() + static_cast<long>(b) * g.Ci * g.in_volume();
      const T* gob = self.grad.data() + static_cast<long>(b) * g.Co * P;
      T* gxb = gx ? gx->data() + static_cast<long>(b) * g.Ci * g.in_volume() : nullptr;
      if (g.pointwise()) {
        CMapR<T> gmat(gob, g.Co, P);
        if (gw) MapR<T>(gw->data(), g.Co, K).noalias() += gmat * CMapR<T>(xb, K, P).transpose();
        if (gx) MapR<T>(gxb, K, P).noalias() += wmat.transpose() * gmat;
      } else {
        for (int q0 = 0; q0 < Q; q0 += rpc) {
          const int q1 = std::min(Q, q0 + rpc);
          const long L = static_cast<long>(q1 - q0) * g.Wo;
          Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>> gblk(gob + static_cast<long>(q0) * g.Wo, g.Co, L,
                                                                   Eigen::OuterStride<>(P));
          if (gw) {
            cols.resize(static_cast<std::size_t>(K * L));
            im2col(xb, g, q0, q1, cols.data());
            MapR<T>(gw->data(), g.Co, K).noalias() += gblk * CMapR<T>(cols.data(), K, L).transpose();
          }
          if (gx) {
            dcols.resize(static_cast<std::size_t>(K * L));
            MapR<T>(dcols.data(), K, L).noalias() = wmat.transpose() * gblk;
            col2im(dcols.data(), g, q0, q1, gxb);
          }
        }
      }
      if (gb) {
        for (int co = 0; co < g.Co; ++co) {
          const T* p = gob + co * P;
          T acc = 0;
          for (long i = 0; i < P; ++i) acc += p[i];
          (*gb)[co] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, Triple factor) {
  const auto& xv = x.value();
  require_rank(xv, 5, "upsample_nearest");
  const int BC = xv.dim(0) * xv.dim(1);
  const int D = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  const auto [fd, fh, fw] = factor;
  const int D2 = D * fd, H2 = H * fh, W2 = W * fw;
  Tensor<T> out({xv.dim(0), xv.dim(1), D2, H2, W2});
  for (int bc = 0; bc < BC; ++bc) {
    const T* src = xv.data() + static_cast<long>(bc) * D * H * W;
    T* dst = out.data() + static_cast<long>(bc) * D2 * H2 * W2;
    for (int d = 0; d < D2; ++d) {
      for (int h = 0; h < H2; ++h) {
        const T* row = src + (static_cast<long>(d / fd) * H + h / fh) * W;
        T* orow = dst + (static_cast<long>(d) * H2 + h) * W2;
        for (int w = 0; w < W2; ++w) orow[w] = row[w / fw];
      }
    }
  }
  return make_result<T>(std::move(out), {x.node_ptr()}, [=](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (int bc = 0; bc < BC; ++bc) {
        T* dst = g->data() + static_cast<long>(bc) * D * H * W;
        const T* src = self.grad.data() + static_cast<long>(bc) * D2 * H2 * W2;
        for (int d = 0; d < D2; ++d) {
          for (int h = 0; h < H2; ++h) {
            T* row = dst + (static_cast<long>(d / fd) * H + h / fh) * W;
            const T* orow = src + (static_cast<long>(d) * H2 + h) * W2;
            for (int w = 0; w < W2; ++w) row[w / fw] += orow[w];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, Triple factor) {
  const auto& xv = x.value();
  require_rank(xv, 5, "avg_pool");
  const int BC = xv.dim(0) * xv.dim(1);
  const int D = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  const auto [fd, fh, fw] = factor;
  if (fd <= 0 || fh <= 0 || fw <= 0 || D % fd || H % fh || W % fw) {
    throw ShapeError("avg_pool: factors do not divide " + shape_string(xv.shape()));
  }
  const int D2 = D / fd, H2 = H / fh, W2 = W / fw;
  const T inv = T(1) / static_cast<T>(fd * fh * fw);
  Tensor<T> out({xv.dim(0), xv.dim(1), D2, H2, W2});
  for (int bc = 0; bc < BC; ++bc) {
    const T* src = xv.data() + static_cast<long>(bc) * D * H * W;
    T* dst = out.data() + static_cast<long>(bc) * D2 * H2 * W2;
    for (int d = 0; d < D; ++d) {
      for (int h = 0; h < H; ++h) {
        const T* row = src + (static_cast<long>(d) * H + h) * W;
        T* orow = dst + (static_cast<long>(d / fd) * H2 + h / fh) * W2;
        for (int w = 0; w < W; ++w) orow[w / fw] += row[w] * inv;
      }
    }
  }
  return make_result<T>(std::move(out), {x.node_ptr()}, [=](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (int bc = 0; bc < BC; ++bc) {
        T* dst = g->data() + static_cast<long>(bc) * D * H * W;
        const T* src = self.grad.data() + static_cast<long>(bc) * D2 * H2 * W2;
        for (int d = 0; d < D; ++d) {
          for (int h = 0; h < H; ++h) {
            T* row = dst + (static_cast<long>(d) * H + h) * W;
            const T* orow = src + (static_cast<long>(d / fd) * H2 + h / fh) * W2;
            for (int w = 0; w < W; ++w) row[w] += orow[w / fw] * inv;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("group_norm: rank < 2");
  const int B = xv.dim(0);
  const int C = xv.dim(1);
  if (groups <= 0 || C % groups) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(C) +
                     " channels");
  }
  if (gamma.value().size() != static_cast<std::size_t>(C) || beta.value().size() != static_cast<std::size_t>(C)) {
    throw ShapeError("group_norm: affine parameters must have one entry per channel");
  }
  const long S = static_cast<long>(xv.size()) / (static_cast<long>(B) * C);
  const int Cg = C / groups;
  const long M = Cg * S;
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(static_cast<std::size_t>(B) * groups);
  Tensor<T> out(xv.shape());
  for (int b = 0; b < B; ++b) {
    for (int gi = 0; gi < groups; ++gi) {
      const long base = (static_cast<long>(b) * C + gi * Cg) * S;
      double m = 0;
      for (long i = 0; i < M; ++i) m += xv[base + i];
      m /= static_cast<double>(M);
      double var = 0;
      for (long i = 0; i < M; ++i) {
        const double d = xv[base + i] - m;
        var += d * d;
      }
      var /= static_cast<double>(M);
      const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rstd[b * groups + gi] = r;
      for (int c = 0; c < Cg; ++c) {
        const int ch = gi * Cg + c;
        const T ga = gamma.value()[ch];
        const T be = beta.value()[ch];
        for (long s = 0; s < S; ++s) {
          const long idx = base + c * S + s;
          const T xh = static_cast<T>((xv[idx] - m)) * r;
          xhat[idx] = xh;
          out[idx] = xh * ga + be;
        }
      }
    }
  }
  return make_result<T>(
      std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [B, C, groups, S, Cg, M, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& gv = self.inputs[1]->value;
        Tensor<T>* gx = grad_of(self, 0);
        Tensor<T>* gg = grad_of(self, 1);
        Tensor<T>* gbeta = grad_of(self, 2);
        for (int b = 0; b < B; ++b) {
          for (int gi = 0; gi < groups; ++gi) {
            const long base = (static_cast<long>(b) * C + gi * Cg) * S;
            double sum_dyh = 0;
            double sum_dyh_xh = 0;
            for (int c = 0; c < Cg; ++c) {
              const int ch = gi * Cg + c;
              double sdy = 0;
              double sdy_xh = 0;
              for (long s = 0; s < S; ++s) {
                const long idx = base + c * S + s;
                sdy += self.grad[idx];
                sdy_xh += static_cast<double>(self.grad[idx]) * xhat[idx];
              }
              if (gg) (*gg)[ch] += static_cast<T>(sdy_xh);
              if (gbeta) (*gbeta)[ch] += static_cast<T>(sdy);
              sum_dyh += sdy * gv[ch];
              sum_dyh_xh += sdy_xh * gv[ch];
            }
            if (!gx) continue;
            const T r = rstd[b * groups + gi];
            const T mean_dyh = static_cast<T>(sum_dyh / static_cast<double>(M));
            const T mean_dyh_xh = static_cast<T>(sum_dyh_xh / static_cast<double>(M));
            for (int c = 0; c < Cg; ++c) {
              const T ga = gv[gi * Cg + c];
              for (long s = 0; s < S; ++s) {
                const long idx = base + c * S + s;
                (*gx)[idx] += r * (self.grad[idx] * ga - mean_dyh - xhat[idx] * mean_dyh_xh);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank(xv, 2, "linear input");
  require_rank(wv, 2, "linear weight");
  if (wv.dim(1) != xv.dim(1) || bias.value().size() != static_cast<std::size_t>(wv.dim(0))) {
    throw ShapeError("linear: input " + shape_string(xv.shape()) + ", weight " + shape_string(wv.shape()));
  }
  const int B = xv.dim(0), In = xv.dim(1), Out = wv.dim(0);
  Tensor<T> out({B, Out});
  MapR<T> y(out.data(), B, Out);
  y.noalias() = CMapR<T>(xv.data(), B, In) * CMapR<T>(wv.data(), Out, In).transpose();
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < Out; ++o) y(b, o) += bias.value()[o];
  }
  return make_result<T>(std::move(out), {x.node_ptr(), weight.node_ptr(), bias.node_ptr()},
                        [B, In, Out](Node<T>& self) {
                          CMapR<T> gy(self.grad.data(), B, Out);
                          if (auto* g = grad_of(self, 0)) {
                            MapR<T>(g->data(), B, In).noalias() +=
                                gy * CMapR<T>(self.inputs[1]->value.data(), Out, In);
                          }
                          if (auto* g = grad_of(self, 1)) {
                            MapR<T>(g->data(), Out, In).noalias() +=
                                gy.transpose() * CMapR<T>(self.inputs[0]->value.data(), B, In);
                          }
                          if (auto* g = grad_of(self, 2)) {
                            for (int b = 0; b < B; ++b) {
                              for (int o = 0; o < Out; ++o) (*g)[o] += gy(b, o);
                            }
                          }
                        });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank(av, 3, "bmm lhs");
  require_rank(bv, 3, "bmm rhs");
  const int B = av.dim(0);
  const int ar = av.dim(1), ac = av.dim(2);
  const int br = bv.dim(1), bc = bv.dim(2);
  const int M = trans_a ? ac : ar;
  const int Ka = trans_a ? ar : ac;
  const int Kb = trans_b ? bc : br;
  const int N = trans_b ? br : bc;
  if (bv.dim(0) != B || Ka != Kb) {
    throw ShapeError("bmm: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor<T> out({B, M, N});
  for (int i = 0; i < B; ++i) {
    CMapR<T> A(av.data() + static_cast<long>(i) * ar * ac, ar, ac);
    CMapR<T> Bm(bv.data() + static_cast<long>(i) * br * bc, br, bc);
    MapR<T> C(out.data() + static_cast<long>(i) * M * N, M, N);
    if (!trans_a && !trans_b) C.noalias() = A * Bm;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * Bm;
    else if (!trans_a && trans_b) C.noalias() = A * Bm.transpose();
    else C.noalias() = A.transpose() * Bm.transpose();
  }
  return make_result<T>(std::move(out), {a.node_ptr(), b.node_ptr()},
                        [=](Node<T>& self) {
                          Tensor<T>* ga = grad_of(self, 0);
                          Tensor<T>* gb = grad_of(self, 1);
                          const auto& av = self.inputs[0]->value;
                          const auto& bv = self.inputs[1]->value;
                          for (int i = 0; i < B; ++i) {
                            CMapR<T> A(av.data() + static_cast<long>(i) * ar * ac, ar, ac);
                            CMapR<T> Bm(bv.data() + static_cast<long>(i) * br * bc, br, bc);
                            CMapR<T> G(self.grad.data() + static_cast<long>(i) * M * N, M, N);
                            if (ga) {
                              MapR<T> GA(ga->data() + static_cast<long>(i) * ar * ac, ar, ac);
                              // d op(A) = G op(B)^T
                              if (!trans_a && !trans_b) GA.noalias() += G * Bm.transpose();
                              else if (!trans_a && trans_b) GA.noalias() += G * Bm;
                              else if (trans_a && !trans_b) GA.noalias() += Bm * G.transpose();
                              else GA.noalias() += Bm.transpose() * G.transpose();
                            }
                            if (gb) {
                              MapR<T> GB(gb->data() + static_cast<long>(i) * br * bc, br, bc);
                              // d op(B) = op(A)^T G
                              if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
                              else if (trans_a && !trans_b) GB.noalias() += A * G;
                              else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
                              else GB.noalias() += G.transpose() * A.transpose();
                            }
                          }
                        });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const auto& xv = x.value();
  const int n = xv.dim(-1);
  const std::size_t rows = xv.size() / n;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * n;
    T* dst = out.data() + r * n;
    const T mx = *std::max_element(src, src + n);
    T total = 0;
    for (int i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - mx);
      total += dst[i];
    }
    for (int i = 0; i < n; ++i) dst[i] /= total;
  }
  return make_result<T>(std::move(out), {x.node_ptr()}, [n, rows](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * n;
        const T* gy = self.grad.data() + r * n;
        T dot = 0;
        for (int i = 0; i < n; ++i) dot += gy[i] * y[i];
        T* dst = g->data() + r * n;
        for (int i = 0; i < n; ++i) dst[i] += y[i] * (gy[i] - dot);
      }
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ArgumentError("dropout probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  for (auto& m : mask.values()) m = rng.bernoulli(p) ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result<T>(std::move(out), {x.node_ptr()}, [mask = std::move(mask)](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * mask[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {x.node_ptr()}, [](Node<T>& self) {
    if (auto* g = grad_of(self, 0)) {
      for (auto& v : g->values()) v += self.grad[0];
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T n = static_cast<T>(std::max<std::size_t>(1, x.value().size()));
  return scale(sum(x), T(1) / n);
}

template <typename T>
Var<T> mse(const Var<T>& prediction, const Var<T>& target) {
  require_same_shape(prediction.shape(), target.shape(), "mse");
  const auto& p = prediction.value();
  const auto& t = target.value();
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - t[i];
    acc += d * d;
  }
  const std::size_t n = std::max<std::size_t>(1, p.size());
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / n)), {prediction.node_ptr(), target.node_ptr()},
                        [n](Node<T>& self) {
                          const auto& p = self.inputs[0]->value;
                          const auto& t = self.inputs[1]->value;
                          const T k = T(2) * self.grad[0] / static_cast<T>(n);
                          if (auto* g = grad_of(self, 0)) {
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += k * (p[i] - t[i]);
                          }
                          if (auto* g = grad_of(self, 1)) {
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= k * (p[i] - t[i]);
                          }
                        });
}

template <typename T>
Var<T> gaussian_kl(const Var<T>& mean_v, const Var<T>& logvar) {
  require_same_shape(mean_v.shape(), logvar.shape(), "gaussian_kl");
  const auto& mu = mean_v.value();
  const auto& lv = logvar.value();
  double acc = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    acc += 0.5 * (static_cast<double>(mu[i]) * mu[i] + std::exp(static_cast<double>(lv[i])) - 1.0 - lv[i]);
  }
  const std::size_t n = std::max<std::size_t>(1, mu.size());
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / n)), {mean_v.node_ptr(), logvar.node_ptr()},
                        [n](Node<T>& self) {
                          const auto& mu = self.inputs[0]->value;
                          const auto& lv = self.inputs[1]->value;
                          const T k = self.grad[0] / static_cast<T>(n);
                          if (auto* g = grad_of(self, 0)) {
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += k * mu[i];
                          }
                          if (auto* g = grad_of(self, 1)) {
                            for (std::size_t i = 0; i < g->size(); ++i) {
                              (*g)[i] += k * T(0.5) * (std::exp(lv[i]) - T(1));
                            }
                          }
                        });
}

#define STEMDIFF_INSTANTIATE(T)                                                                       \
  template void backward<T>(const Var<T>&);                                                           \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> scale<T>(const Var<T>&, T);                                                         \
  template Var<T> silu<T>(const Var<T>&);                                                             \
  template Var<T> exp<T>(const Var<T>&);                                                              \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                   \
  template Var<T> add_channel_bias<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> add_broadcast_batch<T>(const Var<T>&, const Var<T>&);                               \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> slice_channels<T>(const Var<T>&, int, int);                                         \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Triple, Triple);             \
  template Var<T> upsample_nearest<T>(const Var<T>&, Triple);                                         \
  template Var<T> avg_pool<T>(const Var<T>&, Triple);                                                 \
  template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                 \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> bmm<T>(const Var<T>&, const Var<T>&, bool, bool);                                   \
  template Var<T> softmax_last<T>(const Var<T>&);                                                     \
  template Var<T> dropout<T>(const Var<T>&, double, Rng&);                                            \
  template Var<T> sum<T>(const Var<T>&);                                                              \
  template Var<T> mean<T>(const Var<T>&);                                                             \
  template Var<T> mse<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> gaussian_kl<T>(const Var<T>&, const Var<T>&);

STEMDIFF_INSTANTIATE(float)
STEMDIFF_INSTANTIATE(double)

#undef STEMDIFF_INSTANTIATE

}  // namespace stemdiff::ag
