#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "prunekit/errors.hpp"
#include "prunekit/tensor.hpp"

// Reverse-mode autodiff over dense tensors. Every op builds a graph node
// whose backward closure accumulates into its parents' grads. Nodes carry a
// creation sequence number; since parents are always created before children,
// descending sequence order is a valid (and deterministic) topological order
// for the backward sweep.

namespace prunekit {

namespace detail {

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// PRUNEKIT_THREADS gives optional intra-op parallelism for matmul. Each
// output row is computed independently, so results stay bit-identical.
inline unsigned intra_op_threads() {
  static const unsigned n = [] {
    const char* env = std::getenv("PRUNEKIT_THREADS");
    if (!env) return 1u;
    const long v = std::strtol(env, nullptr, 10);
    return v > 1 ? static_cast<unsigned>(v) : 1u;
  }();
  return n;
}

inline void parallel_rows(std::size_t rows, const std::function<void(std::size_t, std::size_t)>& body) {
  const unsigned threads = intra_op_threads();
  if (threads <= 1 || rows < 8) {
    body(0, rows);
    return;
  }
  const std::size_t chunk = (rows + threads - 1) / threads;
  std::vector<std::thread> pool;
  for (std::size_t begin = 0; begin < rows; begin += chunk) {
    const std::size_t end = std::min(rows, begin + chunk);
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated iff requires_grad
  bool requires_grad{false};
  std::uint64_t seq{0};
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;
};

// Shared handle to a graph node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->seq = detail::next_seq();
    return Var(std::move(n));
  }

  // Trainable leaf; registers on the tape and accumulates gradient.
  static Var parameter(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->grad = Tensor<T>(n->value.shape);
    n->requires_grad = true;
    n->seq = detail::next_seq();
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) n->grad = Tensor<T>(n->value.shape);
  n->seq = next_seq();
  return n;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  auto n = detail::make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    n->backward = [](Node<T>& self) {
      for (int k = 0; k < 2; ++k) {
        auto& p = self.parents[k];
        if (!p->requires_grad) continue;
        for (std::size_t i = 0; i < self.grad.numel(); ++i) p->grad.data[i] += self.grad.data[i];
      }
    };
  }
  return Var<T>(n);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  auto n = detail::make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    n->backward = [](Node<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        if (pa->requires_grad) pa->grad.data[i] += self.grad.data[i];
        if (pb->requires_grad) pb->grad.data[i] -= self.grad.data[i];
      }
    };
  }
  return Var<T>(n);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  auto n = detail::make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    n->backward = [](Node<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        if (pa->requires_grad) pa->grad.data[i] += self.grad.data[i] * pb->value.data[i];
        if (pb->requires_grad) pb->grad.data[i] += self.grad.data[i] * pa->value.data[i];
      }
    };
  }
  return Var<T>(n);
}

template <typename T>
Var<T> scale_const(const Var<T>& a, T c) {
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * c;
  auto n = detail::make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    n->backward = [c](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) p->grad.data[i] += self.grad.data[i] * c;
    };
  }
  return Var<T>(n);
}

template <typename T>
Var<T> add_const(const Var<T>& a, T c) {
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + c;
  auto n = detail::make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    n->backward = [](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) p->grad.data[i] += self.grad.data[i];
    };
  }
  return Var<T>(n);
}

// X[m x n] + v broadcast over rows; v may be shaped [n] or [1 x n].
template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  if (x.value().rank() != 2) throw ShapeError("add_rowvec: x must be rank 2, got " + shape_str(x.value().shape));
  const std::size_t m = x.value().shape[0];
  const std::size_t n = x.value().shape[1];
  if (v.value().numel() != n) {
    throw ShapeError("add_rowvec: vector " + shape_str(v.value().shape) + " does not match row width of " +
                     shape_str(x.value().shape));
  }
  Tensor<T> out(x.value().shape);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = x.value().data[i * n + j] + v.value().data[j];
  auto nd = detail::make_node<T>(std::move(out), {x.node(), v.node()});
  if (nd->requires_grad) {
    nd->backward = [m, n](Node<T>& self) {
      auto& px = self.parents[0];
      auto& pv = self.parents[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = self.grad.data[i * n + j];
          if (px->requires_grad) px->grad.data[i * n + j] += g;
          if (pv->requires_grad) pv->grad.data[j] += g;
        }
    };
  }
  return Var<T>(nd);
}

// Multiply X along `axis` by vector v (broadcast over the other axes).
template <typename T>
Var<T> scale_axis(const Var<T>& x, const Var<T>& v, std::size_t axis) {
  const auto& xs = x.value().shape;
  if (axis >= xs.size()) throw ShapeError("scale_axis: axis out of range for " + shape_str(xs));
  if (v.value().numel() != xs[axis]) {
    throw ShapeError("scale_axis: gate length " + shape_str(v.value().shape) + " vs axis extent " +
                     std::to_string(xs[axis]) + " of " + shape_str(xs));
  }
  std::size_t stride = 1;
  for (std::size_t a = axis + 1; a < xs.size(); ++a) stride *= xs[a];
  const std::size_t extent = xs[axis];
  Tensor<T> out(xs);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const std::size_t c = (i / stride) % extent;
    out.data[i] = x.value().data[i] * v.value().data[c];
  }
  auto nd = detail::make_node<T>(std::move(out), {x.node(), v.node()});
  if (nd->requires_grad) {
    nd->backward = [stride, extent](Node<T>& self) {
      auto& px = self.parents[0];
      auto& pv = self.parents[1];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const std::size_t c = (i / stride) % extent;
        if (px->requires_grad) px->grad.data[i] += self.grad.data[i] * pv->value.data[c];
        if (pv->requires_grad) pv->grad.data[c] += self.grad.data[i] * px->value.data[i];
      }
    };
  }
  return Var<T>(nd);
}

// Multiply every element of X by the scalar node s (shape [1]).
template <typename T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
  if (s.value().numel() != 1) throw ShapeError("scale_by: scalar must have shape [1], got " + shape_str(s.value().shape));
  const T sv = s.value().data[0];
  Tensor<T> out(x.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[i] * sv;
  auto nd = detail::make_node<T>(std::move(out), {x.node(), s.node()});
  if (nd->requires_grad) {
    nd->backward = [](Node<T>& self) {
      auto& px = self.parents[0];
      auto& ps = self.parents[1];
      const T sv2 = ps->value.data[0];
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        if (px->requires_grad) px->grad.data[i] += self.grad.data[i] * sv2;
        acc += self.grad.data[i] * px->value.data[i];
      }
      if (ps->requires_grad) ps->grad.data[0] += acc;
    };
  }
  return Var<T>(nd);
}

// v[i] as a [1]-shaped node.
template <typename T>
Var<T> element(const Var<T>& v, std::size_t i) {
  if (i >= v.value().numel()) throw ShapeError("element: index out of range for " + shape_str(v.value().shape));
  auto nd = detail::make_node<T>(Tensor<T>::scalar(v.value().data[i]), {v.node()});
  if (nd->requires_grad) {
    nd->backward = [i](Node<T>& self) {
      auto& p = self.parents[0];
      if (p->requires_grad) p->grad.data[i] += self.grad.data[0];
    };
  }
  return Var<T>(nd);
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (const T v : a.value().data) acc += v;
  auto nd = detail::make_node<T>(Tensor<T>::scalar(acc), {a.node()});
  if (nd->requires_grad) {
    nd->backward = [](Node<T>& self) {
      auto& p = self.parents[0];
      const T g = self.grad.data[0];
      for (std::size_t i = 0; i < p->grad.numel(); ++i) p->grad.data[i] += g;
    };
  }
  return Var<T>(nd);
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<std::size_t> shape) {
  if (numel_of(shape) != a.value().numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.value().shape) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), a.value().data);
  auto nd = detail::make_node<T>(std::move(out), {a.node()});
  if (nd->requires_grad) {
    nd->backward = [](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) p->grad.data[i] += self.grad.data[i];
    };
  }
  return Var<T>(nd);
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.value().shape;
  const auto& bs = b.value().shape;
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor<T> out({m, n});
  const T* A = a.value().data.data();
  const T* B = b.value().data.data();
  T* C = out.data.data();
  detail::parallel_rows(m, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A[i * k + p];
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
      }
  });
  auto nd = detail::make_node<T>(std::move(out), {a.node(), b.node()});
  if (nd->requires_grad) {
    nd->backward = [m, k, n](Node<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      const T* G = self.grad.data.data();
      if (pa->requires_grad) {
        T* dA = pa->grad.data.data();
        const T* B = pb->value.data.data();
        detail::parallel_rows(m, [&](std::size_t r0, std::size_t r1) {
          for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
              dA[i * k + p] += acc;
            }
        });
      }
      if (pb->requires_grad) {
        T* dB = pb->grad.data.data();
        const T* A = pa->value.data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
          }
      }
    };
  }
  return Var<T>(nd);
}

// a . b^T for a[m x k], b[n x k].
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.value().shape;
  const auto& bs = b.value().shape;
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1]) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[0];
  Tensor<T> out({m, n});
  const T* A = a.value().data.data();
  const T* B = b.value().data.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      out.data[i * n + j] = acc;
    }
  auto nd = detail::make_node<T>(std::move(out), {a.node(), b.node()});
  if (nd->requires_grad) {
    nd->backward = [m, k, n](Node<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      const T* G = self.grad.data.data();
      const T* A = pa->value.data.data();
      const T* B = pb->value.data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G[i * n + j];
          if (g == T(0)) continue;
          for (std::size_t p = 0; p < k; ++p) {
            if (pa->requires_grad) pa->grad.data[i * k + p] += g * B[j * k + p];
            if (pb->requires_grad) pb->grad.data[j * k + p] += g * A[i * k + p];
          }
        }
    };
  }
  return Var<T>(nd);
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = a.value().data[i];
    out.data[i] = v > T(0) ? v : T(0);
  }
  auto nd = detail::make_node<T>(std::move(out), {a.node()});
  if (nd->requires_grad) {
    nd->backward = [](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        if (p->value.data[i] > T(0)) p->grad.data[i] += self.grad.data[i];
    };
  }
  return Var<T>(nd);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = static_cast<double>(a.value().data[i]);
    out.data[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
  }
  auto nd = detail::make_node<T>(std::move(out), {a.node()});
  if (nd->requires_grad) {
    nd->backward = [](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const T y = self.value.data[i];
        p->grad.data[i] += self.grad.data[i] * y * (T(1) - y);
      }
    };
  }
  return Var<T>(nd);
}

// Row-wise softmax with max-shift for stability.
template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  if (a.value().rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_str(a.value().shape));
  if (!a.value().all_finite()) throw NumericError("softmax_rows: non-finite input");
  const std::size_t m = a.value().shape[0], n = a.value().shape[1];
  Tensor<T> out(a.value().shape);
  for (std::size_t i = 0; i < m; ++i) {
    T mx = a.value().data[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.value().data[i * n + j]);
    double denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(a.value().data[i * n + j] - mx));
      out.data[i * n + j] = static_cast<T>(e);
      denom += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = static_cast<T>(out.data[i * n + j] / denom);
  }
  auto nd = detail::make_node<T>(std::move(out), {a.node()});
  if (nd->requires_grad) {
    nd->backward = [m, n](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < m; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad.data[i * n + j] * self.value.data[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          const T y = self.value.data[i * n + j];
          p->grad.data[i * n + j] += y * (self.grad.data[i * n + j] - dot);
        }
      }
    };
  }
  return Var<T>(nd);
}

// Layer norm with optional per-channel gate z. With z the row statistics are
// gate-weighted and the affine output is gated, so a binary z reproduces the
// compacted network's layer norm exactly on surviving channels.
template <typename T>
Var<T> layer_norm_gated(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, T eps, const Var<T>& z) {
  if (x.value().rank() != 2) throw ShapeError("layer_norm: expected rank 2, got " + shape_str(x.value().shape));
  const std::size_t m = x.value().shape[0], n = x.value().shape[1];
  if (n < 1) throw ShapeError("layer_norm: empty rows");
  if (eps <= T(0)) throw UsageError("layer_norm: eps must be positive");
  if (scale.value().numel() != n || shift.value().numel() != n) {
    throw ShapeError("layer_norm: affine params " + shape_str(scale.value().shape) + "/" +
                     shape_str(shift.value().shape) + " do not match row width " + std::to_string(n));
  }
  const bool gated = z.defined();
  if (gated && z.value().numel() != n) {
    throw ShapeError("layer_norm: gate " + shape_str(z.value().shape) + " does not match row width " +
                     std::to_string(n));
  }

  Tensor<T> out({m, n});
  Tensor<T> xhat({m, n});    // saved for backward
  std::vector<T> inv_s(m), weight_sum(m);
  for (std::size_t i = 0; i < m; ++i) {
    double W = 0, mu = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double w = gated ? static_cast<double>(z.value().data[j]) : 1.0;
      W += w;
      mu += w * static_cast<double>(x.value().data[i * n + j]);
    }
    if (W <= 0) W = static_cast<double>(n);  // fully-gated row: fall back to plain stats
    mu /= W;
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double w = gated ? static_cast<double>(z.value().data[j]) : 1.0;
      const double d = static_cast<double>(x.value().data[i * n + j]) - mu;
      var += w * d * d;
    }
    var /= W;
    const double s = std::sqrt(var + static_cast<double>(eps));
    inv_s[i] = static_cast<T>(1.0 / s);
    weight_sum[i] = static_cast<T>(W);
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = static_cast<T>((static_cast<double>(x.value().data[i * n + j]) - mu) / s);
      xhat.data[i * n + j] = xh;
      const T g = scale.value().data[j];
      const T b = shift.value().data[j];
      const T w = gated ? z.value().data[j] : T(1);
      out.data[i * n + j] = (xh * g + b) * w;
    }
  }

  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), scale.node(), shift.node()};
  if (gated) parents.push_back(z.node());
  auto nd = detail::make_node<T>(std::move(out), std::move(parents));
  if (nd->requires_grad) {
    nd->backward = [m, n, gated, eps, xhat = std::move(xhat), inv_s = std::move(inv_s),
                    weight_sum = std::move(weight_sum)](Node<T>& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      const Node<T>* pz = gated ? self.parents[3].get() : nullptr;
      for (std::size_t i = 0; i < m; ++i) {
        const T is = inv_s[i];
        const T W = weight_sum[i];
        // G_j = dL/dy_j * g_j * w_j flows into xhat_j; two row reductions
        // (sum G, sum G*xhat) feed every coordinate below.
        T sumG = 0, sumGx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T w = gated ? pz->value.data[j] : T(1);
          const T G = self.grad.data[i * n + j] * pg->value.data[j] * w;
          sumG += G;
          sumGx += G * xhat.data[i * n + j];
        }
        for (std::size_t k = 0; k < n; ++k) {
          const T w = gated ? pz->value.data[k] : T(1);
          const T gout = self.grad.data[i * n + k];
          const T xh = xhat.data[i * n + k];
          if (px->requires_grad) {
            const T G = gout * pg->value.data[k] * w;
            px->grad.data[i * n + k] += is * (G - (w / W) * (sumG + xh * sumGx));
          }
          if (pg->requires_grad) pg->grad.data[k] += gout * xh * w;
          if (pb->requires_grad) pb->grad.data[k] += gout * w;
          if (gated && self.parents[3]->requires_grad) {
            // dmu/dz_k = d_k/W, dvar/dz_k = (d_k^2 - var)/W with
            // d_k = xh_k/is and var = 1/is^2 - eps, giving
            // dz_k = gy*(xh g + b) - (xh/W) sumG - ((xh^2 - 1 + eps*is^2)/(2W)) sumGx.
            const T y_affine = xh * pg->value.data[k] + pb->value.data[k];
            T dz = gout * y_affine;
            dz -= (xh / W) * sumG;
            dz -= ((xh * xh - T(1) + eps * is * is) / (T(2) * W)) * sumGx;
            self.parents[3]->grad.data[k] += dz;
          }
        }
      }
    };
  }
  return Var<T>(nd);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, T eps) {
  return layer_norm_gated(x, scale, shift, eps, Var<T>{});
}

// 1-D convolution over the sequence axis with zero padding, stride 1.
// x[L x Cin], w[Cout x Cin x K] (K odd), b[Cout] -> [L x Cout].
template <typename T>
Var<T> conv1d_same(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x.value().shape;
  const auto& ws = w.value().shape;
  if (xs.size() != 2 || ws.size() != 3 || ws[1] != xs[1]) {
    throw ShapeError("conv1d_same: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
  }
  if (ws[2] % 2 == 0) throw UsageError("conv1d_same: kernel width must be odd");
  if (b.value().numel() != ws[0]) {
    throw ShapeError("conv1d_same: bias " + shape_str(b.value().shape) + " vs out channels " +
                     std::to_string(ws[0]));
  }
  const std::size_t L = xs[0], cin = xs[1], cout = ws[0], K = ws[2];
  const std::size_t pad = K / 2;
  Tensor<T> out({L, cout});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t co = 0; co < cout; ++co) {
      double acc = static_cast<double>(b.value().data[co]);
      for (std::size_t t = 0; t < K; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + t) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        for (std::size_t ci = 0; ci < cin; ++ci)
          acc += static_cast<double>(w.value().data[(co * cin + ci) * K + t]) *
                 static_cast<double>(x.value().data[static_cast<std::size_t>(src) * cin + ci]);
      }
      out.data[l * cout + co] = static_cast<T>(acc);
    }
  auto nd = detail::make_node<T>(std::move(out), {x.node(), w.node(), b.node()});
  if (nd->requires_grad) {
    nd->backward = [L, cin, cout, K, pad](Node<T>& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto& pb = self.parents[2];
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t co = 0; co < cout; ++co) {
          const T g = self.grad.data[l * cout + co];
          if (g == T(0)) continue;
          if (pb->requires_grad) pb->grad.data[co] += g;
          for (std::size_t t = 0; t < K; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + t) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t xi = static_cast<std::size_t>(src) * cin + ci;
              const std::size_t wi = (co * cin + ci) * K + t;
              if (pw->requires_grad) pw->grad.data[wi] += g * px->value.data[xi];
              if (px->requires_grad) px->grad.data[xi] += g * pw->value.data[wi];
            }
          }
        }
    };
  }
  return Var<T>(nd);
}

// Gather rows of a [V x d] table; duplicates accumulate in the backward pass.
template <typename T>
Var<T> lookup_rows(const Var<T>& table, std::vector<std::size_t> ids) {
  const auto& ts = table.value().shape;
  if (ts.size() != 2) throw ShapeError("lookup_rows: table must be rank 2, got " + shape_str(ts));
  for (const std::size_t id : ids)
    if (id >= ts[0]) throw DataError("lookup_rows: row id " + std::to_string(id) + " out of range [0, " + std::to_string(ts[0]) + ")");
  const std::size_t n = ids.size(), d = ts[1];
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] = table.value().data[ids[i] * d + j];
  auto nd = detail::make_node<T>(std::move(out), {table.node()});
  if (nd->requires_grad) {
    nd->backward = [ids = std::move(ids), d](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) p->grad.data[ids[i] * d + j] += self.grad.data[i * d + j];
    };
  }
  return Var<T>(nd);
}

// Stretch s from (0,1) to (gamma, eta), then clamp back to [0,1]. Gradient
// passes through strictly inside the clamp; with gamma=0, eta=1 this is the
// identity on s.
template <typename T>
Var<T> hc_stretch(const Var<T>& s, T gamma, T eta) {
  Tensor<T> out(s.value().shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = gamma + s.value().data[i] * (eta - gamma);
    out.data[i] = std::min(T(1), std::max(T(0), v));
  }
  auto nd = detail::make_node<T>(std::move(out), {s.node()});
  if (nd->requires_grad) {
    nd->backward = [gamma, eta](Node<T>& self) {
      auto& p = self.parents[0];
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const T v = gamma + p->value.data[i] * (eta - gamma);
        if (v > T(0) && v < T(1)) p->grad.data[i] += self.grad.data[i] * (eta - gamma);
      }
    };
  }
  return Var<T>(nd);
}

// Mean squared error against a constant target.
template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  auto d = sub(pred, target);
  return scale_const(sum(mul(d, d)), T(1) / static_cast<T>(pred.value().numel()));
}

// Gradient of a scalar loss w.r.t. each registered parameter. Grads of every
// reachable node are zeroed first, so running the same tape twice is
// idempotent. Parameters must be on the tape (reachable from loss).
template <typename T>
std::vector<Tensor<T>> grad(const Var<T>& loss, const std::vector<Var<T>>& params) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw UsageError("grad: loss must be a defined scalar node");
  }
  if (params.empty()) return {};
  if (!loss.requires_grad()) throw UsageError("grad: loss does not depend on any parameter");
  // Collect reachable nodes (iterative DFS).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  for (const auto& p : params) {
    if (!p.defined() || !seen.count(p.node().get())) {
      throw UsageError("grad: parameter not on tape (not reachable from loss)");
    }
    if (!p.requires_grad()) throw UsageError("grad: parameter does not require grad");
  }
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
  for (Node<T>* n : order) {
    if (n->requires_grad) std::fill(n->grad.data.begin(), n->grad.data.end(), T(0));
  }
  loss.node()->grad.data[0] = T(1);
  for (Node<T>* n : order) {
    if (n->requires_grad && n->backward) n->backward(*n);
  }
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.node()->grad);
  return out;
}

}  // namespace prunekit
