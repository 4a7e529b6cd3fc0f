#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maskmamba/alloc.hpp"
#include "maskmamba/fastmath.hpp"
#include "maskmamba/rng.hpp"

namespace maskmamba {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <class T>
using Buffer = std::vector<T, CountedAlloc<T>>;

inline Index numel_of(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// ---------------------------------------------------------------------------
// Grad recording mode
// ---------------------------------------------------------------------------

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// NaN/Inf assertions after each forward op. Off during benchmarking.
inline bool& finite_checks() {
  thread_local bool enabled = true;
  return enabled;
}

// ---------------------------------------------------------------------------
// Node / Tensor
// ---------------------------------------------------------------------------

template <class T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void()> backward_fn;

  Index numel() const { return static_cast<Index>(data.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Handle to a value in the autodiff graph. Copies share the node; data is
// treated as immutable once a forward op produced it (optimizer steps mutate
// leaf parameters in place between graphs).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<Node<T>>()) {}
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    Tensor t = uninit(std::move(shape), "leaf");
    std::fill(t.node_->data.begin(), t.node_->data.end(), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = uninit(std::move(shape), "leaf");
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(Shape shape, const std::vector<T>& values) {
    Tensor t = uninit(std::move(shape), "leaf");
    if (static_cast<Index>(values.size()) != t.numel())
      throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.node_->data.begin());
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t = uninit(std::move(shape), "leaf");
    for (auto& v : t.node_->data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t = uninit(std::move(shape), "leaf");
    for (auto& v : t.node_->data)
      v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }

  // Uninitialized storage; every kernel fully writes its output.
  static Tensor uninit(Shape shape, const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data.resize(static_cast<std::size_t>(numel_of(n->shape)));
    n->op = op;
    return Tensor(std::move(n));
  }

  const Shape& shape() const { return node_->shape; }
  Index ndim() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  Index numel() const { return node_->numel(); }
  bool defined() const { return !node_->shape.empty(); }

  std::span<T> data() { return {node_->data.data(), node_->data.size()}; }
  std::span<const T> data() const { return {node_->data.data(), node_->data.size()}; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  std::span<const T> grad() const {
    if (node_->grad.empty()) throw std::runtime_error("Tensor::grad: no gradient accumulated");
    return {node_->grad.data(), node_->grad.size()};
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: numel != 1");
    return node_->data[0];
  }

  Tensor& set_requires_grad(bool v = true) {
    node_->requires_grad = v;
    return *this;
  }
  bool requires_grad() const { return node_->requires_grad; }

  // Same data buffer viewed under a different shape (no copy).
  Tensor reshape(Shape s) const {
    if (numel_of(s) != numel()) shape_error("reshape", shape(), s);
    auto n = std::make_shared<Node<T>>(*node_);
    n->shape = std::move(s);
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks()) return;
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
  }
}

// Result node wiring shared by every recorded primitive.
template <class T>
inline Tensor<T> make_result(Shape shape, const char* op,
                             std::initializer_list<const Tensor<T>*> inputs) {
  Tensor<T> out = Tensor<T>::uninit(std::move(shape), op);
  if (grad_mode()) {
    bool needs = false;
    for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
      out.node()->requires_grad = true;
      out.node()->parents.reserve(inputs.size());
      for (const Tensor<T>* in : inputs) out.node()->parents.push_back(in->node());
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape: linearized graph in topological order (inputs precede users)
// ---------------------------------------------------------------------------

template <class T>
struct Tape {
  std::vector<std::shared_ptr<Node<T>>> order;

  static Tape build(const Tensor<T>& root) {
    Tape tape;
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS over parents.
    struct Frame {
      std::shared_ptr<Node<T>> node;
      std::size_t next_parent = 0;
    };
    std::vector<Frame> stack;
    if (root.node()->requires_grad) stack.push_back({root.node()});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (seen.count(f.node.get())) {
        stack.pop_back();
        continue;
      }
      if (f.next_parent < f.node->parents.size()) {
        auto& p = f.node->parents[f.next_parent++];
        if (!seen.count(p.get()) && p->requires_grad) stack.push_back({p});
      } else {
        seen.insert(f.node.get());
        tape.order.push_back(f.node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

// Reverse-mode sweep. Gradients accumulate (sum) into every requires_grad
// leaf; call zero_grad between backward passes when accumulation is unwanted.
template <class T>
inline void backward(Tape<T>& tape, Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.node()->requires_grad) return;
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

template <class T>
inline void backward(Tensor<T> loss) {
  Tape<T> tape = Tape<T>::build(loss);
  backward(tape, loss);
}

// ---------------------------------------------------------------------------
// Elementwise and shape primitives
// ---------------------------------------------------------------------------

namespace detail {

// b broadcasts over the leading dims of a when its shape is a trailing suffix
// of a's shape.
template <class T>
inline Index broadcast_rows(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size()) shape_error(op, sa, sb);
  for (std::size_t i = 0; i < sb.size(); ++i) {
    if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) shape_error(op, sa, sb);
  }
  return a.numel() / std::max<Index>(b.numel(), 1);
}

}  // namespace detail

template <class T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Index rows = detail::broadcast_rows("add", a, b);
  const Index bn = b.numel();
  Tensor<T> out = detail::make_result<T>(a.shape(), "add", {&a, &b});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < bn; ++i) po[r * bn + i] = pa[r * bn + i] + pb[i];
  detail::check_finite(out, "add");
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn_ = b.node();
    auto on = out.node().get();
    out.node()->backward_fn = [an, bn_, on, rows, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (Index i = 0; i < on->numel(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn_->requires_grad) {
        bn_->ensure_grad();
        for (Index r = 0; r < rows; ++r)
          for (Index i = 0; i < bn; ++i) bn_->grad[i] += on->grad[r * bn + i];
      }
    };
  }
  return out;
}

template <class T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor<T> out = detail::make_result<T>(a.shape(), "mul", {&a, &b});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  detail::check_finite(out, "mul");
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node().get();
    out.node()->backward_fn = [an, bn, on, n]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (Index i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (Index i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    };
  }
  return out;
}

template <class T>
inline Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = detail::make_result<T>(a.shape(), "scale", {&a});
  const T* pa = a.data().data();
  T* po = out.data().data();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) po[i] = pa[i] * c;
  detail::check_finite(out, "scale");
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node().get();
    out.node()->backward_fn = [an, on, c, n]() {
      an->ensure_grad();
      for (Index i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
    };
  }
  return out;
}

template <class T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

// Unary op helper: f(x) and df(x) as callables over the stored input value.
namespace detail {

template <class T, class F, class DF>
inline Tensor<T> unary_op(const Tensor<T>& a, const char* name, F f, DF df) {
  Tensor<T> out = make_result<T>(a.shape(), name, {&a});
  const T* pa = a.data().data();
  T* po = out.data().data();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) po[i] = f(pa[i]);
  check_finite(out, name);
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node().get();
    out.node()->backward_fn = [an, on, df, n]() {
      an->ensure_grad();
      for (Index i = 0; i < n; ++i) an->grad[i] += on->grad[i] * df(an->data[i]);
    };
  }
  return out;
}

}  // namespace detail

template <class T>
inline Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, "exp", [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
inline Tensor<T> neg_exp(const Tensor<T>& a) {
  // -exp(x): the stored-log parameterization of strictly negative quantities.
  return detail::unary_op(
      a, "neg_exp", [](T x) { return -std::exp(x); }, [](T x) { return -std::exp(x); });
}

template <class T>
inline Tensor<T> softplus(const Tensor<T>& a) {
  auto f = [](T x) {
    // log1p(exp(x)) with overflow guard
    return x > T(30) ? x : static_cast<T>(std::log1p(std::exp(static_cast<double>(x))));
  };
  auto df = [](T x) { return T(1) / (T(1) + std::exp(-x)); };
  return detail::unary_op(a, "softplus", f, df);
}

template <class T>
inline Tensor<T> silu(const Tensor<T>& a) {
  auto f = [](T x) { return x / (T(1) + std::exp(-x)); };
  auto df = [](T x) {
    T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
  };
  return detail::unary_op(a, "silu", f, df);
}

template <class T>
inline Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  auto f = [](T x) {
    return static_cast<T>(0.5 * static_cast<double>(x) *
                          (1.0 + std::erf(static_cast<double>(x) * kInvSqrt2)));
  };
  auto df = [](T x) {
    double xd = static_cast<double>(x);
    double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
    return static_cast<T>(phi + xd * pdf);
  };
  return detail::unary_op(a, "gelu", f, df);
}

template <class T>
inline Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = detail::make_result<T>({1}, "sum", {&a});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  detail::check_finite(out, "sum");
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node().get();
    out.node()->backward_fn = [an, on]() {
      an->ensure_grad();
      const T g = on->grad[0];
      for (auto& v : an->grad) v += g;
    };
  }
  return out;
}

template <class T>
inline Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
inline Tensor<T> flip(const Tensor<T>& a, Index axis) {
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim())
    throw std::invalid_argument("flip: axis out of range for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const Index n = s[static_cast<std::size_t>(axis)];

  Tensor<T> out = detail::make_result<T>(a.shape(), "flip", {&a});
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < n; ++i)
      std::copy(pa + (o * n + i) * inner, pa + (o * n + i + 1) * inner,
                po + (o * n + (n - 1 - i)) * inner);
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node().get();
    out.node()->backward_fn = [an, on, outer, n, inner]() {
      an->ensure_grad();
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < n; ++i) {
          const T* g = on->grad.data() + (o * n + (n - 1 - i)) * inner;
          T* d = an->grad.data() + (o * n + i) * inner;
          for (Index j = 0; j < inner; ++j) d[j] += g[j];
        }
    };
  }
  return out;
}

template <class T>
inline Tensor<T> concat(const std::vector<Tensor<T>>& parts, Index axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Index nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  Shape out_shape = parts[0].shape();
  Index axis_total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) shape_error("concat", parts[0].shape(), p.shape());
    for (Index i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != out_shape[static_cast<std::size_t>(i)])
        shape_error("concat", parts[0].shape(), p.shape());
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  Tensor<T> out = Tensor<T>::uninit(out_shape, "concat");
  if (grad_mode()) {
    bool needs = false;
    for (const auto& p : parts) needs = needs || p.requires_grad();
    if (needs) {
      out.node()->requires_grad = true;
      for (const auto& p : parts) out.node()->parents.push_back(p.node());
    }
  }

  T* po = out.data().data();
  std::vector<Index> sizes;
  for (const auto& p : parts) sizes.push_back(p.dim(axis));
  for (Index o = 0; o < outer; ++o) {
    Index off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Index nk = sizes[k];
      const T* src = parts[k].data().data() + o * nk * inner;
      std::copy(src, src + nk * inner, po + (o * axis_total + off) * inner);
      off += nk;
    }
  }
  if (out.requires_grad()) {
    auto on = out.node().get();
    auto parents = out.node()->parents;
    out.node()->backward_fn = [on, parents, sizes, outer, inner, axis_total]() {
      for (Index o = 0; o < outer; ++o) {
        Index off = 0;
        for (std::size_t k = 0; k < parents.size(); ++k) {
          const Index nk = sizes[k];
          if (parents[k]->requires_grad) {
            parents[k]->ensure_grad();
            const T* g = on->grad.data() + (o * axis_total + off) * inner;
            T* d = parents[k]->grad.data() + o * nk * inner;
            for (Index j = 0; j < nk * inner; ++j) d[j] += g[j];
          }
          off += nk;
        }
      }
    };
  }
  return out;
}

template <class T>
inline Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, Index axis) {
  return concat(std::vector<Tensor<T>>{a, b}, axis);
}

template <class T>
inline std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<Index>& sizes,
                                    Index axis) {
  Index nd = x.ndim();
  if (axis < 0) axis += nd;
  Index total = 0;
  for (Index s : sizes) total += s;
  if (total != x.dim(axis))
    throw std::invalid_argument("split: sizes sum " + std::to_string(total) +
                                " != dim " + std::to_string(x.dim(axis)));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.dim(i);
  for (Index i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  const Index axis_total = x.dim(axis);

  std::vector<Tensor<T>> outs;
  Index off = 0;
  for (Index nk : sizes) {
    Shape s = x.shape();
    s[static_cast<std::size_t>(axis)] = nk;
    Tensor<T> out = detail::make_result<T>(std::move(s), "split", {&x});
    T* po = out.data().data();
    const T* px = x.data().data();
    for (Index o = 0; o < outer; ++o)
      std::copy(px + (o * axis_total + off) * inner, px + (o * axis_total + off + nk) * inner,
                po + o * nk * inner);
    if (out.requires_grad()) {
      auto xn = x.node();
      auto on = out.node().get();
      const Index off_k = off;
      out.node()->backward_fn = [xn, on, outer, inner, axis_total, nk, off_k]() {
        xn->ensure_grad();
        for (Index o = 0; o < outer; ++o) {
          const T* g = on->grad.data() + o * nk * inner;
          T* d = xn->grad.data() + (o * axis_total + off_k) * inner;
          for (Index j = 0; j < nk * inner; ++j) d[j] += g[j];
        }
      };
    }
    outs.push_back(std::move(out));
    off += nk;
  }
  return outs;
}

// Equal split into k parts along axis.
template <class T>
inline std::vector<Tensor<T>> split_equal(const Tensor<T>& x, Index k, Index axis) {
  Index nd = x.ndim();
  Index ax = axis < 0 ? axis + nd : axis;
  if (x.dim(ax) % k != 0)
    throw std::invalid_argument("split_equal: dim " + std::to_string(x.dim(ax)) +
                                " not divisible by " + std::to_string(k));
  return split(x, std::vector<Index>(static_cast<std::size_t>(k), x.dim(ax) / k), axis);
}

// Rows of x ([B,L,C]) at the given positions along axis 1.
template <class T>
inline Tensor<T> gather_positions(const Tensor<T>& x, const std::vector<Index>& positions) {
  if (x.ndim() != 3) throw std::invalid_argument("gather_positions: expected rank 3");
  const Index B = x.dim(0), L = x.dim(1), C = x.dim(2);
  for (Index p : positions)
    if (p < 0 || p >= L) throw std::out_of_range("gather_positions: index out of range");
  const Index P = static_cast<Index>(positions.size());
  Tensor<T> out = detail::make_result<T>({B, P, C}, "gather_positions", {&x});
  const T* px = x.data().data();
  T* po = out.data().data();
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < P; ++i)
      std::copy(px + (b * L + positions[static_cast<std::size_t>(i)]) * C,
                px + (b * L + positions[static_cast<std::size_t>(i)] + 1) * C,
                po + (b * P + i) * C);
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node().get();
    auto pos = positions;
    out.node()->backward_fn = [xn, on, pos, B, L, C]() {
      xn->ensure_grad();
      const Index P = static_cast<Index>(pos.size());
      for (Index b = 0; b < B; ++b)
        for (Index i = 0; i < P; ++i) {
          const T* g = on->grad.data() + (b * P + i) * C;
          T* d = xn->grad.data() + (b * L + pos[static_cast<std::size_t>(i)]) * C;
          for (Index c = 0; c < C; ++c) d[c] += g[c];
        }
    };
  }
  return out;
}

}  // namespace maskmamba
