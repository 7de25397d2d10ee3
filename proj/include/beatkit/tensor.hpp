// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense-tensor core with reverse-mode automatic differentiation.
// Tensors are handles onto shared nodes; primitive ops record backward
// closures on the active tape. The scalar type is a template parameter:
// float for training/inference, double for gradient checking.
#ifndef BEATKIT_TENSOR_HPP
#define BEATKIT_TENSOR_HPP

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "beatkit/common.hpp"
#include "beatkit/rng.hpp"

namespace beatkit {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// numpy-style right-aligned broadcasting.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(detail::str("cannot broadcast ", shape_str(a), " with ",
                                   shape_str(b)));
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;          // empty until first use
  bool requires_grad = false;   // leaf parameter flag
  bool on_tape = false;         // set when produced by a recorded op
  std::string name;

  int64_t numel() const { return int64_t(value.size()); }
  bool needs_grad() const { return requires_grad || on_tape; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class Tensor {
public:
  using Node = TensorNode<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return filled(std::move(shape), S(1)); }

  static Tensor filled(Shape shape, S v) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(size_t(numel_of(t.node_->shape)), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> data) {
    if (numel_of(shape) != int64_t(data.size()))
      throw ShapeError(detail::str("data size ", data.size(),
                                   " does not match shape ", shape_str(shape)));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(S v) { return from({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.data()) v = S(rng.normal(0.0, stddev));
    return t;
  }

  static Tensor truncated_normal(Shape shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.data()) v = S(rng.truncated_normal(stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return node_->numel(); }

  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& data() const { return node_->value; }
  std::vector<S>& grad() { return node_->grad; }
  const std::vector<S>& grad() const { return node_->grad; }

  S item() const {
    if (numel() != 1)
      throw ShapeError(detail::str("item() on non-scalar ", shape_str(shape())));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }
  Tensor& set_name(std::string n) {
    node_->name = std::move(n);
    return *this;
  }
  const std::string& name() const { return node_->name; }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), S(0));
  }

  S at(std::initializer_list<int64_t> idx) const {
    auto st = row_major_strides(shape());
    int64_t off = 0;
    size_t i = 0;
    for (int64_t v : idx) off += v * st[i++];
    return node_->value[size_t(off)];
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Detached copy: same values, fresh node outside any graph.
  Tensor detach() const { return from(shape(), data()); }

private:
  std::shared_ptr<Node> node_;
};

// Ordered record of executed primitive ops. Append order is execution order,
// so replaying in reverse visits every op after all its consumers.
template <class S>
class Tape {
public:
  class Scope {
  public:
    explicit Scope(Tape& t) : prev_(current_ptr()) { current_ptr() = &t; }
    ~Scope() { current_ptr() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

  private:
    Tape* prev_;
  };

  static Tape* current() { return current_ptr(); }

  void record(std::shared_ptr<TensorNode<S>> out, std::function<void()> bwd) {
    ops_.push_back({std::move(out), std::move(bwd)});
  }

  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Populates grads of every leaf reachable from `loss`. Gradients
  // accumulate additively into leaves: calling twice without zero_grad
  // doubles them. Intermediate grads are reset on every call.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw ShapeError(detail::str("backward: loss must be scalar, got ",
                                   shape_str(loss.shape())));
    for (auto& op : ops_) {
      op.out->grad.assign(op.out->value.size(), S(0));
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += S(1);
    for (size_t i = ops_.size(); i-- > 0;) {
      ops_[i].bwd();
    }
  }

private:
  static Tape*& current_ptr() {
    static thread_local Tape* cur = nullptr;
    return cur;
  }

  struct Op {
    std::shared_ptr<TensorNode<S>> out;
    std::function<void()> bwd;
  };
  std::vector<Op> ops_;
};

namespace detail {

template <class S>
bool tracking(std::initializer_list<const Tensor<S>*> inputs) {
  if (!Tape<S>::current()) return false;
  for (auto* t : inputs)
    if (t->node()->needs_grad()) return true;
  return false;
}

template <class S>
void mark_and_record(Tensor<S>& out, std::function<void()> bwd) {
  out.node()->on_tape = true;
  Tape<S>::current()->record(out.node(), std::move(bwd));
}

// Sums `src` (laid out as `src_shape`) into `dst` (laid out as `dst_shape`),
// where dst_shape broadcasts to src_shape. Used by binary-op backwards.
template <class S>
void reduce_into(const std::vector<S>& src, const Shape& src_shape,
                 std::vector<S>& dst, const Shape& dst_shape) {
  if (src_shape == dst_shape) {
    for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    return;
  }
  size_t r = src_shape.size();
  auto src_strides = row_major_strides(src_shape);
  std::vector<int64_t> dst_strides(r, 0);
  auto ds = row_major_strides(dst_shape);
  size_t offset = r - dst_shape.size();
  for (size_t i = 0; i < dst_shape.size(); ++i)
    dst_strides[offset + i] = dst_shape[i] == 1 ? 0 : ds[i];
  std::vector<int64_t> idx(r, 0);
  int64_t n = numel_of(src_shape);
  int64_t dpos = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    dst[size_t(dpos)] += src[size_t(flat)];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      dpos += dst_strides[d];
      if (idx[d] < src_shape[d]) break;
      idx[d] = 0;
      dpos -= dst_strides[d] * src_shape[d];
    }
  }
}

template <class S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
          bool ta, bool tb, bool accumulate) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> C(c, m, n);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  };
  using CM = Eigen::Map<const Mat>;
  if (!ta && !tb)
    run(CM(a, m, k), CM(b, k, n));
  else if (!ta && tb)
    run(CM(a, m, k), CM(b, n, k).transpose());
  else if (ta && !tb)
    run(CM(a, k, m).transpose(), CM(b, k, n));
  else
    run(CM(a, k, m).transpose(), CM(b, n, k).transpose());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise ops

// df(x_i, y_i) must return dy/dx at element i.
template <class S, class F, class DF>
Tensor<S> pointwise(const Tensor<S>& x, F f, DF df) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  auto& yv = out.data();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = f(xv[i]);
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on, df]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->value.size(); ++i)
        xn->grad[i] += df(xn->value[i], on->value[i]) * on->grad[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return pointwise(
      x, [](S v) { return S(0.5) * v * S(1.0 + std::erf(double(v) * inv_sqrt2)); },
      [](S v, S) {
        double cdf = 0.5 * (1.0 + std::erf(double(v) * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * double(v));
        return S(cdf + double(v) * pdf);
      });
}

template <class S>
S sigmoid_scalar(S v) {
  if (v >= S(0)) return S(1) / (S(1) + S(std::exp(-double(v))));
  double e = std::exp(double(v));
  return S(e / (1.0 + e));
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return pointwise(
      x, [](S v) { return sigmoid_scalar(v); },
      [](S, S y) { return y * (S(1) - y); });
}

// log(1 + e^x), computed without overflow.
template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  return pointwise(
      x,
      [](S v) {
        return S(std::max(double(v), 0.0) + std::log1p(std::exp(-std::abs(double(v)))));
      },
      [](S v, S) { return sigmoid_scalar(v); });
}

template <class S>
Tensor<S> square(const Tensor<S>& x) {
  return pointwise(x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return pointwise(x, [](S v) { return S(std::sqrt(double(v))); },
                   [](S, S y) { return S(0.5) / y; });
}

template <class S>
Tensor<S> reciprocal(const Tensor<S>& x) {
  return pointwise(x, [](S v) { return S(1) / v; },
                   [](S, S y) { return -y * y; });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return pointwise(x, [](S v) { return S(std::exp(double(v))); },
                   [](S, S y) { return y; });
}

// a*x + b, elementwise with scalars.
template <class S>
Tensor<S> affine(const Tensor<S>& x, S a, S b) {
  return pointwise(x, [a, b](S v) { return a * v + b; },
                   [a](S, S) { return a; });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& x, S a) {
  return affine(x, a, S(0));
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S b) {
  return affine(x, S(1), b);
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return mul_scalar(x, S(-1));
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops

namespace detail {

// Walks the broadcast output space once; fa/fb give per-element input offsets.
template <class S, class Combine>
Tensor<S> binary_broadcast(const Tensor<S>& a, const Tensor<S>& b, Combine comb) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  size_t r = out_shape.size();
  std::vector<int64_t> sa(r, 0), sb(r, 0);
  {
    auto as = row_major_strides(a.shape());
    auto bs = row_major_strides(b.shape());
    size_t oa = r - a.rank(), ob = r - b.rank();
    for (size_t i = 0; i < a.rank(); ++i)
      sa[oa + i] = a.shape()[i] == 1 ? 0 : as[i];
    for (size_t i = 0; i < b.rank(); ++i)
      sb[ob + i] = b.shape()[i] == 1 ? 0 : bs[i];
  }
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  int64_t n = numel_of(out_shape);
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (int64_t i = 0; i < n; ++i)
      ov[size_t(i)] = comb(av[size_t(i)], bv[size_t(i)]);
    return out;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t pa = 0, pb = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    ov[size_t(flat)] = comb(av[size_t(pa)], bv[size_t(pb)]);
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      pa += sa[d];
      pb += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      pa -= sa[d] * out_shape[d];
      pb -= sb[d] * out_shape[d];
    }
  }
  return out;
}

// Multiplies grad_out by `factor` (already broadcast-shaped) and reduces the
// product into the grad of `target`.
template <class S>
void accumulate_mul_reduced(const std::vector<S>& grad_out,
                            const Shape& out_shape,
                            const std::vector<S>* factor,
                            const Shape* factor_shape,
                            TensorNode<S>& target) {
  target.ensure_grad();
  if (!factor) {
    reduce_into(grad_out, out_shape, target.grad, target.shape);
    return;
  }
  // factor indexed with broadcast strides over the out space
  size_t r = out_shape.size();
  std::vector<int64_t> sf(r, 0);
  auto fs = row_major_strides(*factor_shape);
  size_t of = r - factor_shape->size();
  for (size_t i = 0; i < factor_shape->size(); ++i)
    sf[of + i] = (*factor_shape)[i] == 1 ? 0 : fs[i];
  std::vector<S> prod(grad_out.size());
  std::vector<int64_t> idx(r, 0);
  int64_t pf = 0;
  for (int64_t flat = 0; flat < int64_t(grad_out.size()); ++flat) {
    prod[size_t(flat)] = grad_out[size_t(flat)] * (*factor)[size_t(pf)];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      pf += sf[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      pf -= sf[d] * out_shape[d];
    }
  }
  reduce_into(prod, out_shape, target.grad, target.shape);
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::binary_broadcast(a, b, [](S x, S y) { return x + y; });
  if (detail::tracking<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::mark_and_record(out, [an, bn, on]() {
      if (an->needs_grad())
        detail::accumulate_mul_reduced<S>(on->grad, on->shape, nullptr, nullptr, *an);
      if (bn->needs_grad())
        detail::accumulate_mul_reduced<S>(on->grad, on->shape, nullptr, nullptr, *bn);
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::binary_broadcast(a, b, [](S x, S y) { return x - y; });
  if (detail::tracking<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::mark_and_record(out, [an, bn, on]() {
      if (an->needs_grad())
        detail::accumulate_mul_reduced<S>(on->grad, on->shape, nullptr, nullptr, *an);
      if (bn->needs_grad()) {
        std::vector<S> neg(on->grad.size());
        for (size_t i = 0; i < neg.size(); ++i) neg[i] = -on->grad[i];
        detail::accumulate_mul_reduced<S>(neg, on->shape, nullptr, nullptr, *bn);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::binary_broadcast(a, b, [](S x, S y) { return x * y; });
  if (detail::tracking<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::mark_and_record(out, [an, bn, on]() {
      if (an->needs_grad())
        detail::accumulate_mul_reduced<S>(on->grad, on->shape, &bn->value,
                                          &bn->shape, *an);
      if (bn->needs_grad())
        detail::accumulate_mul_reduced<S>(on->grad, on->shape, &an->value,
                                          &an->shape, *bn);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  // one -1 dimension is inferred
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 dimension");
      infer = int64_t(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw ShapeError(detail::str("reshape: cannot infer dimension for ",
                                   shape_str(x.shape()), " -> ",
                                   shape_str(new_shape)));
    new_shape[size_t(infer)] = x.numel() / known;
  }
  if (numel_of(new_shape) != x.numel())
    throw ShapeError(detail::str("reshape: ", shape_str(x.shape()), " -> ",
                                 shape_str(new_shape), " changes element count"));
  Tensor<S> out = Tensor<S>::from(std::move(new_shape), x.data());
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x, std::vector<int64_t> perm) {
  size_t r = x.rank();
  if (perm.size() != r)
    throw ShapeError(detail::str("transpose: perm size ", perm.size(),
                                 " does not match rank ", r));
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[size_t(perm[i])];
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  auto in_strides = row_major_strides(x.shape());
  std::vector<int64_t> gather(r);
  for (size_t i = 0; i < r; ++i) gather[i] = in_strides[size_t(perm[i])];
  const auto& xv = x.data();
  auto& ov = out.data();
  std::vector<int64_t> idx(r, 0);
  int64_t src = 0;
  int64_t n = x.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    ov[size_t(flat)] = xv[size_t(src)];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      src += gather[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      src -= gather[d] * out_shape[d];
    }
  }
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    auto gs = gather;
    auto osh = out_shape;
    detail::mark_and_record(out, [xn, on, gs, osh]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      size_t r = osh.size();
      std::vector<int64_t> idx(r, 0);
      int64_t src = 0;
      for (int64_t flat = 0; flat < int64_t(on->grad.size()); ++flat) {
        xn->grad[size_t(src)] += on->grad[size_t(flat)];
        for (size_t d = r; d-- > 0;) {
          idx[d]++;
          src += gs[d];
          if (idx[d] < osh[d]) break;
          idx[d] = 0;
          src -= gs[d] * osh[d];
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  size_t r = parts[0].rank();
  if (axis < 0) axis += int64_t(r);
  if (axis < 0 || size_t(axis) >= r)
    throw ShapeError(detail::str("concat: invalid axis ", axis));
  Shape out_shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < r; ++i)
      if (int64_t(i) != axis && p.shape()[i] != out_shape[i])
        throw ShapeError(detail::str("concat: shape mismatch ",
                                     shape_str(p.shape()), " vs ",
                                     shape_str(out_shape)));
    total += p.shape()[size_t(axis)];
  }
  out_shape[size_t(axis)] = total;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[size_t(i)];
  for (size_t i = size_t(axis) + 1; i < r; ++i) inner *= out_shape[i];
  auto& ov = out.data();
  int64_t axis_off = 0;
  for (const auto& p : parts) {
    int64_t len = p.shape()[size_t(axis)];
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < len; ++j)
        std::copy_n(pv.begin() + (o * len + j) * inner, inner,
                    ov.begin() + (o * total + axis_off + j) * inner);
    axis_off += len;
  }
  bool track = false;
  {
    std::vector<const Tensor<S>*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    if (Tape<S>::current())
      for (auto* t : ptrs)
        if (t->node()->needs_grad()) track = true;
  }
  if (track) {
    std::vector<std::shared_ptr<TensorNode<S>>> nodes;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      lens.push_back(p.shape()[size_t(axis)]);
    }
    auto on = out.node();
    detail::mark_and_record(out, [nodes, lens, on, outer, inner, total]() {
      int64_t axis_off = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& n = nodes[pi];
        int64_t len = lens[pi];
        if (n->needs_grad()) {
          n->ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < len; ++j) {
              auto src = on->grad.begin() + (o * total + axis_off + j) * inner;
              auto dst = n->grad.begin() + (o * len + j) * inner;
              for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
        axis_off += len;
      }
    });
  }
  return out;
}

// Contiguous [start, end) range along one axis.
template <class S>
Tensor<S> slice(const Tensor<S>& x, int64_t axis, int64_t start, int64_t end) {
  size_t r = x.rank();
  if (axis < 0) axis += int64_t(r);
  if (axis < 0 || size_t(axis) >= r)
    throw ShapeError(detail::str("slice: invalid axis ", axis));
  int64_t len = x.shape()[size_t(axis)];
  if (start < 0 || end > len || start > end)
    throw ShapeError(detail::str("slice: range [", start, ",", end,
                                 ") out of bounds for axis size ", len));
  Shape out_shape = x.shape();
  out_shape[size_t(axis)] = end - start;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.shape()[size_t(i)];
  for (size_t i = size_t(axis) + 1; i < r; ++i) inner *= x.shape()[i];
  int64_t span = end - start;
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * len + start) * inner, span * inner,
                ov.begin() + o * span * inner);
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on, outer, inner, len, start, span]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        auto src = on->grad.begin() + o * span * inner;
        auto dst = xn->grad.begin() + (o * len + start) * inner;
        for (int64_t i = 0; i < span * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.data()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      S g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  return mul_scalar(sum(x), S(1) / S(x.numel()));
}

namespace detail {

inline void axis_extents(const Shape& shape, int64_t axis, int64_t* outer,
                         int64_t* mid, int64_t* inner) {
  *outer = 1;
  *inner = 1;
  for (int64_t i = 0; i < axis; ++i) *outer *= shape[size_t(i)];
  *mid = shape[size_t(axis)];
  for (size_t i = size_t(axis) + 1; i < shape.size(); ++i) *inner *= shape[i];
}

inline int64_t checked_axis(const Shape& shape, int64_t axis) {
  int64_t r = int64_t(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError(detail::str("invalid axis ", axis, " for shape ",
                                 shape_str(shape)));
  return axis;
}

}  // namespace detail

template <class S>
Tensor<S> sum(const Tensor<S>& x, int64_t axis, bool keepdim = false) {
  axis = detail::checked_axis(x.shape(), axis);
  int64_t outer, mid, inner;
  detail::axis_extents(x.shape(), axis, &outer, &mid, &inner);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[size_t(axis)] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < mid; ++j)
      for (int64_t i = 0; i < inner; ++i)
        ov[size_t(o * inner + i)] += xv[size_t((o * mid + j) * inner + i)];
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on, outer, mid, inner]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < mid; ++j)
          for (int64_t i = 0; i < inner; ++i)
            xn->grad[size_t((o * mid + j) * inner + i)] +=
                on->grad[size_t(o * inner + i)];
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x, int64_t axis, bool keepdim = false) {
  int64_t ax = detail::checked_axis(x.shape(), axis);
  return mul_scalar(sum(x, axis, keepdim), S(1) / S(x.shape()[size_t(ax)]));
}

// Max along an axis; gradient routes to the first maximal index in scan order.
template <class S>
Tensor<S> max(const Tensor<S>& x, int64_t axis, bool keepdim = false) {
  axis = detail::checked_axis(x.shape(), axis);
  int64_t outer, mid, inner;
  detail::axis_extents(x.shape(), axis, &outer, &mid, &inner);
  if (mid == 0) throw ShapeError("max: empty reduction axis");
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[size_t(axis)] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  auto arg = std::make_shared<std::vector<int64_t>>(size_t(outer * inner));
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      S best = xv[size_t(o * mid * inner + i)];
      int64_t bj = 0;
      for (int64_t j = 1; j < mid; ++j) {
        S v = xv[size_t((o * mid + j) * inner + i)];
        if (v > best) {
          best = v;
          bj = j;
        }
      }
      ov[size_t(o * inner + i)] = best;
      (*arg)[size_t(o * inner + i)] = bj;
    }
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on, arg, outer, mid, inner]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          int64_t bj = (*arg)[size_t(o * inner + i)];
          xn->grad[size_t((o * mid + bj) * inner + i)] +=
              on->grad[size_t(o * inner + i)];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int64_t axis) {
  axis = detail::checked_axis(x.shape(), axis);
  int64_t outer, mid, inner;
  detail::axis_extents(x.shape(), axis, &outer, &mid, &inner);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  auto& yv = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      S m = xv[size_t(o * mid * inner + i)];
      for (int64_t j = 1; j < mid; ++j)
        m = std::max(m, xv[size_t((o * mid + j) * inner + i)]);
      S z = 0;
      for (int64_t j = 0; j < mid; ++j) {
        S e = S(std::exp(double(xv[size_t((o * mid + j) * inner + i)] - m)));
        yv[size_t((o * mid + j) * inner + i)] = e;
        z += e;
      }
      S invz = S(1) / z;
      for (int64_t j = 0; j < mid; ++j)
        yv[size_t((o * mid + j) * inner + i)] *= invz;
    }
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on, outer, mid, inner]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          S dot = 0;
          for (int64_t j = 0; j < mid; ++j) {
            size_t k = size_t((o * mid + j) * inner + i);
            dot += on->grad[k] * on->value[k];
          }
          for (int64_t j = 0; j < mid; ++j) {
            size_t k = size_t((o * mid + j) * inner + i);
            xn->grad[k] += on->value[k] * (on->grad[k] - dot);
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matmul

// Batched matrix product with broadcastable leading dimensions.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b,
                 bool transpose_a = false, bool transpose_b = false) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError(detail::str("matmul: inputs must have rank >= 2, got ",
                                 shape_str(a.shape()), " and ",
                                 shape_str(b.shape())));
  int64_t am = a.shape()[a.rank() - 2], ak = a.shape()[a.rank() - 1];
  if (transpose_a) std::swap(am, ak);
  int64_t bk = b.shape()[b.rank() - 2], bn = b.shape()[b.rank() - 1];
  if (transpose_b) std::swap(bk, bn);
  if (ak != bk)
    throw ShapeError(detail::str("matmul: inner dimensions disagree: ",
                                 shape_str(a.shape()),
                                 (transpose_a ? " (transposed)" : ""), " x ",
                                 shape_str(b.shape()),
                                 (transpose_b ? " (transposed)" : "")));
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(a_batch, b_batch);
  Shape out_shape = batch;
  out_shape.push_back(am);
  out_shape.push_back(bn);
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t nbatch = numel_of(batch);
  int64_t a_mat = am * ak, b_mat = bk * bn, o_mat = am * bn;
  // flat batch index -> slice offsets, honoring broadcasting
  size_t br = batch.size();
  std::vector<int64_t> sa(br, 0), sb(br, 0);
  {
    auto as = row_major_strides(a_batch);
    auto bs = row_major_strides(b_batch);
    size_t oa = br - a_batch.size(), ob = br - b_batch.size();
    for (size_t i = 0; i < a_batch.size(); ++i)
      sa[oa + i] = a_batch[i] == 1 ? 0 : as[i];
    for (size_t i = 0; i < b_batch.size(); ++i)
      sb[ob + i] = b_batch[i] == 1 ? 0 : bs[i];
  }
  auto slice_offsets = [&](int64_t flat, int64_t* pa, int64_t* pb) {
    int64_t ia = 0, ib = 0;
    for (size_t d = br; d-- > 0;) {
      int64_t q = flat % batch[d];
      flat /= batch[d];
      ia += q * sa[d];
      ib += q * sb[d];
    }
    *pa = ia;
    *pb = ib;
  };
  const S* ap = a.data().data();
  const S* bp = b.data().data();
  S* op = out.data().data();
  for (int64_t i = 0; i < nbatch; ++i) {
    int64_t pa, pb;
    slice_offsets(i, &pa, &pb);
    detail::gemm(ap + pa * a_mat, bp + pb * b_mat, op + i * o_mat, am, ak, bn,
                 transpose_a, transpose_b, false);
  }

  if (detail::tracking<S>({&a, &b})) {
    auto an = a.node(), bn_ = b.node(), on = out.node();
    auto batch_copy = batch;
    detail::mark_and_record(out, [an, bn_, on, batch_copy, sa, sb, am, ak, bn,
                                  a_mat, b_mat, o_mat, transpose_a,
                                  transpose_b]() {
      int64_t nbatch = numel_of(batch_copy);
      size_t br = batch_copy.size();
      auto offsets = [&](int64_t flat, int64_t* pa, int64_t* pb) {
        int64_t ia = 0, ib = 0;
        for (size_t d = br; d-- > 0;) {
          int64_t q = flat % batch_copy[d];
          flat /= batch_copy[d];
          ia += q * sa[d];
          ib += q * sb[d];
        }
        *pa = ia;
        *pb = ib;
      };
      if (an->needs_grad()) an->ensure_grad();
      if (bn_->needs_grad()) bn_->ensure_grad();
      for (int64_t i = 0; i < nbatch; ++i) {
        int64_t pa, pb;
        offsets(i, &pa, &pb);
        const S* go = on->grad.data() + i * o_mat;
        const S* av = an->value.data() + pa * a_mat;
        const S* bv = bn_->value.data() + pb * b_mat;
        if (an->needs_grad()) {
          S* ga = an->grad.data() + pa * a_mat;
          // dA for each of the four transpose combinations
          if (!transpose_a && !transpose_b)
            detail::gemm(go, bv, ga, am, bn, ak, false, true, true);
          else if (!transpose_a && transpose_b)
            detail::gemm(go, bv, ga, am, bn, ak, false, false, true);
          else if (transpose_a && !transpose_b)
            detail::gemm(bv, go, ga, ak, bn, am, false, true, true);
          else
            detail::gemm(bv, go, ga, ak, bn, am, true, true, true);
        }
        if (bn_->needs_grad()) {
          S* gb = bn_->grad.data() + pb * b_mat;
          if (!transpose_a && !transpose_b)
            detail::gemm(av, go, gb, ak, am, bn, true, false, true);
          else if (!transpose_a && transpose_b)
            detail::gemm(go, av, gb, bn, am, ak, true, false, true);
          else if (transpose_a && !transpose_b)
            detail::gemm(av, go, gb, ak, am, bn, false, false, true);
          else
            detail::gemm(go, av, gb, bn, am, ak, true, true, true);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

// Cross-correlation over (time, frequency). x: [T,F,Cin] or [B,T,F,Cin],
// w: [kt,kf,Cin,Cout]. Output size must be integral.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w,
                 std::pair<int64_t, int64_t> stride,
                 std::pair<int64_t, int64_t> padding) {
  bool batched = x.rank() == 4;
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError(detail::str("conv2d: input must be [T,F,C] or [B,T,F,C], got ",
                                 shape_str(x.shape())));
  if (w.rank() != 4)
    throw ShapeError(detail::str("conv2d: weight must be [kt,kf,Cin,Cout], got ",
                                 shape_str(w.shape())));
  int64_t B = batched ? x.shape()[0] : 1;
  int64_t T = x.shape()[batched ? 1 : 0];
  int64_t F = x.shape()[batched ? 2 : 1];
  int64_t Cin = x.shape()[batched ? 3 : 2];
  int64_t kt = w.shape()[0], kf = w.shape()[1];
  int64_t wcin = w.shape()[2], Cout = w.shape()[3];
  auto [st, sf] = stride;
  auto [pt, pf] = padding;
  if (st < 1 || sf < 1) throw ConfigError("conv2d: strides must be >= 1");
  if (wcin != Cin)
    throw ShapeError(detail::str("conv2d: input channels ", Cin,
                                 " do not match kernel channels ", wcin));
  if (T + 2 * pt < kt || F + 2 * pf < kf)
    throw ShapeError(detail::str("conv2d: kernel ", kt, "x", kf,
                                 " does not fit padded input ", T + 2 * pt, "x",
                                 F + 2 * pf));
  if ((T + 2 * pt - kt) % st != 0 || (F + 2 * pf - kf) % sf != 0)
    throw ShapeError(detail::str("conv2d: non-integral output size for input ",
                                 shape_str(x.shape()), ", kernel ", kt, "x", kf,
                                 ", stride (", st, ",", sf, "), padding (", pt,
                                 ",", pf, ")"));
  int64_t To = (T + 2 * pt - kt) / st + 1;
  int64_t Fo = (F + 2 * pf - kf) / sf + 1;
  Shape out_shape = batched ? Shape{B, To, Fo, Cout} : Shape{To, Fo, Cout};
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  int64_t patch = kt * kf * Cin;
  auto im2col = [=](const S* xb, S* cols) {
    // cols: [To*Fo, patch]
    for (int64_t to = 0; to < To; ++to)
      for (int64_t fo = 0; fo < Fo; ++fo) {
        S* row = cols + (to * Fo + fo) * patch;
        int64_t p = 0;
        for (int64_t dt = 0; dt < kt; ++dt) {
          int64_t t = to * st - pt + dt;
          for (int64_t df = 0; df < kf; ++df) {
            int64_t f = fo * sf - pf + df;
            if (t >= 0 && t < T && f >= 0 && f < F) {
              const S* src = xb + (t * F + f) * Cin;
              for (int64_t c = 0; c < Cin; ++c) row[p++] = src[c];
            } else {
              for (int64_t c = 0; c < Cin; ++c) row[p++] = S(0);
            }
          }
        }
      }
  };

  {
    std::vector<S> cols(size_t(To * Fo * patch));
    const S* xp = x.data().data();
    S* op = out.data().data();
    for (int64_t b = 0; b < B; ++b) {
      im2col(xp + b * T * F * Cin, cols.data());
      detail::gemm(cols.data(), w.data().data(), op + b * To * Fo * Cout,
                   To * Fo, patch, Cout, false, false, false);
    }
  }

  if (detail::tracking<S>({&x, &w})) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    detail::mark_and_record(out, [xn, wn, on, im2col, B, T, F, Cin, To, Fo,
                                  Cout, kt, kf, st, sf, pt, pf, patch]() {
      std::vector<S> cols(size_t(To * Fo * patch));
      std::vector<S> dcols(size_t(To * Fo * patch));
      if (xn->needs_grad()) xn->ensure_grad();
      if (wn->needs_grad()) wn->ensure_grad();
      for (int64_t b = 0; b < B; ++b) {
        const S* go = on->grad.data() + b * To * Fo * Cout;
        if (wn->needs_grad()) {
          im2col(xn->value.data() + b * T * F * Cin, cols.data());
          detail::gemm(cols.data(), go, wn->grad.data(), patch, To * Fo, Cout,
                       true, false, true);
        }
        if (xn->needs_grad()) {
          detail::gemm(go, wn->value.data(), dcols.data(), To * Fo, Cout, patch,
                       false, true, false);
          S* gx = xn->grad.data() + b * T * F * Cin;
          for (int64_t to = 0; to < To; ++to)
            for (int64_t fo = 0; fo < Fo; ++fo) {
              const S* row = dcols.data() + (to * Fo + fo) * patch;
              int64_t p = 0;
              for (int64_t dt = 0; dt < kt; ++dt) {
                int64_t t = to * st - pt + dt;
                for (int64_t df = 0; df < kf; ++df) {
                  int64_t f = fo * sf - pf + df;
                  if (t >= 0 && t < T && f >= 0 && f < F) {
                    S* dst = gx + (t * F + f) * Cin;
                    for (int64_t c = 0; c < Cin; ++c) dst[c] += row[p++];
                  } else {
                    p += Cin;
                  }
                }
              }
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

// Normalizes over every axis except `stat_axis`, which indexes the
// independent statistics. Training mode uses batch statistics (population
// variance) and updates the running buffers in place; eval mode uses the
// running buffers. gamma/beta are the learnable scale/shift.
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, Tensor<S>& running_mean,
                     Tensor<S>& running_var, int64_t stat_axis, bool training,
                     double momentum = 0.1, double eps = 1e-5) {
  stat_axis = detail::checked_axis(x.shape(), stat_axis);
  int64_t outer, mid, inner;
  detail::axis_extents(x.shape(), stat_axis, &outer, &mid, &inner);
  int64_t n = outer * inner;
  if (n == 0 || mid == 0)
    throw ShapeError(detail::str("batch_norm: empty input ", shape_str(x.shape())));
  if (gamma.numel() != mid || beta.numel() != mid ||
      running_mean.numel() != mid || running_var.numel() != mid)
    throw ShapeError(detail::str("batch_norm: parameter size must equal axis size ",
                                 mid));

  std::vector<S> use_mean(static_cast<size_t>(mid));
  std::vector<S> use_inv_std(static_cast<size_t>(mid));
  const auto& xv = x.data();
  if (training) {
    for (int64_t j = 0; j < mid; ++j) {
      double m = 0;
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i)
          m += double(xv[size_t((o * mid + j) * inner + i)]);
      m /= double(n);
      double var = 0;
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          double d = double(xv[size_t((o * mid + j) * inner + i)]) - m;
          var += d * d;
        }
      var /= double(n);
      use_mean[size_t(j)] = S(m);
      use_inv_std[size_t(j)] = S(1.0 / std::sqrt(var + eps));
      running_mean.data()[size_t(j)] =
          S((1.0 - momentum) * double(running_mean.data()[size_t(j)]) + momentum * m);
      running_var.data()[size_t(j)] =
          S((1.0 - momentum) * double(running_var.data()[size_t(j)]) + momentum * var);
    }
  } else {
    for (int64_t j = 0; j < mid; ++j) {
      use_mean[size_t(j)] = running_mean.data()[size_t(j)];
      use_inv_std[size_t(j)] =
          S(1.0 / std::sqrt(double(running_var.data()[size_t(j)]) + eps));
    }
  }

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(xv.size());
  auto& yv = out.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < mid; ++j)
      for (int64_t i = 0; i < inner; ++i) {
        size_t k = size_t((o * mid + j) * inner + i);
        S h = (xv[k] - use_mean[size_t(j)]) * use_inv_std[size_t(j)];
        (*xhat)[k] = h;
        yv[k] = gv[size_t(j)] * h + bv[size_t(j)];
      }

  if (detail::tracking<S>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    auto inv_std = std::make_shared<std::vector<S>>(use_inv_std);
    detail::mark_and_record(out, [xn, gn, bn, on, xhat, inv_std, outer, mid,
                                  inner, n, training]() {
      if (gn->needs_grad()) gn->ensure_grad();
      if (bn->needs_grad()) bn->ensure_grad();
      if (xn->needs_grad()) xn->ensure_grad();
      for (int64_t j = 0; j < mid; ++j) {
        double dg = 0, db = 0;
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < inner; ++i) {
            size_t k = size_t((o * mid + j) * inner + i);
            dg += double(on->grad[k]) * double((*xhat)[k]);
            db += double(on->grad[k]);
          }
        if (gn->needs_grad()) gn->grad[size_t(j)] += S(dg);
        if (bn->needs_grad()) bn->grad[size_t(j)] += S(db);
        if (xn->needs_grad()) {
          S g = gn->value[size_t(j)];
          S istd = (*inv_std)[size_t(j)];
          if (training) {
            // dx = g*istd*(dy - mean(dy) - xhat*mean(dy*xhat))
            S mean_dy = S(db / double(n));
            S mean_dyxhat = S(dg / double(n));
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t i = 0; i < inner; ++i) {
                size_t k = size_t((o * mid + j) * inner + i);
                xn->grad[k] += g * istd *
                               (on->grad[k] - mean_dy - (*xhat)[k] * mean_dyxhat);
              }
          } else {
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t i = 0; i < inner; ++i) {
                size_t k = size_t((o * mid + j) * inner + i);
                xn->grad[k] += g * istd * on->grad[k];
              }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Max pooling over one axis, stride 1, same length

// Window k must be odd; edges are clipped (equivalent to -inf padding).
// Gradient routes to the first maximal index in scan order.
template <class S>
Tensor<S> max_pool_1d(const Tensor<S>& x, int64_t k, int64_t axis = -1) {
  if (k < 1 || k % 2 == 0)
    throw ConfigError(detail::str("max_pool_1d: window must be odd, got ", k));
  axis = detail::checked_axis(x.shape(), axis);
  int64_t outer, mid, inner;
  detail::axis_extents(x.shape(), axis, &outer, &mid, &inner);
  int64_t half = (k - 1) / 2;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto arg = std::make_shared<std::vector<int64_t>>(x.data().size());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i)
      for (int64_t t = 0; t < mid; ++t) {
        int64_t lo = std::max<int64_t>(0, t - half);
        int64_t hi = std::min<int64_t>(mid - 1, t + half);
        S best = xv[size_t((o * mid + lo) * inner + i)];
        int64_t bj = lo;
        for (int64_t j = lo + 1; j <= hi; ++j) {
          S v = xv[size_t((o * mid + j) * inner + i)];
          if (v > best) {
            best = v;
            bj = j;
          }
        }
        size_t kk = size_t((o * mid + t) * inner + i);
        ov[kk] = best;
        (*arg)[kk] = bj;
      }
  if (detail::tracking<S>({&x})) {
    auto xn = x.node();
    auto on = out.node();
    detail::mark_and_record(out, [xn, on, arg, outer, mid, inner]() {
      if (!xn->needs_grad()) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i)
          for (int64_t t = 0; t < mid; ++t) {
            size_t kk = size_t((o * mid + t) * inner + i);
            int64_t bj = (*arg)[kk];
            xn->grad[size_t((o * mid + bj) * inner + i)] += on->grad[kk];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int64_t worst_index = -1;
  int64_t checked = 0;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// Central finite differences against the tape gradient of a scalar-valued
// function. Checks all coordinates of x, or a seeded random subset when
// max_coords is smaller than numel. Reports, never throws.
template <class S, class F>
GradCheckReport grad_check(F f, Tensor<S>& x, double eps = 1e-4,
                           int64_t max_coords = -1, uint64_t seed = 12345) {
  bool prev = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<S> analytic;
  {
    Tape<S> tape;
    typename Tape<S>::Scope scope(tape);
    Tensor<S> loss = f();
    tape.backward(loss);
    analytic = x.grad().empty() ? std::vector<S>(x.data().size(), S(0)) : x.grad();
  }
  std::vector<int64_t> coords;
  int64_t n = x.numel();
  if (max_coords < 0 || max_coords >= n) {
    coords.resize(size_t(n));
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    Rng rng(seed);
    for (int64_t i = 0; i < max_coords; ++i)
      coords.push_back(rng.uniform_int(0, n - 1));
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  }
  GradCheckReport rep;
  for (int64_t c : coords) {
    S orig = x.data()[size_t(c)];
    x.data()[size_t(c)] = orig + S(eps);
    double fp = double(f().item());
    x.data()[size_t(c)] = orig - S(eps);
    double fm = double(f().item());
    x.data()[size_t(c)] = orig;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = double(analytic[size_t(c)]);
    double abs_err = std::abs(a - numeric);
    double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    double rel = abs_err / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = c;
    }
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    rep.checked++;
  }
  x.set_requires_grad(prev);
  return rep;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace beatkit

#endif  // BEATKIT_TENSOR_HPP
