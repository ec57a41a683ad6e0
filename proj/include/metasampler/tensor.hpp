#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metasampler/errors.hpp"

// Dense f64 tensors with a reverse-mode tape. Every backward rule is written
// in terms of the tape ops themselves, so running backward with the graph
// kept alive yields a differentiable gradient (double backward works for the
// whole vocabulary, which the meta-update path relies on).

#ifndef MSAMP_CHECK_FINITE
#ifndef NDEBUG
#define MSAMP_CHECK_FINITE 1
#else
#define MSAMP_CHECK_FINITE 0
#endif
#endif

namespace msamp {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool leaf = true;
  std::shared_ptr<TensorImpl> grad;  // set by backward()
  Tape* tape = nullptr;              // tape that recorded this value, if any
  std::int64_t node_index = -1;      // index of the producing node on `tape`
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw ContractViolation("tensor: data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({v}, Shape{}, requires_grad);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = static_cast<std::size_t>(numel_of(shape));
    return from(std::vector<double>(n, v), std::move(shape));
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t numel() const { return numel_of(impl_->shape); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }

  // Marks a value tensor as a learnable leaf.
  Tensor& set_requires_grad(bool v = true) {
    impl_->requires_grad = v;
    return *this;
  }

  double item() const {
    if (numel() != 1)
      throw ContractViolation("item: tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
  }

  double at(std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double at(std::int64_t r, std::int64_t c) const {
    return impl_->data[static_cast<std::size_t>(r * impl_->shape[1] + c)];
  }

  Tensor grad() const { return impl_->grad ? Tensor(impl_->grad) : Tensor(); }
  void zero_grad() { impl_->grad = nullptr; }
  void set_grad(const Tensor& g) { impl_->grad = g.impl_; }

  // Value copy with no graph history; a fresh leaf.
  Tensor clone_detached() const {
    auto t = from(impl_->data, impl_->shape, impl_->requires_grad);
    return t;
  }

  // Same storage semantics as clone_detached but never a gradient target.
  Tensor constant_copy() const { return from(impl_->data, impl_->shape, false); }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  TensorImpl* raw() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Given the node's output and its upstream adjoint, produce the adjoint for
// each input (undefined Tensor where no gradient flows).
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& out, const Tensor& grad_out)>;

struct TapeNode {
  std::shared_ptr<TensorImpl> out;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  const char* op = "";
};

class Tape {
 public:
  std::vector<TapeNode> nodes;
  std::size_t size() const { return nodes.size(); }
};

namespace detail {

inline Tape*& active_tape() {
  thread_local Tape* t = nullptr;
  return t;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Installs a fresh tape for the current thread; training steps scope one.
class TapeScope {
 public:
  TapeScope() : prev_(detail::active_tape()) { detail::active_tape() = &tape_; }
  ~TapeScope() { detail::active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradScope() { detail::grad_mode() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : prev_(detail::grad_mode()) {
    detail::grad_mode() = enabled;
  }
  ~GradModeScope() { detail::grad_mode() = prev_; }

 private:
  bool prev_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
#if MSAMP_CHECK_FINITE
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericAbort(std::string("non-finite value produced by op '") + op + "'");
#else
  (void)op;
  (void)v;
#endif
}

inline Tensor make_result(const char* op, std::vector<double> data, Shape shape,
                          std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(op, data);
  Tensor out = Tensor::from(std::move(data), std::move(shape));
  bool needs = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) needs = true;
  Tape* tape = active_tape();
  if (needs && grad_mode() && tape) {
    out.impl()->requires_grad = true;
    out.impl()->leaf = false;
    out.impl()->tape = tape;
    out.impl()->node_index = static_cast<std::int64_t>(tape->nodes.size());
    TapeNode node;
    node.out = out.impl();
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.impl());
    node.backward = std::move(backward);
    node.op = op;
    tape->nodes.push_back(std::move(node));
  }
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor mul_scalar(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, const Tensor& s);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t len);
Tensor embed(const Tensor& x, int axis, std::int64_t start, std::int64_t full_len);
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
Tensor scatter_add_rows(const Tensor& g, const std::vector<std::int64_t>& idx, std::int64_t n);
Tensor scatter_flat(const Tensor& g, const std::vector<std::int64_t>& pos, std::int64_t n);
Tensor reduce_sum(const Tensor& x, int axis);
Tensor reduce_mean(const Tensor& x, int axis);
Tensor reduce_max(const Tensor& x, int axis, std::vector<std::int64_t>* argout = nullptr);
Tensor reduce_min(const Tensor& x, int axis, std::vector<std::int64_t>* argout = nullptr);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor max_all(const Tensor& x, std::int64_t* argout = nullptr);
Tensor min_all(const Tensor& x, std::int64_t* argout = nullptr);
Tensor softmax(const Tensor& x);
Tensor pairwise_dist2(const Tensor& a, const Tensor& b);
Tensor expand_rows(const Tensor& v, std::int64_t r);
Tensor expand_cols(const Tensor& v, std::int64_t c);

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return detail::make_result("add", std::move(out), a.shape(), {a, b},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{g, g};
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return detail::make_result("sub", std::move(out), a.shape(), {a, b},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{g, neg(g)};
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return detail::make_result("mul", std::move(out), a.shape(), {a, b},
                             [a, b](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul(g, b), mul(g, a)};
                             });
}

inline Tensor neg(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = -v;
  return detail::make_result("neg", std::move(out), x.shape(), {x},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{neg(g)};
                             });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (auto& v : out) v *= c;
  return detail::make_result("mul_scalar", std::move(out), x.shape(), {x},
                             [c](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul_scalar(g, c)};
                             });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (auto& v : out) v += c;
  return detail::make_result("add_scalar", std::move(out), x.shape(), {x},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{g};
                             });
}

// Broadcast multiply by a one-element tensor (the only broadcast supported).
inline Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1)
    throw ContractViolation("scale: scale factor must have one element, got " +
                            shape_str(s.shape()));
  const double sv = s.data()[0];
  std::vector<double> out(x.data());
  for (auto& v : out) v *= sv;
  return detail::make_result(
      "scale", std::move(out), x.shape(), {x, s},
      [x, s](const Tensor&, const Tensor& g) {
        Tensor gx = scale(g, s);
        Tensor gs = reshape(sum_all(mul(g, x)), s.shape());
        return std::vector<Tensor>{gx, gs};
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data());
  std::vector<double> mask(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = out[i] > 0.0 ? 1.0 : 0.0;
    if (out[i] < 0.0) out[i] = 0.0;
  }
  Tensor mask_t = Tensor::from(std::move(mask), x.shape());
  return detail::make_result("relu", std::move(out), x.shape(), {x},
                             [mask_t](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul(g, mask_t)};
                             });
}

inline Tensor exp(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::exp(v);
  return detail::make_result("exp", std::move(out), x.shape(), {x},
                             [](const Tensor& out_t, const Tensor& g) {
                               return std::vector<Tensor>{mul(g, out_t)};
                             });
}

inline Tensor log(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::log(v);
  return detail::make_result("log", std::move(out), x.shape(), {x},
                             [x](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul(g, reciprocal(x))};
                             });
}

inline Tensor square(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v *= v;
  return detail::make_result("square", std::move(out), x.shape(), {x},
                             [x](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul_scalar(mul(g, x), 2.0)};
                             });
}

inline Tensor sqrt(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::sqrt(v);
  return detail::make_result(
      "sqrt", std::move(out), x.shape(), {x},
      [](const Tensor& out_t, const Tensor& g) {
        return std::vector<Tensor>{mul_scalar(mul(g, reciprocal(out_t)), 0.5)};
      });
}

inline Tensor reciprocal(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = 1.0 / v;
  return detail::make_result(
      "reciprocal", std::move(out), x.shape(), {x},
      [](const Tensor& out_t, const Tensor& g) {
        return std::vector<Tensor>{neg(mul(g, square(out_t)))};
      });
}

inline Tensor sin(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::sin(v);
  return detail::make_result("sin", std::move(out), x.shape(), {x},
                             [x](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul(g, cos(x))};
                             });
}

inline Tensor cos(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::cos(v);
  return detail::make_result("cos", std::move(out), x.shape(), {x},
                             [x](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{neg(mul(g, sin(x)))};
                             });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return detail::make_result(
      "sigmoid", std::move(out), x.shape(), {x},
      [](const Tensor& out_t, const Tensor& g) {
        Tensor one_minus = add_scalar(neg(out_t), 1.0);
        return std::vector<Tensor>{mul(mul(g, out_t), one_minus)};
      });
}

// Identity inside [lo, hi], constant outside (zero subgradient there).
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.data());
  std::vector<double> mask(out.size(), 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] < lo) {
      out[i] = lo;
      mask[i] = 0.0;
    } else if (out[i] > hi) {
      out[i] = hi;
      mask[i] = 0.0;
    }
  }
  Tensor mask_t = Tensor::from(std::move(mask), x.shape());
  return detail::make_result("clamp", std::move(out), x.shape(), {x},
                             [mask_t](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{mul(g, mask_t)};
                             });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ContractViolation("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  const std::int64_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c), 0.0);
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t t = 0; t < k; ++t) {
      const double av = a.data()[static_cast<std::size_t>(i * k + t)];
      if (av == 0.0) continue;
      const double* brow = &b.data()[static_cast<std::size_t>(t * c)];
      double* orow = &out[static_cast<std::size_t>(i * c)];
      for (std::int64_t j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
  return detail::make_result(
      "matmul", std::move(out), Shape{r, c}, {a, b},
      [a, b](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{matmul(g, transpose(b)), matmul(transpose(a), g)};
      });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2)
    throw ContractViolation("transpose: expected rank-2, got " + shape_str(x.shape()));
  const std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c));
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j * r + i)] = x.data()[static_cast<std::size_t>(i * c + j)];
  return detail::make_result("transpose", std::move(out), Shape{c, r}, {x},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{transpose(g)};
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ContractViolation("reshape: cannot reshape " + shape_str(x.shape()) + " to " +
                            shape_str(shape));
  Shape orig = x.shape();
  std::vector<double> out(x.data());
  return detail::make_result("reshape", std::move(out), std::move(shape), {x},
                             [orig](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{reshape(g, orig)};
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  const std::int64_t rank = parts[0].rank();
  if (axis < 0 || axis >= rank)
    throw ContractViolation("concat: axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(rank));
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank)
      throw ContractViolation("concat: rank mismatch " + shape_str(parts[0].shape()) + " vs " +
                              shape_str(p.shape()));
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != out_shape[static_cast<std::size_t>(d)])
        throw ContractViolation("concat: shape mismatch " + shape_str(out_shape) + " vs " +
                                shape_str(p.shape()));
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;

  // row-major copy by (outer, axis, inner) blocks
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::int64_t off = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t len = p.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(&out[static_cast<std::size_t>((o * total + off) * inner)],
                  &p.data()[static_cast<std::size_t>(o * len * inner)],
                  static_cast<std::size_t>(len * inner) * sizeof(double));
    off += len;
  }
  std::vector<std::int64_t> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  return detail::make_result(
      "concat", std::move(out), out_shape, parts,
      [axis, offsets, lens](const Tensor&, const Tensor& g) {
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < offsets.size(); ++i)
          grads.push_back(narrow(g, axis, offsets[i], lens[i]));
        return grads;
      });
}

inline Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const std::int64_t rank = x.rank();
  if (axis < 0 || axis >= rank || start < 0 || start + len > x.dim(axis))
    throw ContractViolation("narrow: range [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") invalid for " +
                            shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);
  const std::int64_t full = x.dim(axis);
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(&out[static_cast<std::size_t>(o * len * inner)],
                &x.data()[static_cast<std::size_t>((o * full + start) * inner)],
                static_cast<std::size_t>(len * inner) * sizeof(double));
  return detail::make_result(
      "narrow", std::move(out), out_shape, {x},
      [axis, start, full](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{embed(g, axis, start, full)};
      });
}

// Zero-pads x along `axis` so that it occupies [start, start+len) of an axis
// of size full_len; adjoint of narrow.
inline Tensor embed(const Tensor& x, int axis, std::int64_t start, std::int64_t full_len) {
  const std::int64_t rank = x.rank();
  const std::int64_t len = x.dim(axis);
  if (start < 0 || start + len > full_len)
    throw ContractViolation("embed: range invalid");
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = full_len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)), 0.0);
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(&out[static_cast<std::size_t>((o * full_len + start) * inner)],
                &x.data()[static_cast<std::size_t>(o * len * inner)],
                static_cast<std::size_t>(len * inner) * sizeof(double));
  return detail::make_result("embed", std::move(out), out_shape, {x},
                             [axis, start, len](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{narrow(g, axis, start, len)};
                             });
}

// Gathers rows of a rank-2 tensor (or elements of a rank-1 tensor).
inline Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
  if (x.rank() != 1 && x.rank() != 2)
    throw ContractViolation("gather_rows: expected rank 1 or 2, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.rank() == 2 ? x.dim(1) : 1;
  for (auto i : idx)
    if (i < 0 || i >= n)
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(n) + ")");
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(k * c));
  for (std::int64_t t = 0; t < k; ++t)
    std::memcpy(&out[static_cast<std::size_t>(t * c)],
                &x.data()[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)] * c)],
                static_cast<std::size_t>(c) * sizeof(double));
  Shape out_shape = x.rank() == 2 ? Shape{k, c} : Shape{k};
  return detail::make_result("gather_rows", std::move(out), std::move(out_shape), {x},
                             [idx, n](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{scatter_add_rows(g, idx, n)};
                             });
}

// Adjoint of gather_rows: sums rows of g into an n-row zero tensor.
inline Tensor scatter_add_rows(const Tensor& g, const std::vector<std::int64_t>& idx,
                               std::int64_t n) {
  const std::int64_t k = g.dim(0);
  const std::int64_t c = g.rank() == 2 ? g.dim(1) : 1;
  if (k != static_cast<std::int64_t>(idx.size()))
    throw ContractViolation("scatter_add_rows: index count mismatch");
  std::vector<double> out(static_cast<std::size_t>(n * c), 0.0);
  for (std::int64_t t = 0; t < k; ++t) {
    const std::int64_t row = idx[static_cast<std::size_t>(t)];
    for (std::int64_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(row * c + j)] += g.data()[static_cast<std::size_t>(t * c + j)];
  }
  Shape out_shape = g.rank() == 2 ? Shape{n, c} : Shape{n};
  return detail::make_result("scatter_add_rows", std::move(out), std::move(out_shape), {g},
                             [idx](const Tensor&, const Tensor& g2) {
                               return std::vector<Tensor>{gather_rows(g2, idx)};
                             });
}

// Scatters the elements of rank-1 g into a length-n zero vector at `pos`.
inline Tensor scatter_flat(const Tensor& g, const std::vector<std::int64_t>& pos,
                           std::int64_t n) {
  if (g.numel() != static_cast<std::int64_t>(pos.size()))
    throw ContractViolation("scatter_flat: position count mismatch");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (std::size_t t = 0; t < pos.size(); ++t) out[static_cast<std::size_t>(pos[t])] += g.data()[t];
  Shape gshape = g.shape();
  return detail::make_result(
      "scatter_flat", std::move(out), Shape{n}, {g},
      [pos, gshape](const Tensor&, const Tensor& g2) {
        return std::vector<Tensor>{reshape(gather_rows(g2, pos), gshape)};
      });
}

inline Tensor expand_rows(const Tensor& v, std::int64_t r) {
  if (v.rank() != 1) throw ContractViolation("expand_rows: expected rank-1");
  const std::int64_t n = v.dim(0);
  std::vector<double> out(static_cast<std::size_t>(r * n));
  for (std::int64_t i = 0; i < r; ++i)
    std::memcpy(&out[static_cast<std::size_t>(i * n)], v.data().data(),
                static_cast<std::size_t>(n) * sizeof(double));
  return detail::make_result("expand_rows", std::move(out), Shape{r, n}, {v},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{reduce_sum(g, 0)};
                             });
}

inline Tensor expand_cols(const Tensor& v, std::int64_t c) {
  if (v.rank() != 1) throw ContractViolation("expand_cols: expected rank-1");
  const std::int64_t n = v.dim(0);
  std::vector<double> out(static_cast<std::size_t>(n * c));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(i * c + j)] = v.data()[static_cast<std::size_t>(i)];
  return detail::make_result("expand_cols", std::move(out), Shape{n, c}, {v},
                             [](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{reduce_sum(g, 1)};
                             });
}

namespace detail {
inline void require_axis2d(const char* op, const Tensor& x, int axis) {
  if (x.rank() != 2)
    throw ContractViolation(std::string(op) + ": expected rank-2, got " + shape_str(x.shape()));
  if (axis != 0 && axis != 1)
    throw ContractViolation(std::string(op) + ": axis must be 0 or 1");
}
}  // namespace detail

inline Tensor reduce_sum(const Tensor& x, int axis) {
  detail::require_axis2d("reduce_sum", x, axis);
  const std::int64_t r = x.dim(0), c = x.dim(1);
  if (axis == 0) {
    std::vector<double> out(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] += x.at(i, j);
    return detail::make_result("reduce_sum", std::move(out), Shape{c}, {x},
                               [r](const Tensor&, const Tensor& g) {
                                 return std::vector<Tensor>{expand_rows(g, r)};
                               });
  }
  std::vector<double> out(static_cast<std::size_t>(r), 0.0);
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i)] += x.at(i, j);
  return detail::make_result("reduce_sum", std::move(out), Shape{r}, {x},
                             [c](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{expand_cols(g, c)};
                             });
}

inline Tensor reduce_mean(const Tensor& x, int axis) {
  detail::require_axis2d("reduce_mean", x, axis);
  const std::int64_t len = axis == 0 ? x.dim(0) : x.dim(1);
  Tensor s = reduce_sum(x, axis);
  return mul_scalar(s, 1.0 / static_cast<double>(len));
}

namespace detail {

template <bool kMax>
Tensor reduce_extreme(const Tensor& x, int axis, std::vector<std::int64_t>* argout) {
  require_axis2d(kMax ? "reduce_max" : "reduce_min", x, axis);
  const std::int64_t r = x.dim(0), c = x.dim(1);
  const std::int64_t out_len = axis == 0 ? c : r;
  std::vector<double> out(static_cast<std::size_t>(out_len));
  std::vector<std::int64_t> arg(static_cast<std::size_t>(out_len));
  // ties break to the lowest index via strict comparison
  if (axis == 1) {
    for (std::int64_t i = 0; i < r; ++i) {
      double best = x.at(i, 0);
      std::int64_t bj = 0;
      for (std::int64_t j = 1; j < c; ++j) {
        const double v = x.at(i, j);
        if (kMax ? v > best : v < best) {
          best = v;
          bj = j;
        }
      }
      out[static_cast<std::size_t>(i)] = best;
      arg[static_cast<std::size_t>(i)] = bj;
    }
  } else {
    for (std::int64_t j = 0; j < c; ++j) {
      double best = x.at(0, j);
      std::int64_t bi = 0;
      for (std::int64_t i = 1; i < r; ++i) {
        const double v = x.at(i, j);
        if (kMax ? v > best : v < best) {
          best = v;
          bi = i;
        }
      }
      out[static_cast<std::size_t>(j)] = best;
      arg[static_cast<std::size_t>(j)] = bi;
    }
  }
  if (argout) *argout = arg;
  // flat positions of the selected elements; gradient flows only to them
  std::vector<std::int64_t> pos(static_cast<std::size_t>(out_len));
  for (std::int64_t t = 0; t < out_len; ++t)
    pos[static_cast<std::size_t>(t)] =
        axis == 1 ? t * c + arg[static_cast<std::size_t>(t)] : arg[static_cast<std::size_t>(t)] * c + t;
  Shape xshape = x.shape();
  const std::int64_t total = r * c;
  return make_result(kMax ? "reduce_max" : "reduce_min", std::move(out), Shape{out_len}, {x},
                     [pos, total, xshape](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{
                           reshape(scatter_flat(g, pos, total), xshape)};
                     });
}

}  // namespace detail

inline Tensor reduce_max(const Tensor& x, int axis, std::vector<std::int64_t>* argout) {
  return detail::reduce_extreme<true>(x, axis, argout);
}

inline Tensor reduce_min(const Tensor& x, int axis, std::vector<std::int64_t>* argout) {
  return detail::reduce_extreme<false>(x, axis, argout);
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Shape xshape = x.shape();
  return detail::make_result("sum_all", {s}, Shape{}, {x},
                             [xshape](const Tensor&, const Tensor& g) {
                               return std::vector<Tensor>{scale(Tensor::ones(xshape), g)};
                             });
}

inline Tensor mean_all(const Tensor& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

namespace detail {

template <bool kMax>
Tensor extreme_all(const Tensor& x, std::int64_t* argout) {
  if (x.numel() == 0) throw ContractViolation("max/min_all: empty tensor");
  double best = x.data()[0];
  std::int64_t bi = 0;
  for (std::int64_t i = 1; i < x.numel(); ++i) {
    const double v = x.data()[static_cast<std::size_t>(i)];
    if (kMax ? v > best : v < best) {
      best = v;
      bi = i;
    }
  }
  if (argout) *argout = bi;
  Shape xshape = x.shape();
  const std::int64_t total = x.numel();
  const std::vector<std::int64_t> pos{bi};
  return make_result(kMax ? "max_all" : "min_all", {best}, Shape{}, {x},
                     [pos, total, xshape](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{
                           reshape(scatter_flat(reshape(g, Shape{1}), pos, total), xshape)};
                     });
}

}  // namespace detail

inline Tensor max_all(const Tensor& x, std::int64_t* argout) {
  return detail::extreme_all<true>(x, argout);
}

inline Tensor min_all(const Tensor& x, std::int64_t* argout) {
  return detail::extreme_all<false>(x, argout);
}

// Softmax along the last axis of a rank-1 or rank-2 tensor.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 1) return reshape(softmax(reshape(x, Shape{1, x.dim(0)})), x.shape());
  if (x.rank() != 2)
    throw ContractViolation("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
  const std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c));
  for (std::int64_t i = 0; i < r; ++i) {
    double mx = x.at(i, 0);
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
    double denom = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double e = std::exp(x.at(i, j) - mx);
      out[static_cast<std::size_t>(i * c + j)] = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] /= denom;
  }
  return detail::make_result(
      "softmax", std::move(out), x.shape(), {x},
      [c](const Tensor& y, const Tensor& g) {
        Tensor dot = reduce_sum(mul(g, y), 1);          // per-row <g, y>
        Tensor centered = sub(g, expand_cols(dot, c));  // g - <g,y>
        return std::vector<Tensor>{mul(centered, y)};
      });
}

// Squared Euclidean distance matrix between two point sets: out[i][j] =
// ||a_i - b_j||^2, computed directly so exact zeros survive.
inline Tensor pairwise_dist2(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ContractViolation("pairwise_dist2: shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  const std::int64_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * m));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* ai = &a.data()[static_cast<std::size_t>(i * d)];
    for (std::int64_t j = 0; j < m; ++j) {
      const double* bj = &b.data()[static_cast<std::size_t>(j * d)];
      double s = 0.0;
      for (std::int64_t q = 0; q < d; ++q) {
        const double diff = ai[q] - bj[q];
        s += diff * diff;
      }
      out[static_cast<std::size_t>(i * m + j)] = s;
    }
  }
  return detail::make_result(
      "pairwise_dist2", std::move(out), Shape{n, m}, {a, b},
      [a, b, d](const Tensor&, const Tensor& g) {
        Tensor row_sums = reduce_sum(g, 1);  // per a-point total weight
        Tensor col_sums = reduce_sum(g, 0);  // per b-point total weight
        Tensor ga = mul_scalar(sub(mul(a, expand_cols(row_sums, d)), matmul(g, b)), 2.0);
        Tensor gb = mul_scalar(sub(mul(b, expand_cols(col_sums, d)), matmul(transpose(g), a)), 2.0);
        return std::vector<Tensor>{ga, gb};
      });
}

// abs built from relu so the subgradient at 0 is 0 on both branches.
inline Tensor abs(const Tensor& x) { return add(relu(x), relu(neg(x))); }

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse pass from a scalar root. Gradients of tensors used in several
// places accumulate by summation. With create_graph=true the adjoint ops are
// themselves recorded, so the stored gradients stay differentiable.
// Each call overwrites .grad with d(root)/d(tensor) for every requires_grad
// tensor reached.
inline void backward(const Tensor& root, bool create_graph = false) {
  if (root.numel() != 1)
    throw ContractViolation("backward: root must be scalar, shape " + shape_str(root.shape()));
  if (!root.requires_grad()) {
    throw ContractViolation("backward: root does not require grad (no tape history)");
  }
  Tensor seed = Tensor::ones(root.shape());
  if (root.is_leaf()) {
    root.impl()->grad = seed.impl();
    return;
  }
  Tape* tape = root.impl()->tape;
  if (tape == nullptr || root.impl()->node_index < 0)
    throw ContractViolation("backward: root is not on the active tape");

  std::unordered_map<TensorImpl*, Tensor> adjoint;
  adjoint.reserve(256);
  adjoint.emplace(root.raw(), seed);

  {
    GradModeScope mode(create_graph);
    // adjoint ops must record onto the tape being traversed so a second
    // backward through the stored gradients sees them
    Tape* prev_active = detail::active_tape();
    detail::active_tape() = tape;
    for (std::int64_t i = root.impl()->node_index; i >= 0; --i) {
      // copy the node fields: create_graph appends to the node vector and
      // may reallocate it mid-iteration
      std::shared_ptr<TensorImpl> node_out = tape->nodes[static_cast<std::size_t>(i)].out;
      auto it = adjoint.find(node_out.get());
      if (it == adjoint.end()) continue;
      Tensor g = it->second;
      BackwardFn back = tape->nodes[static_cast<std::size_t>(i)].backward;
      std::vector<std::shared_ptr<TensorImpl>> inputs =
          tape->nodes[static_cast<std::size_t>(i)].inputs;
      const char* opname = tape->nodes[static_cast<std::size_t>(i)].op;
      std::vector<Tensor> contribs = back(Tensor(node_out), g);
      if (contribs.size() != inputs.size()) {
        detail::active_tape() = prev_active;
        throw ContractViolation(std::string("backward: op '") + opname +
                                "' returned wrong adjoint count");
      }
      for (std::size_t k = 0; k < contribs.size(); ++k) {
        if (!contribs[k].defined()) continue;
        TensorImpl* input = inputs[k].get();
        if (!input->requires_grad) continue;
        auto found = adjoint.find(input);
        if (found == adjoint.end())
          adjoint.emplace(input, contribs[k]);
        else
          found->second = add(found->second, contribs[k]);
      }
    }
    detail::active_tape() = prev_active;
  }

  for (auto& [impl, adj] : adjoint) {
    if (impl->requires_grad) impl->grad = adj.impl();
  }
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| /
// (|central difference| + 1e-12); the standard oracle for every gradient in
// the library.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                         double eps = 1e-6) {
  Tensor x = x0.constant_copy();
  x.set_requires_grad(true);
  std::vector<double> analytic;
  {
    TapeScope scope;
    Tensor y = f(x);
    if (y.numel() != 1) throw ContractViolation("grad_check: f must be scalar-valued");
    backward(y);
    Tensor g = x.grad();
    analytic = g.defined() ? g.data() : std::vector<double>(x.data().size(), 0.0);
  }
  double worst = 0.0;
  NoGradScope no_grad;
  for (std::size_t i = 0; i < x.data().size(); ++i) {
    const double orig = x.data()[i];
    x.mutable_data()[i] = orig + eps;
    const double up = f(x).item();
    x.mutable_data()[i] = orig - eps;
    const double down = f(x).item();
    x.mutable_data()[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::fabs(analytic[i] - numeric) / (std::fabs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// TSR1 serialization: magic "TSR1", u32 rank, u32 dims[], f64 data[], LE.
// ---------------------------------------------------------------------------

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("TSR1", 4);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 4);
  for (auto d : t.shape()) {
    const std::uint32_t dim = static_cast<std::uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&dim), 4);
  }
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  if (!os) throw IoError("write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TSR1", 4) != 0)
    throw IoError("read_tensor: bad magic (expected TSR1)");
  std::uint32_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 4);
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint32_t dim = 0;
    is.read(reinterpret_cast<char*>(&dim), 4);
    d = dim;
  }
  std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw IoError("read_tensor: truncated stream");
  return Tensor::from(std::move(data), std::move(shape));
}

}  // namespace msamp
