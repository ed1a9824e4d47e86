#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "c2f/tensor.hpp"

namespace c2f {

enum class Op {
  Leaf,
  Constant,
  Add,
  AddRow,
  Sub,
  Mul,
  MatMul,
  Tanh,
  Sigmoid,
  Softmax,
  Concat,
  Sum,
  Mean,
  Max,
  Scale,
  Log,
  Hinge,
  Clamp,
  Reshape,
  Gather,
  Conv3x3,
  AvgPool2,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::AddRow: return "add-row";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softmax: return "softmax";
    case Op::Concat: return "concat";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Max: return "max";
    case Op::Scale: return "scale";
    case Op::Log: return "log";
    case Op::Hinge: return "hinge";
    case Op::Clamp: return "clamp";
    case Op::Reshape: return "reshape";
    case Op::Gather: return "gather";
    case Op::Conv3x3: return "conv3x3";
    case Op::AvgPool2: return "avgpool2";
  }
  return "?";
}

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool tracked() const;
};

struct Node {
  Op op = Op::Constant;
  std::vector<std::size_t> inputs;
  Tensor owned;
  const Tensor* external = nullptr;
  Tensor* leaf_target = nullptr;
  bool tracked = false;
  std::vector<double> grad;
  // Saved for backward: arg-max positions, gather indices, concat widths.
  std::vector<std::size_t> index;
  std::size_t outer = 0, extent = 0, inner = 0;
  double lo = 0.0, hi = 0.0;

  const Tensor& value() const { return external ? *external : owned; }
};

/// Records primitive applications in execution order for reverse-mode sweeps.
///
/// A tape built with `track = false` computes values only: parameters become
/// untracked references and no op records are kept, which is what inference
/// and finite-difference probing use.
///
/// Every max, hinge and clamp evaluation folds its active branch into a
/// signature, and exact ties at max are counted. Two evaluations with equal
/// signatures lie on the same smooth piece of the function.
class Tape {
 public:
  explicit Tape(bool track = true) : track_(track) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return track_; }

  /// Registers a parameter. Gradients land in `t.grad` after backward().
  /// Registering the same tensor twice returns the same node.
  Var param(Tensor& t) {
    if (auto it = params_.find(&t); it != params_.end()) return Var{this, it->second};
    Node n;
    n.external = &t;
    if (track_) {
      n.op = Op::Leaf;
      n.leaf_target = &t;
      n.tracked = true;
    }
    nodes_.push_back(std::move(n));
    params_.emplace(&t, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
  }

  /// Read-only parameter view; never receives gradient.
  Var param(const Tensor& t) { return constant_ref(t); }

  Var constant(Tensor t) {
    Node n;
    n.owned = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var constant_ref(const Tensor& t) {
    Node n;
    n.external = &t;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  std::uint64_t branch_signature() const { return signature_; }
  std::size_t tie_count() const { return ties_; }

  void clear() {
    nodes_.clear();
    params_.clear();
    signature_ = kSignatureSeed;
    ties_ = 0;
  }

  // Internal: used by primitives.
  Node& mutable_node(std::size_t id) { return nodes_[id]; }

  Var record(Node n) {
#ifndef NDEBUG
    assert(n.value().all_finite() && "non-finite value produced by primitive");
#endif
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void mix_signature(std::uint64_t v) {
    signature_ ^= v + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }
  void note_tie() { ++ties_; }

 private:
  static constexpr std::uint64_t kSignatureSeed = 0xcbf29ce484222325ULL;

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
  std::uint64_t signature_ = kSignatureSeed;
  std::size_t ties_ = 0;
};

inline const Tensor& Var::value() const { return tape->node(id).value(); }
inline bool Var::tracked() const { return tape->node(id).tracked; }

namespace detail {

inline Tape& same_tape(const char* kind, std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (v.tape == nullptr) throw std::invalid_argument(std::string(kind) + ": operand not on a tape");
    if (t && v.tape != t) throw std::invalid_argument(std::string(kind) + ": operands live on different tapes");
    t = v.tape;
  }
  return *t;
}

[[noreturn]] inline void mismatch(Op op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

[[noreturn]] inline void bad_shape(Op op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op_name(op)) + ": shape " + to_string(a) + " " + why);
}

inline Var emit(Tape& tape, Op op, std::vector<std::size_t> inputs, Tensor value, Node saved = {}) {
  bool tracked = false;
  for (std::size_t id : inputs) tracked = tracked || tape.node(id).tracked;
  Node n = std::move(saved);
  n.owned = std::move(value);
  if (tracked) {
    n.op = op;
    n.inputs = std::move(inputs);
    n.tracked = true;
  } else {
    n.op = Op::Constant;
    n.index.clear();
  }
  return tape.record(std::move(n));
}

// Splits `shape` around `axis` into (outer, extent, inner) for strided reductions.
inline void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape("add", {a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape == y.shape) {
    Tensor out(x.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return detail::emit(t, Op::Add, {a.id, b.id}, std::move(out));
  }
  // Bias-row addition: [m, n] + [n] or [m, n] + [1, n].
  const bool row = x.rank() == 2 && ((y.rank() == 1 && y.dim(0) == x.dim(1)) ||
                                     (y.rank() == 2 && y.dim(0) == 1 && y.dim(1) == x.dim(1)));
  if (!row) detail::mismatch(Op::Add, x.shape, y.shape);
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + y[c];
  return detail::emit(t, Op::AddRow, {a.id, b.id}, std::move(out));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape("sub", {a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape != y.shape) detail::mismatch(Op::Sub, x.shape, y.shape);
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::emit(t, Op::Sub, {a.id, b.id}, std::move(out));
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape("mul", {a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape != y.shape) detail::mismatch(Op::Mul, x.shape, y.shape);
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::emit(t, Op::Mul, {a.id, b.id}, std::move(out));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double s) {
  Tape& t = detail::same_tape("scale", {a});
  Tensor out = Tensor(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  Node saved;
  saved.lo = s;
  return detail::emit(t, Op::Scale, {a.id}, std::move(out), std::move(saved));
}

inline Var tanh(Var a) {
  Tape& t = detail::same_tape("tanh", {a});
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return detail::emit(t, Op::Tanh, {a.id}, std::move(out));
}

inline Var sigmoid(Var a) {
  Tape& t = detail::same_tape("sigmoid", {a});
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(x[i]);
  return detail::emit(t, Op::Sigmoid, {a.id}, std::move(out));
}

inline Var log(Var a) {
  Tape& t = detail::same_tape("log", {a});
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(x[i]));
    out[i] = std::log(x[i]);
  }
  return detail::emit(t, Op::Log, {a.id}, std::move(out));
}

/// max(x, 0) elementwise; the subgradient at exactly 0 is 0.
inline Var hinge(Var a) {
  Tape& t = detail::same_tape("hinge", {a});
  Tensor out(a.shape());
  const Tensor& x = a.value();
  std::uint64_t mask = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] > 0.0 ? x[i] : 0.0;
    mask = mask * 3 + (x[i] > 0.0 ? 1 : 0) + (x[i] == 0.0 ? 2 : 0);
    if (x[i] == 0.0) t.note_tie();
  }
  t.mix_signature(mask);
  return detail::emit(t, Op::Hinge, {a.id}, std::move(out));
}

/// Clamps into [lo, hi]; gradient passes only where lo <= x <= hi.
inline Var clamp(Var a, double lo, double hi) {
  Tape& t = detail::same_tape("clamp", {a});
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  Tensor out(a.shape());
  const Tensor& x = a.value();
  std::uint64_t mask = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i], lo, hi);
    mask = mask * 3 + (x[i] < lo ? 1 : 0) + (x[i] > hi ? 2 : 0);
  }
  t.mix_signature(mask);
  Node saved;
  saved.lo = lo;
  saved.hi = hi;
  return detail::emit(t, Op::Clamp, {a.id}, std::move(out), std::move(saved));
}

// ---------------------------------------------------------------------------
// Linear algebra and structure

/// [m, k] x [k, n] -> [m, n]. A rank-1 left operand [k] is a single row and
/// yields a rank-1 result [n].
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape("matmul", {a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (y.rank() != 2 || x.rank() == 0 || x.rank() > 2) detail::mismatch(Op::MatMul, x.shape, y.shape);
  const std::size_t m = x.rank() == 2 ? x.dim(0) : 1;
  const std::size_t k = x.shape.back();
  const std::size_t n = y.dim(1);
  if (y.dim(0) != k) detail::mismatch(Op::MatMul, x.shape, y.shape);
  Tensor out(x.rank() == 2 ? Shape{m, n} : Shape{n});
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict row = out.values.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* __restrict yrow = y.values.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += xv * yrow[j];
    }
  }
  Node saved;
  saved.outer = m;
  saved.extent = k;
  saved.inner = n;
  return detail::emit(t, Op::MatMul, {a.id, b.id}, std::move(out), std::move(saved));
}

inline Var softmax(Var a) {
  Tape& t = detail::same_tape("softmax", {a});
  const Tensor& x = a.value();
  if (x.rank() == 0) detail::bad_shape(Op::Softmax, x.shape, "has no last axis");
  const std::size_t n = x.shape.back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values.data() + r * n;
    double* o = out.values.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) o[i] /= total;
  }
  return detail::emit(t, Op::Softmax, {a.id}, std::move(out));
}

/// Joins tensors along their last axis; all leading extents must agree.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Tape& t = *parts.front().tape;
  const Shape& first = parts.front().shape();
  if (first.empty()) detail::bad_shape(Op::Concat, first, "has no last axis");
  std::vector<std::size_t> ids;
  Node saved;
  std::size_t width = 0;
  for (const Var& p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat: operands live on different tapes");
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin()))
      detail::mismatch(Op::Concat, first, s);
    saved.index.push_back(s.back());
    width += s.back();
    ids.push_back(p.id);
  }
  Shape out_shape = first;
  out_shape.back() = width;
  Tensor out(out_shape);
  const std::size_t rows = out.size() / width;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t w = v.shape.back();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.values.data() + r * w, w, out.values.data() + r * width + offset);
    offset += w;
  }
  saved.outer = rows;
  saved.inner = width;
  return detail::emit(t, Op::Concat, std::move(ids), std::move(out), std::move(saved));
}

inline Var reshape(Var a, Shape shape) {
  Tape& t = detail::same_tape("reshape", {a});
  if (numel(shape) != a.size()) detail::mismatch(Op::Reshape, a.shape(), shape);
  Tensor out(std::move(shape), a.value().values);
  return detail::emit(t, Op::Reshape, {a.id}, std::move(out));
}

/// Picks elements by flat index into a rank-1 result.
inline Var gather(Var a, std::vector<std::size_t> indices) {
  Tape& t = detail::same_tape("gather", {a});
  if (indices.empty()) detail::bad_shape(Op::Gather, a.shape(), "gathered with no indices");
  const Tensor& x = a.value();
  Tensor out(Shape{indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size())
      detail::bad_shape(Op::Gather, x.shape, "indexed out of range at " + std::to_string(indices[i]));
    out[i] = x[indices[i]];
  }
  Node saved;
  saved.index = std::move(indices);
  return detail::emit(t, Op::Gather, {a.id}, std::move(out), std::move(saved));
}

namespace detail {

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

inline Var reduce(Op op, Var a, std::size_t axis) {
  Tape& t = same_tape(op_name(op), {a});
  const Tensor& x = a.value();
  if (axis >= x.rank()) bad_shape(op, x.shape, "has no axis " + std::to_string(axis));
  Node saved;
  split_axis(x.shape, axis, saved.outer, saved.extent, saved.inner);
  const std::size_t outer = saved.outer, n = saved.extent, inner = saved.inner;
  Tensor out(drop_axis(x.shape, axis));
  if (op == Op::Max) saved.index.assign(outer * inner, 0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      if (op == Op::Max) {
        std::size_t best = 0;
        double bv = x[base];
        bool tie = false;
        for (std::size_t k = 1; k < n; ++k) {
          const double v = x[base + k * inner];
          if (v > bv) {
            bv = v;
            best = k;
            tie = false;
          } else if (v == bv) {
            tie = true;
          }
        }
        if (tie) t.note_tie();
        t.mix_signature(best);
        saved.index[o * inner + i] = best;
        out[o * inner + i] = bv;
      } else {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += x[base + k * inner];
        out[o * inner + i] = op == Op::Mean ? s / static_cast<double>(n) : s;
      }
    }
  }
  return emit(t, op, {a.id}, std::move(out), std::move(saved));
}

}  // namespace detail

inline Var sum(Var a, std::size_t axis) { return detail::reduce(Op::Sum, a, axis); }
inline Var mean(Var a, std::size_t axis) { return detail::reduce(Op::Mean, a, axis); }
/// Gradient routes to the arg-max only; ties go to the lowest index.
inline Var max(Var a, std::size_t axis) { return detail::reduce(Op::Max, a, axis); }

inline Var sum_all(Var a) {
  if (a.value().rank() == 0) return a;
  return sum(reshape(a, Shape{a.size()}), 0);
}

// ---------------------------------------------------------------------------
// Image primitives used by the encoder

/// Same-padded 3x3 convolution. x: [H, W, Cin], k: [3, 3, Cin, Cout], b: [Cout].
inline Var conv3x3(Var x, Var k, Var b) {
  Tape& t = detail::same_tape("conv3x3", {x, k, b});
  const Tensor& in = x.value();
  const Tensor& ker = k.value();
  const Tensor& bias = b.value();
  if (in.rank() != 3) detail::bad_shape(Op::Conv3x3, in.shape, "is not [H, W, C]");
  const std::size_t h = in.dim(0), w = in.dim(1), ci = in.dim(2);
  if (ker.shape.size() != 4 || ker.dim(0) != 3 || ker.dim(1) != 3 || ker.dim(2) != ci)
    detail::mismatch(Op::Conv3x3, in.shape, ker.shape);
  const std::size_t co = ker.dim(3);
  if (bias.shape != Shape{co}) detail::mismatch(Op::Conv3x3, ker.shape, bias.shape);
  Tensor out(Shape{h, w, co});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      double* __restrict o = out.values.data() + (y * w + xx) * co;
      std::copy_n(bias.values.data(), co, o);
      for (int dy = -1; dy <= 1; ++dy) {
        const long sy = static_cast<long>(y) + dy;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (int dx = -1; dx <= 1; ++dx) {
          const long sx = static_cast<long>(xx) + dx;
          if (sx < 0 || sx >= static_cast<long>(w)) continue;
          const double* src = in.values.data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * ci;
          const double* kk = ker.values.data() + ((dy + 1) * 3 + (dx + 1)) * ci * co;
          for (std::size_t c = 0; c < ci; ++c) {
            const double v = src[c];
            const double* __restrict krow = kk + c * co;
            for (std::size_t j = 0; j < co; ++j) o[j] += v * krow[j];
          }
        }
      }
    }
  }
  return detail::emit(t, Op::Conv3x3, {x.id, k.id, b.id}, std::move(out));
}

/// 2x2 average pooling with stride 2 over [H, W, C]; H and W must be even.
inline Var avgpool2(Var x) {
  Tape& t = detail::same_tape("avgpool2", {x});
  const Tensor& in = x.value();
  if (in.rank() != 3 || in.dim(0) % 2 || in.dim(1) % 2)
    detail::bad_shape(Op::AvgPool2, in.shape, "is not [H, W, C] with even H and W");
  const std::size_t h = in.dim(0) / 2, w = in.dim(1) / 2, c = in.dim(2), iw = in.dim(1);
  Tensor out(Shape{h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t a = ((2 * y) * iw + 2 * xx) * c + ch;
        const std::size_t bb = ((2 * y + 1) * iw + 2 * xx) * c + ch;
        out[(y * w + xx) * c + ch] = 0.25 * (in[a] + in[a + c] + in[bb] + in[bb + c]);
      }
  return detail::emit(t, Op::AvgPool2, {x.id}, std::move(out));
}

// ---------------------------------------------------------------------------
// Reverse sweep

namespace detail {

inline std::vector<double>& grad_of(Tape& tape, std::size_t id) {
  Node& n = tape.mutable_node(id);
  if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0);
  return n.grad;
}

inline void propagate(Tape& tape, std::size_t id) {
  // Copy what we need; grad_of() may touch other nodes but never reallocates the vector.
  Node& n = tape.mutable_node(id);
  const std::vector<double>& g = n.grad;
  const Tensor& y = n.value();
  auto input_tracked = [&](std::size_t k) { return tape.node(n.inputs[k]).tracked; };
  auto in_value = [&](std::size_t k) -> const Tensor& { return tape.node(n.inputs[k]).value(); };

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return;
    case Op::Add:
    case Op::Sub: {
      const double sign = n.op == Op::Sub ? -1.0 : 1.0;
      if (input_tracked(0)) {
        auto& ga = grad_of(tape, n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (input_tracked(1)) {
        auto& gb = grad_of(tape, n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      }
      return;
    }
    case Op::AddRow: {
      const std::size_t cols = y.shape[1], rows = y.shape[0];
      if (input_tracked(0)) {
        auto& ga = grad_of(tape, n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (input_tracked(1)) {
        auto& gb = grad_of(tape, n.inputs[1]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
      return;
    }
    case Op::Mul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      if (input_tracked(0)) {
        auto& ga = grad_of(tape, n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (input_tracked(1)) {
        auto& gb = grad_of(tape, n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      return;
    }
    case Op::MatMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const std::size_t m = n.outer, k = n.extent, cols = n.inner;
      if (input_tracked(0)) {
        auto& ga = grad_of(tape, n.inputs[0]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b.values.data() + p * cols;
            const double* grow = g.data() + i * cols;
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
      }
      if (input_tracked(1)) {
        auto& gb = grad_of(tape, n.inputs[1]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            double* __restrict brow = gb.data() + p * cols;
            const double* __restrict grow = g.data() + i * cols;
            for (std::size_t j = 0; j < cols; ++j) brow[j] += av * grow[j];
          }
      }
      return;
    }
    case Op::Tanh: {
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      return;
    }
    case Op::Sigmoid: {
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      return;
    }
    case Op::Log: {
      const Tensor& a = in_value(0);
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[i];
      return;
    }
    case Op::Hinge: {
      const Tensor& a = in_value(0);
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] > 0.0) ga[i] += g[i];
      return;
    }
    case Op::Clamp: {
      const Tensor& a = in_value(0);
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] >= n.lo && a[i] <= n.hi) ga[i] += g[i];
      return;
    }
    case Op::Scale: {
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.lo;
      return;
    }
    case Op::Softmax: {
      auto& ga = grad_of(tape, n.inputs[0]);
      const std::size_t w = y.shape.back();
      for (std::size_t r = 0; r < y.size() / w; ++r) {
        const double* yr = y.values.data() + r * w;
        const double* gr = g.data() + r * w;
        double dot = 0.0;
        for (std::size_t i = 0; i < w; ++i) dot += gr[i] * yr[i];
        for (std::size_t i = 0; i < w; ++i) ga[r * w + i] += yr[i] * (gr[i] - dot);
      }
      return;
    }
    case Op::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = n.index[k];
        if (input_tracked(k)) {
          auto& gk = grad_of(tape, n.inputs[k]);
          for (std::size_t r = 0; r < n.outer; ++r)
            for (std::size_t c = 0; c < w; ++c) gk[r * w + c] += g[r * n.inner + offset + c];
        }
        offset += w;
      }
      return;
    }
    case Op::Sum:
    case Op::Mean:
    case Op::Max: {
      auto& ga = grad_of(tape, n.inputs[0]);
      const std::size_t ext = n.extent, inner = n.inner;
      const double f = n.op == Op::Mean ? 1.0 / static_cast<double>(ext) : 1.0;
      for (std::size_t o = 0; o < n.outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const double gv = g[o * inner + i];
          const std::size_t base = o * ext * inner + i;
          if (n.op == Op::Max) {
            ga[base + n.index[o * inner + i] * inner] += gv;
          } else {
            for (std::size_t k = 0; k < ext; ++k) ga[base + k * inner] += gv * f;
          }
        }
      return;
    }
    case Op::Reshape: {
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      return;
    }
    case Op::Gather: {
      auto& ga = grad_of(tape, n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[n.index[i]] += g[i];
      return;
    }
    case Op::Conv3x3: {
      const Tensor& in = in_value(0);
      const Tensor& ker = in_value(1);
      const std::size_t h = in.dim(0), w = in.dim(1), ci = in.dim(2), co = ker.dim(3);
      const bool gx = input_tracked(0), gk = input_tracked(1), gbias = input_tracked(2);
      std::vector<double>* gin = gx ? &grad_of(tape, n.inputs[0]) : nullptr;
      std::vector<double>* gker = gk ? &grad_of(tape, n.inputs[1]) : nullptr;
      if (gbias) {
        auto& gb = grad_of(tape, n.inputs[2]);
        for (std::size_t p = 0; p < h * w; ++p)
          for (std::size_t j = 0; j < co; ++j) gb[j] += g[p * co + j];
      }
      if (!gx && !gk) return;
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double* go = g.data() + (yy * w + xx) * co;
          for (int dy = -1; dy <= 1; ++dy) {
            const long sy = static_cast<long>(yy) + dy;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const long sx = static_cast<long>(xx) + dx;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              const std::size_t src = (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * ci;
              const std::size_t koff = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)) * ci * co;
              for (std::size_t c = 0; c < ci; ++c) {
                const double* krow = ker.values.data() + koff + c * co;
                if (gin) {
                  double s = 0.0;
                  for (std::size_t j = 0; j < co; ++j) s += go[j] * krow[j];
                  (*gin)[src + c] += s;
                }
                if (gker) {
                  const double v = in[src + c];
                  if (v == 0.0) continue;
                  double* __restrict gkrow = gker->data() + koff + c * co;
                  for (std::size_t j = 0; j < co; ++j) gkrow[j] += v * go[j];
                }
              }
            }
          }
        }
      return;
    }
    case Op::AvgPool2: {
      const Tensor& in = in_value(0);
      auto& ga = grad_of(tape, n.inputs[0]);
      const std::size_t h = y.shape[0], w = y.shape[1], c = y.shape[2], iw = in.dim(1);
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double gv = 0.25 * g[(yy * w + xx) * c + ch];
            const std::size_t a = ((2 * yy) * iw + 2 * xx) * c + ch;
            const std::size_t bb = ((2 * yy + 1) * iw + 2 * xx) * c + ch;
            ga[a] += gv;
            ga[a + c] += gv;
            ga[bb] += gv;
            ga[bb + c] += gv;
          }
      return;
    }
  }
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Each tracked leaf adds d(loss)/d(leaf)
/// into its parameter's grad buffer, so repeated calls accumulate.
inline void backward(Tape& tape, Var loss) {
  if (loss.tape != &tape || loss.id >= tape.size())
    throw std::invalid_argument("backward: loss node is not on this tape");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (!tape.node(loss.id).tracked) return;
  detail::grad_of(tape, loss.id)[0] += 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = tape.mutable_node(id);
    if (!n.tracked || n.grad.empty()) continue;
    if (n.op == Op::Leaf) {
      auto dst = n.leaf_target->ensure_grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
#ifndef NDEBUG
      assert(n.leaf_target->all_finite() && "non-finite gradient");
#endif
      continue;
    }
    detail::propagate(tape, id);
  }
}

}  // namespace c2f
