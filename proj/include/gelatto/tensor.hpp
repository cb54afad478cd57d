#pragma once

// Route every matrix product through the packed GEMM kernel. The coeff-based
// fallback for small products segments its vectorized reductions by operand
// alignment, so results could vary with heap addresses; packed GEMM copies
// into aligned panels and is bit-reproducible for a given shape.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 1
#endif

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gelatto/common.hpp"

namespace gelatto {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major f64 tensor. A Tensor is a cheap handle; the payload is
/// shared. Data is written once by the producing op; gradients accumulate
/// additively during Tape::backward.
class Tensor {
 public:
  Tensor() : node_(nullptr) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(shape_size(t.node_->shape), 0.0);
    return t;
  }

  static Tensor constant(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return constant({}, value); }

  static Tensor from_values(Shape shape, std::vector<double> values) {
    if (shape_size(shape) != values.size())
      throw DimensionError("from_values: " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t size() const { return node_->data.size(); }

  const double* cdata() const { return node_->data.data(); }
  double* data() { return node_->data.data(); }
  std::span<const double> values() const { return node_->data; }

  double value() const {
    if (size() != 1) throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }

  /// Marks this tensor as a gradient leaf (or checks participation).
  void set_requires_grad(bool v) { node_->tracked = v; }
  bool requires_grad() const { return node_->tracked; }

  bool has_grad() const { return !node_->grad.empty(); }
  const double* cgrad() const { return node_->grad.data(); }
  std::span<const double> grad() const { return node_->grad; }
  // Grad accumulation is the one permitted mutation of a shared payload,
  // so these are callable through const handles captured by backward closures.
  double* grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad.data();
  }
  void zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }
  void drop_grad() const { node_->grad.clear(); }

  bool all_finite() const {
    for (double v : node_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Identity of the payload, for aliasing checks in tests.
  const void* id() const { return node_.get(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool tracked = false;      // participates in gradient computation
  };
  std::shared_ptr<Node> node_;
};

/// Records forward ops as backward closures, in topological order by
/// construction. One tape per forward pass; replaying in reverse populates
/// grads for every tracked tensor reachable from the loss.
class Tape {
 public:
  Tape() = default;

  static Tape inference() {
    Tape t;
    t.recording_ = false;
    return t;
  }

  bool recording() const { return recording_; }
  std::size_t num_ops() const { return ops_.size(); }

  void record(std::function<void()> backward_fn) {
    if (recording_) ops_.push_back(std::move(backward_fn));
  }

  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw ContractError("backward: loss does not participate in gradients (not on this tape)");
    loss.grad_buffer()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }

 private:
  bool recording_ = true;
  std::vector<std::function<void()>> ops_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

inline Tensor make_output(Shape shape) { return Tensor::zeros(std::move(shape)); }

inline bool track_output(Tape& tape, Tensor& out, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) {
      out.set_requires_grad(true);
      return true;
    }
  return false;
}

// Splits a shape into (outer, axis_len, inner) around `axis`.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of rank " + std::to_string(s.size()));
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  const double* pb = b.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::track_output(tape, out, {&a, &b})) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      std::size_t n = out.size();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  const double* pb = b.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::track_output(tape, out, {&a, &b})) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      std::size_t n = out.size();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  const double* pb = b.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::track_output(tape, out, {&a, &b})) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      std::size_t n = out.size();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer();
        const double* pb2 = b.cdata();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer();
        const double* pa2 = a.cdata();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * c;
  if (detail::track_output(tape, out, {&a})) {
    tape.record([a, out, c]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* ga = a.grad_buffer();
      for (std::size_t i = 0, n = out.size(); i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  if (detail::track_output(tape, out, {&a})) {
    tape.record([a, out]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      const double* pa2 = a.cdata();
      double* ga = a.grad_buffer();
      for (std::size_t i = 0, n = out.size(); i < n; ++i)
        if (pa2[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

/// 1/sqrt(x + eps), elementwise. The BN variance path.
inline Tensor rsqrt_eps(Tape& tape, const Tensor& a, double eps) {
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = 1.0 / std::sqrt(pa[i] + eps);
  if (detail::track_output(tape, out, {&a})) {
    tape.record([a, out]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      const double* py = out.cdata();
      double* ga = a.grad_buffer();
      // d(1/sqrt(u))/du = -y^3 / 2
      for (std::size_t i = 0, n = out.size(); i < n; ++i) ga[i] += g[i] * (-0.5 * py[i] * py[i] * py[i]);
    });
  }
  return out;
}

/// Inverted dropout: zeroes with probability `rate`, scales survivors by
/// 1/(1-rate). Draws `size` Bernoulli samples from rng in index order.
inline Tensor dropout(Tape& tape, const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  auto mask = std::make_shared<std::vector<float>>(a.size());
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double keep_scale = 1.0 / (1.0 - rate);
  for (auto& m : *mask) m = uni(rng) < rate ? 0.0f : static_cast<float>(keep_scale);
  Tensor out = detail::make_output(a.shape());
  const double* pa = a.cdata();
  double* po = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = pa[i] * (*mask)[i];
  if (detail::track_output(tape, out, {&a})) {
    tape.record([a, out, mask]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* ga = a.grad_buffer();
      for (std::size_t i = 0, n = out.size(); i < n; ++i) ga[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise affine (the shared-MLP primitive)
// ---------------------------------------------------------------------------

/// y[..., j] = sum_i x[..., i] * w[i, j] + b[j], identically at every leading
/// position. Shared weights make this permutation-equivariant over leading axes.
inline Tensor linear_pointwise(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require(w.rank() == 2, "linear_pointwise: weight must be rank 2, got " + shape_str(w.shape()));
  const std::size_t din = w.dim(0);
  const std::size_t dout = w.dim(1);
  detail::require(x.rank() >= 1 && x.dim(x.rank() - 1) == din,
                  "linear_pointwise: input " + shape_str(x.shape()) + " does not end in Din=" + std::to_string(din));
  detail::require(b.rank() == 1 && b.dim(0) == dout,
                  "linear_pointwise: bias " + shape_str(b.shape()) + " must be [" + std::to_string(dout) + "]");
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor out = detail::make_output(out_shape);
  const std::size_t rows = x.size() / din;
  {
    detail::MapConstMat X(x.cdata(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(din));
    detail::MapConstMat W(w.cdata(), static_cast<Eigen::Index>(din), static_cast<Eigen::Index>(dout));
    detail::MapMat Y(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dout));
    Y.noalias() = X * W;
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.cdata(), static_cast<Eigen::Index>(dout));
  }
  if (detail::track_output(tape, out, {&x, &w, &b})) {
    tape.record([x, w, b, out, rows, din, dout]() mutable {
      if (!out.has_grad()) return;
      detail::MapConstMat GY(out.cgrad(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dout));
      if (x.requires_grad()) {
        detail::MapConstMat W(w.cdata(), static_cast<Eigen::Index>(din), static_cast<Eigen::Index>(dout));
        detail::MapMat GX(x.grad_buffer(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(din));
        GX.noalias() += GY * W.transpose();
      }
      if (w.requires_grad()) {
        detail::MapConstMat X(x.cdata(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(din));
        detail::MapMat GW(w.grad_buffer(), static_cast<Eigen::Index>(din), static_cast<Eigen::Index>(dout));
        GW.noalias() += X.transpose() * GY;
      }
      if (b.requires_grad()) {
        // fixed row-order accumulation; Eigen's partial redux segments by
        // operand alignment and is not bit-reproducible across allocations
        double* gb = b.grad_buffer();
        const double* g = out.cgrad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Axis ops
// ---------------------------------------------------------------------------

/// Softmax along `axis`, max-subtracted for overflow safety.
inline Tensor softmax_axis(Tape& tape, const Tensor& x, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Tensor out = detail::make_output(x.shape());
  const double* px = x.cdata();
  double* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = px[base];
      for (std::size_t a = 1; a < len; ++a) mx = std::max(mx, px[base + a * inner]);
      double sum = 0.0;
      for (std::size_t a = 0; a < len; ++a) {
        double e = std::exp(px[base + a * inner] - mx);
        po[base + a * inner] = e;
        sum += e;
      }
      for (std::size_t a = 0; a < len; ++a) po[base + a * inner] /= sum;
    }
  if (detail::track_output(tape, out, {&x})) {
    tape.record([x, out, outer, len, inner]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      const double* py = out.cdata();
      double* gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t a = 0; a < len; ++a) dot += g[base + a * inner] * py[base + a * inner];
          for (std::size_t a = 0; a < len; ++a) {
            const std::size_t k = base + a * inner;
            gx[k] += py[k] * (g[k] - dot);
          }
        }
    });
  }
  return out;
}

/// log(softmax(x)) along `axis`, computed via logsumexp.
inline Tensor log_softmax_axis(Tape& tape, const Tensor& x, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Tensor out = detail::make_output(x.shape());
  const double* px = x.cdata();
  double* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = px[base];
      for (std::size_t a = 1; a < len; ++a) mx = std::max(mx, px[base + a * inner]);
      double sum = 0.0;
      for (std::size_t a = 0; a < len; ++a) sum += std::exp(px[base + a * inner] - mx);
      const double lse = mx + std::log(sum);
      for (std::size_t a = 0; a < len; ++a) po[base + a * inner] = px[base + a * inner] - lse;
    }
  if (detail::track_output(tape, out, {&x})) {
    tape.record([x, out, outer, len, inner]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      const double* py = out.cdata();
      double* gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double gsum = 0.0;
          for (std::size_t a = 0; a < len; ++a) gsum += g[base + a * inner];
          for (std::size_t a = 0; a < len; ++a) {
            const std::size_t k = base + a * inner;
            gx[k] += g[k] - std::exp(py[k]) * gsum;
          }
        }
    });
  }
  return out;
}

enum class Reduce { Sum, Max, Mean };

/// Reduces along `axis`. Max routes the gradient to the first maximal element
/// (lowest index) along the axis.
inline Tensor reduce(Tape& tape, const Tensor& x, std::size_t axis, Reduce kind) {
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  Tensor out = detail::make_output(out_shape);
  const double* px = x.cdata();
  double* po = out.data();
  std::shared_ptr<std::vector<std::uint32_t>> argmax;
  if (kind == Reduce::Max) argmax = std::make_shared<std::vector<std::uint32_t>>(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      const std::size_t oi = o * inner + i;
      if (kind == Reduce::Max) {
        double best = px[base];
        std::uint32_t best_a = 0;
        for (std::size_t a = 1; a < len; ++a)
          if (px[base + a * inner] > best) {
            best = px[base + a * inner];
            best_a = static_cast<std::uint32_t>(a);
          }
        po[oi] = best;
        (*argmax)[oi] = best_a;
      } else {
        double acc = 0.0;
        for (std::size_t a = 0; a < len; ++a) acc += px[base + a * inner];
        po[oi] = kind == Reduce::Mean ? acc / static_cast<double>(len) : acc;
      }
    }
  if (detail::track_output(tape, out, {&x})) {
    tape.record([x, out, outer, len, inner, kind, argmax]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* gx = x.grad_buffer();
      const double inv_len = 1.0 / static_cast<double>(len);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          const std::size_t oi = o * inner + i;
          switch (kind) {
            case Reduce::Sum:
              for (std::size_t a = 0; a < len; ++a) gx[base + a * inner] += g[oi];
              break;
            case Reduce::Mean:
              for (std::size_t a = 0; a < len; ++a) gx[base + a * inner] += g[oi] * inv_len;
              break;
            case Reduce::Max:
              gx[base + (*argmax)[oi] * inner] += g[oi];
              break;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gather / replication / concat
// ---------------------------------------------------------------------------

/// out[..m.., :] = source[index[..m..], :]. Backward scatter-adds into source
/// rows, so repeated indices accumulate.
inline Tensor gather_rows(Tape& tape, const Tensor& source, std::span<const std::size_t> index,
                          Shape index_shape) {
  detail::require(source.rank() == 2, "gather_rows: source must be [N,D], got " + shape_str(source.shape()));
  if (shape_size(index_shape) != index.size())
    throw DimensionError("gather_rows: index shape " + shape_str(index_shape) + " does not hold " +
                         std::to_string(index.size()) + " indices");
  const std::size_t n = source.dim(0);
  const std::size_t d = source.dim(1);
  for (std::size_t idx : index)
    if (idx >= n) throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range [0," + std::to_string(n) + ")");
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  Tensor out = detail::make_output(out_shape);
  const double* ps = source.cdata();
  double* po = out.data();
  for (std::size_t m = 0; m < index.size(); ++m)
    std::copy_n(ps + index[m] * d, d, po + m * d);
  if (detail::track_output(tape, out, {&source})) {
    auto idx_copy = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
    tape.record([source, out, idx_copy, d]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* gs = source.grad_buffer();
      for (std::size_t m = 0; m < idx_copy->size(); ++m) {
        double* dst = gs + (*idx_copy)[m] * d;
        const double* src = g + m * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

inline Tensor gather_rows(Tape& tape, const Tensor& source, const std::vector<std::size_t>& index) {
  return gather_rows(tape, source, std::span<const std::size_t>(index), Shape{index.size()});
}

/// The K-replication operator: inserts a new axis of length `times` at `axis`.
/// [M,D] with axis=1 -> [M,times,D].
inline Tensor replicate(Tape& tape, const Tensor& x, std::size_t axis, std::size_t times) {
  detail::require(axis <= x.rank(), "replicate: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), times);
  Tensor out = detail::make_output(out_shape);
  const double* px = x.cdata();
  double* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(px + o * inner, inner, po + (o * times + t) * inner);
  if (detail::track_output(tape, out, {&x})) {
    tape.record([x, out, outer, times, inner]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t t = 0; t < times; ++t) {
          const double* src = g + (o * times + t) * inner;
          double* dst = gx + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

/// Block-replicates the last axis: out[..., g*times + j] = x[..., g].
/// Expands grouped attention scores to per-channel scores.
inline Tensor repeat_channels(Tape& tape, const Tensor& x, std::size_t times) {
  detail::require(x.rank() >= 1, "repeat_channels: needs rank >= 1");
  if (times == 1) return x;
  const std::size_t groups = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / groups;
  Shape out_shape = x.shape();
  out_shape.back() = groups * times;
  Tensor out = detail::make_output(out_shape);
  const double* px = x.cdata();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < groups; ++g) {
      const double v = px[r * groups + g];
      double* dst = po + (r * groups + g) * times;
      for (std::size_t j = 0; j < times; ++j) dst[j] = v;
    }
  if (detail::track_output(tape, out, {&x})) {
    tape.record([x, out, rows, groups, times]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < groups; ++q) {
          const double* src = g + (r * groups + q) * times;
          double acc = 0.0;
          for (std::size_t j = 0; j < times; ++j) acc += src[j];
          gx[r * groups + q] += acc;
        }
    });
  }
  return out;
}

/// Concatenates along the last axis; all leading dims must match.
inline Tensor concat_last(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch");
  for (std::size_t i = 0; i + 1 < a.rank(); ++i)
    detail::require(a.dim(i) == b.dim(i), "concat_last: leading dims differ");
  const std::size_t da = a.dim(a.rank() - 1);
  const std::size_t db = b.dim(b.rank() - 1);
  const std::size_t rows = a.size() / da;
  Shape out_shape = a.shape();
  out_shape.back() = da + db;
  Tensor out = detail::make_output(out_shape);
  const double* pa = a.cdata();
  const double* pb = b.cdata();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(pa + r * da, da, po + r * (da + db));
    std::copy_n(pb + r * db, db, po + r * (da + db) + da);
  }
  if (detail::track_output(tape, out, {&a, &b})) {
    tape.record([a, b, out, rows, da, db]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < da; ++j) ga[r * da + j] += g[r * (da + db) + j];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < db; ++j) gb[r * db + j] += g[r * (da + db) + da + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-vector broadcasts over the last axis (BN plumbing)
// ---------------------------------------------------------------------------

inline Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
  detail::require(v.rank() == 1 && x.rank() >= 1 && x.dim(x.rank() - 1) == v.dim(0),
                  "add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t d = v.dim(0);
  const std::size_t rows = x.size() / d;
  Tensor out = detail::make_output(x.shape());
  const double* px = x.cdata();
  const double* pv = v.cdata();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pv[j];
  if (detail::track_output(tape, out, {&x, &v})) {
    tape.record([x, v, out, rows, d]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      if (x.requires_grad()) {
        double* gx = x.grad_buffer();
        for (std::size_t i = 0, n = out.size(); i < n; ++i) gx[i] += g[i];
      }
      if (v.requires_grad()) {
        double* gv = v.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
      }
    });
  }
  return out;
}

inline Tensor mul_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
  detail::require(v.rank() == 1 && x.rank() >= 1 && x.dim(x.rank() - 1) == v.dim(0),
                  "mul_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t d = v.dim(0);
  const std::size_t rows = x.size() / d;
  Tensor out = detail::make_output(x.shape());
  const double* px = x.cdata();
  const double* pv = v.cdata();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] * pv[j];
  if (detail::track_output(tape, out, {&x, &v})) {
    tape.record([x, v, out, rows, d]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      if (x.requires_grad()) {
        double* gx = x.grad_buffer();
        const double* pv2 = v.cdata();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * pv2[j];
      }
      if (v.requires_grad()) {
        double* gv = v.grad_buffer();
        const double* px2 = x.cdata();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j] * px2[r * d + j];
      }
    });
  }
  return out;
}

/// Per-channel mean over all leading positions: [..., D] -> [D].
inline Tensor channel_mean(Tape& tape, const Tensor& x) {
  detail::require(x.rank() >= 1, "channel_mean: needs rank >= 1");
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / d;
  Tensor out = detail::make_output({d});
  const double* px = x.cdata();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) po[j] += px[r * d + j];
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t j = 0; j < d; ++j) po[j] *= inv;
  if (detail::track_output(tape, out, {&x})) {
    tape.record([x, out, rows, d, inv]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.cgrad();
      double* gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradcheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Checks d f / d x against central differences. f must be scalar-valued and
/// deterministic (no dropout). Error metric per coordinate:
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename F>
GradcheckResult finite_diff_gradcheck(F&& f, Tensor x, double eps = 1e-5) {
  x.set_requires_grad(true);
  x.drop_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y0 = f(tape, x);
    if (y0.size() != 1) throw ContractError("finite_diff_gradcheck: f must be scalar-valued");
    Tape tape_check;
    Tensor y1 = f(tape_check, x);
    if (y0.value() != y1.value())
      throw ContractError("finite_diff_gradcheck: f is not deterministic");
    tape.backward(y0);
    analytic.assign(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.size(), 0.0);
  }
  GradcheckResult result;
  double* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = px[i];
    px[i] = saved + eps;
    Tape tp = Tape::inference();
    const double up = f(tp, x).value();
    px[i] = saved - eps;
    Tape tm = Tape::inference();
    const double down = f(tm, x).value();
    px[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) /
                       std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    if (err > result.max_rel_err) {
      result.max_rel_err = err;
      result.worst_index = i;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace gelatto
