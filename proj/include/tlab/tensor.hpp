#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>
#include <vector>

#include "tlab/common.hpp"

namespace tlab {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

/// Dense N-dimensional array, row major, NCHW for images. Values are
/// immutable once a tensor has entered a computation; the gradient buffer is
/// the only field backward() mutates.
template <typename T>
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
    Tape<T>* tape = nullptr;

    std::vector<T>& ensure_grad() {
      if (grad.empty()) grad.assign(values.size(), T(0));
      return grad;
    }
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    for (int d : shape)
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->values.assign(static_cast<size_t>(numel(shape)), v);
    t.impl_->shape = std::move(shape);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t = zeros(shape);
    t.impl_->values = std::move(data);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(impl_->values.size()); }

  const std::vector<T>& values() const { return impl_->values; }
  /// Mutable access is for filling freshly created tensors only.
  std::vector<T>& values() { return impl_->values; }
  const T* data() const { return impl_->values.data(); }
  T* data() { return impl_->values.data(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient; run backward first");
    return impl_->grad;
  }
  void clear_grad() {
    if (impl_) impl_->grad.clear();
  }

  /// Deep copy of the values (drops grad and tape attachment).
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->values = impl_->values;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t = Tensor<U>::zeros(impl_->shape);
    for (size_t i = 0; i < impl_->values.size(); ++i)
      t.values()[i] = static_cast<U>(impl_->values[i]);
    return t;
  }

  bool all_finite() const {
    for (T v : impl_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of executed differentiable operations. backward() replays
/// the record once, in reverse execution order, then detaches every tensor
/// it touched. A tape belongs to a single thread.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { detach_all(); }

  /// Marks a leaf whose gradient should be accumulated during backward.
  Tensor<T>& watch(Tensor<T>& t) {
    auto impl = t.impl();
    if (impl->tape && impl->tape != this)
      throw ContractError("tensor is already attached to another tape");
    impl->tape = this;
    impl->requires_grad = true;
    tracked_.push_back(impl);
    return t;
  }

  void record(const Tensor<T>& out, std::function<void()> backfn) {
    auto impl = out.impl();
    impl->tape = this;
    impl->requires_grad = true;
    tracked_.push_back(impl);
    nodes_.push_back(Node{impl, std::move(backfn)});
  }

  void backward(const Tensor<T>& loss) {
    if (consumed_) throw ContractError("backward called twice on one tape");
    if (loss.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (loss.impl()->tape != this)
      throw ContractError("loss was not produced by operations recorded on this tape");
    consumed_ = true;
    loss.impl()->ensure_grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // branch unused by the loss
      it->back();
    }
    detach_all();
  }

  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::shared_ptr<typename Tensor<T>::Impl> out;
    std::function<void()> back;
  };

  void detach_all() {
    for (auto& impl : tracked_) {
      impl->tape = nullptr;
      impl->requires_grad = false;
    }
    tracked_.clear();
    nodes_.clear();
  }

  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<typename Tensor<T>::Impl>> tracked_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Each op computes its value eagerly; if an input
// is attached to a tape the op records a backward rule there. Gradients are
// only accumulated into tensors that require them, so attack graphs skip all
// parameter gradients for free.
// ---------------------------------------------------------------------------

namespace ops {

template <typename T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    if (!t->defined()) continue;
    Tape<T>* tt = t->impl()->tape;
    if (!tt) continue;
    if (tape && tape != tt) throw ContractError("operation mixes tensors from two tapes");
    tape = tt;
  }
  return tape;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y.values()[i] = a.values()[i] + b.values()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    tp->record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y.values()[i] = a.values()[i] - b.values()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    tp->record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y.values()[i] = a.values()[i] * b.values()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &b})) {
    tp->record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->values[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->values[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  for (size_t i = 0; i < a.values().size(); ++i) y.values()[i] = a.values()[i] * c;
  if (Tape<T>* tp = tape_of<T>({&a})) {
    tp->record(y, [ai = a.impl(), yi = y.impl(), c] {
      if (!ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return y;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  for (size_t i = 0; i < a.values().size(); ++i) y.values()[i] = a.values()[i] + c;
  if (Tape<T>* tp = tape_of<T>({&a})) {
    tp->record(y, [ai = a.impl(), yi = y.impl()] {
      if (!ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return y;
}

/// a has shape [N, rest...], d has shape [1, rest...]; result is a[n] + d.
template <typename T>
Tensor<T> add_broadcast_batch(const Tensor<T>& a, const Tensor<T>& d) {
  if (a.ndim() != d.ndim() || d.dim(0) != 1)
    throw ShapeError("add_broadcast_batch: want [N,...] + [1,...], got " + shape_str(a.shape()) +
                     " + " + shape_str(d.shape()));
  for (int i = 1; i < a.ndim(); ++i)
    if (a.dim(i) != d.dim(i))
      throw ShapeError("add_broadcast_batch: trailing dims differ, " + shape_str(a.shape()) +
                       " vs " + shape_str(d.shape()));
  const size_t inner = d.values().size();
  const int n = a.dim(0);
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  for (int b = 0; b < n; ++b)
    for (size_t i = 0; i < inner; ++i)
      y.values()[b * inner + i] = a.values()[b * inner + i] + d.values()[i];
  if (Tape<T>* tp = tape_of<T>({&a, &d})) {
    tp->record(y, [ai = a.impl(), di = d.impl(), yi = y.impl(), inner, n] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (di->requires_grad) {
        auto& gd = di->ensure_grad();
        for (int b = 0; b < n; ++b)
          for (size_t i = 0; i < inner; ++i) gd[i] += g[b * inner + i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.values().size(); ++i) y.values()[i] = std::max(T(0), x.values()[i]);
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl()] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i)
        if (xi->values[i] > T(0)) gx[i] += g[i];
    });
  }
  return y;
}

/// Standard clamp: gradient passes only where the input was strictly inside
/// [lo, hi].
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.values().size(); ++i)
    y.values()[i] = std::min(hi, std::max(lo, x.values()[i]));
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), lo, hi] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i)
        if (xi->values[i] > lo && xi->values[i] < hi) gx[i] += g[i];
    });
  }
  return y;
}

/// Clamp whose backward is the identity. Keeps gradients alive at saturated
/// pixels inside attack graphs.
template <typename T>
Tensor<T> clamp_straight_through(const Tensor<T>& x, T lo, T hi) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.values().size(); ++i)
    y.values()[i] = std::min(hi, std::max(lo, x.values()[i]));
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl()] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

/// Elementwise max(x, lo); gradient passes where x > lo.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.values().size(); ++i) y.values()[i] = std::max(lo, x.values()[i]);
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), lo] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i)
        if (xi->values[i] > lo) gx[i] += g[i];
    });
  }
  return y;
}

/// Elementwise min(x, hi); gradient passes where x < hi.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& x, T hi) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.values().size(); ++i) y.values()[i] = std::min(hi, x.values()[i]);
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), hi] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i)
        if (xi->values[i] < hi) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> y = Tensor<T>::from(std::move(shape), x.values());
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl()] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

namespace detail {

// Scatter x into the [C*kh*kw, Ho*Wo] patch matrix for one image.
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            T* col) {
  for (int c = 0; c < C; ++c) {
    const T* xc = x + static_cast<size_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(row + static_cast<size_t>(oh) * Wo, row + static_cast<size_t>(oh + 1) * Wo,
                      T(0));
            continue;
          }
          const T* xrow = xc + static_cast<size_t>(ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            row[static_cast<size_t>(oh) * Wo + ow] = (iw >= 0 && iw < W) ? xrow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                  int Wo, T* gx) {
  for (int c = 0; c < C; ++c) {
    T* gc = gx + static_cast<size_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* grow = gc + static_cast<size_t>(ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) grow[iw] += row[static_cast<size_t>(oh) * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, NCHW. Output size must divide exactly.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int padding) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: want x[B,C,H,W], w[K,C,kh,kw], got x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: channel mismatch, x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()));
  if (bias.ndim() != 1 || bias.dim(0) != K)
    throw ShapeError("conv2d: bias must be [K]=" + std::to_string(K) + ", got " +
                     shape_str(bias.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (kh > H + 2 * padding || kw > W + 2 * padding)
    throw ShapeError("conv2d: kernel larger than padded input, x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()));
  if ((H + 2 * padding - kh) % stride != 0 || (W + 2 * padding - kw) % stride != 0)
    throw ShapeError("conv2d: output size is not an exact division for x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()) + " stride=" + std::to_string(stride) +
                     " pad=" + std::to_string(padding));
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  const int F = C * kh * kw;
  const int O = Ho * Wo;

  Tensor<T> y = Tensor<T>::zeros({B, K, Ho, Wo});
  std::vector<T> col(static_cast<size_t>(F) * O);
  for (int b = 0; b < B; ++b) {
    detail::im2col(x.data() + static_cast<size_t>(b) * C * H * W, C, H, W, kh, kw, stride, padding,
                   Ho, Wo, col.data());
    T* yb = y.data() + static_cast<size_t>(b) * K * O;
    for (int k = 0; k < K; ++k) {
      T* yk = yb + static_cast<size_t>(k) * O;
      std::fill(yk, yk + O, bias.values()[static_cast<size_t>(k)]);
      const T* wk = w.data() + static_cast<size_t>(k) * F;
      for (int f = 0; f < F; ++f) {
        const T wv = wk[f];
        if (wv == T(0)) continue;
        const T* cf = col.data() + static_cast<size_t>(f) * O;
        for (int o = 0; o < O; ++o) yk[o] += wv * cf[o];
      }
    }
  }

  if (Tape<T>* tp = tape_of<T>({&x, &w, &bias})) {
    tp->record(y, [xi = x.impl(), wi = w.impl(), bi = bias.impl(), yi = y.impl(), B, C, H, W, K,
                   kh, kw, stride, padding, Ho, Wo, F, O] {
      const auto& g = yi->grad;
      std::vector<T> col(static_cast<size_t>(F) * O);
      std::vector<T> dcol;
      if (xi->requires_grad) dcol.resize(static_cast<size_t>(F) * O);
      const bool need_x = xi->requires_grad;
      const bool need_w = wi->requires_grad;
      const bool need_b = bi->requires_grad;
      auto* gx = need_x ? xi->ensure_grad().data() : nullptr;
      auto* gw = need_w ? wi->ensure_grad().data() : nullptr;
      auto* gb = need_b ? bi->ensure_grad().data() : nullptr;
      for (int b = 0; b < B; ++b) {
        if (need_w || need_x)
          detail::im2col(xi->values.data() + static_cast<size_t>(b) * C * H * W, C, H, W, kh, kw,
                         stride, padding, Ho, Wo, col.data());
        const T* gyb = g.data() + static_cast<size_t>(b) * K * O;
        if (need_b) {
          for (int k = 0; k < K; ++k) {
            T acc = T(0);
            const T* gk = gyb + static_cast<size_t>(k) * O;
            for (int o = 0; o < O; ++o) acc += gk[o];
            gb[k] += acc;
          }
        }
        if (need_w) {
          for (int k = 0; k < K; ++k) {
            const T* gk = gyb + static_cast<size_t>(k) * O;
            T* gwk = gw + static_cast<size_t>(k) * F;
            for (int f = 0; f < F; ++f) {
              const T* cf = col.data() + static_cast<size_t>(f) * O;
              T acc = T(0);
              for (int o = 0; o < O; ++o) acc += gk[o] * cf[o];
              gwk[f] += acc;
            }
          }
        }
        if (need_x) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          for (int k = 0; k < K; ++k) {
            const T* gk = gyb + static_cast<size_t>(k) * O;
            const T* wk = wi->values.data() + static_cast<size_t>(k) * F;
            for (int f = 0; f < F; ++f) {
              const T wv = wk[f];
              if (wv == T(0)) continue;
              T* df = dcol.data() + static_cast<size_t>(f) * O;
              for (int o = 0; o < O; ++o) df[o] += wv * gk[o];
            }
          }
          detail::col2im_accum(dcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                               gx + static_cast<size_t>(b) * C * H * W);
        }
      }
    });
  }
  return y;
}

/// y = x · wᵀ + b with x[B,F], w[O,F], b[O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.ndim() != 2 || w.ndim() != 2)
    throw ShapeError("linear: want x[B,F], w[O,F], got x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()));
  const int B = x.dim(0), F = x.dim(1), O = w.dim(0);
  if (w.dim(1) != F)
    throw ShapeError("linear: feature mismatch, x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()));
  if (bias.ndim() != 1 || bias.dim(0) != O)
    throw ShapeError("linear: bias must be [O]=" + std::to_string(O) + ", got " +
                     shape_str(bias.shape()));
  Tensor<T> y = Tensor<T>::zeros({B, O});
  for (int b = 0; b < B; ++b) {
    const T* xb = x.data() + static_cast<size_t>(b) * F;
    T* yb = y.data() + static_cast<size_t>(b) * O;
    for (int o = 0; o < O; ++o) {
      const T* wo = w.data() + static_cast<size_t>(o) * F;
      T acc = bias.values()[static_cast<size_t>(o)];
      for (int f = 0; f < F; ++f) acc += xb[f] * wo[f];
      yb[o] = acc;
    }
  }
  if (Tape<T>* tp = tape_of<T>({&x, &w, &bias})) {
    tp->record(y, [xi = x.impl(), wi = w.impl(), bi = bias.impl(), yi = y.impl(), B, F, O] {
      const auto& g = yi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        for (int b = 0; b < B; ++b)
          for (int o = 0; o < O; ++o) {
            const T gv = g[static_cast<size_t>(b) * O + o];
            if (gv == T(0)) continue;
            const T* wo = wi->values.data() + static_cast<size_t>(o) * F;
            T* gxb = gx.data() + static_cast<size_t>(b) * F;
            for (int f = 0; f < F; ++f) gxb[f] += gv * wo[f];
          }
      }
      if (wi->requires_grad) {
        auto& gw = wi->ensure_grad();
        for (int b = 0; b < B; ++b)
          for (int o = 0; o < O; ++o) {
            const T gv = g[static_cast<size_t>(b) * O + o];
            if (gv == T(0)) continue;
            const T* xb = xi->values.data() + static_cast<size_t>(b) * F;
            T* gwo = gw.data() + static_cast<size_t>(o) * F;
            for (int f = 0; f < F; ++f) gwo[f] += gv * xb[f];
          }
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (int b = 0; b < B; ++b)
          for (int o = 0; o < O; ++o) gb[static_cast<size_t>(o)] += g[static_cast<size_t>(b) * O + o];
      }
    });
  }
  return y;
}

/// Window max with stride == window; ties go to the first element scanned.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k) {
  if (x.ndim() != 4) throw ShapeError("maxpool2d: want [B,C,H,W], got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || H % k != 0 || W % k != 0)
    throw ShapeError("maxpool2d: window " + std::to_string(k) + " must divide spatial dims of " +
                     shape_str(x.shape()));
  const int Ho = H / k, Wo = W / k;
  Tensor<T> y = Tensor<T>::zeros({B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(B) * C * Ho * Wo);
  size_t oi = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xc = x.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          int best_idx = 0;
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const int idx = (oh * k + i) * W + (ow * k + j);
              if (xc[idx] > best) {
                best = xc[idx];
                best_idx = idx;
              }
            }
          y.values()[oi] = best;
          (*argmax)[oi] = best_idx;
        }
    }
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), argmax, B, C, H, W, Ho, Wo] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      size_t oi = 0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          T* gc = gx.data() + (static_cast<size_t>(b) * C + c) * H * W;
          for (int o = 0; o < Ho * Wo; ++o, ++oi) gc[(*argmax)[oi]] += g[oi];
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k) {
  if (x.ndim() != 4) throw ShapeError("avgpool2d: want [B,C,H,W], got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || H % k != 0 || W % k != 0)
    throw ShapeError("avgpool2d: window " + std::to_string(k) + " must divide spatial dims of " +
                     shape_str(x.shape()));
  const int Ho = H / k, Wo = W / k;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> y = Tensor<T>::zeros({B, C, Ho, Wo});
  size_t oi = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xc = x.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow, ++oi) {
          T acc = T(0);
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) acc += xc[(oh * k + i) * W + (ow * k + j)];
          y.values()[oi] = acc * inv;
        }
    }
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), B, C, H, W, Ho, Wo, k, inv] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      size_t oi = 0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          T* gc = gx.data() + (static_cast<size_t>(b) * C + c) * H * W;
          for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow, ++oi) {
              const T gv = g[oi] * inv;
              for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) gc[(oh * k + i) * W + (ow * k + j)] += gv;
            }
        }
    });
  }
  return y;
}

/// Log of softmax along the class axis of [B, K], max-shifted for stability.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.ndim() != 2) throw ShapeError("log_softmax: want [B,classes], got " + shape_str(x.shape()));
  const int B = x.dim(0), K = x.dim(1);
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (int b = 0; b < B; ++b) {
    const T* xb = x.data() + static_cast<size_t>(b) * K;
    T* yb = y.data() + static_cast<size_t>(b) * K;
    T m = xb[0];
    for (int j = 1; j < K; ++j) m = std::max(m, xb[j]);
    T sum = T(0);
    for (int j = 0; j < K; ++j) sum += std::exp(xb[j] - m);
    const T lse = m + std::log(sum);
    for (int j = 0; j < K; ++j) yb[j] = xb[j] - lse;
  }
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), B, K] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (int b = 0; b < B; ++b) {
        const T* yb = yi->values.data() + static_cast<size_t>(b) * K;
        const T* gb = g.data() + static_cast<size_t>(b) * K;
        T gsum = T(0);
        for (int j = 0; j < K; ++j) gsum += gb[j];
        T* gxb = gx.data() + static_cast<size_t>(b) * K;
        for (int j = 0; j < K; ++j) gxb[j] += gb[j] - std::exp(yb[j]) * gsum;
      }
    });
  }
  return y;
}

/// Mean over the batch of -log_probs[b, labels[b]].
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, const std::vector<int32_t>& labels) {
  if (log_probs.ndim() != 2)
    throw ShapeError("nll_loss: want [B,classes], got " + shape_str(log_probs.shape()));
  const int B = log_probs.dim(0), K = log_probs.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(B));
  T acc = T(0);
  for (int b = 0; b < B; ++b) {
    const int32_t y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= K)
      throw IndexError("nll_loss: label " + std::to_string(y) + " outside [0," + std::to_string(K) +
                       ") at batch index " + std::to_string(b));
    acc -= log_probs.values()[static_cast<size_t>(b) * K + y];
  }
  Tensor<T> out = Tensor<T>::from({1}, {acc / static_cast<T>(B)});
  if (Tape<T>* tp = tape_of<T>({&log_probs})) {
    tp->record(out, [li = log_probs.impl(), oi = out.impl(), labels, B, K] {
      if (!li->requires_grad) return;
      auto& gl = li->ensure_grad();
      const T g = oi->grad[0] / static_cast<T>(B);
      for (int b = 0; b < B; ++b)
        gl[static_cast<size_t>(b) * K + labels[static_cast<size_t>(b)]] -= g;
    });
  }
  return out;
}

/// out[b] = x[b, labels[b]] for x[B,K].
template <typename T>
Tensor<T> gather_classes(const Tensor<T>& x, const std::vector<int32_t>& labels) {
  if (x.ndim() != 2) throw ShapeError("gather_classes: want [B,K], got " + shape_str(x.shape()));
  const int B = x.dim(0), K = x.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("gather_classes: label count mismatch");
  Tensor<T> y = Tensor<T>::zeros({B});
  for (int b = 0; b < B; ++b) {
    const int32_t c = labels[static_cast<size_t>(b)];
    if (c < 0 || c >= K) throw IndexError("gather_classes: label out of range");
    y.values()[static_cast<size_t>(b)] = x.values()[static_cast<size_t>(b) * K + c];
  }
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), labels, K] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t b = 0; b < g.size(); ++b) gx[b * K + labels[b]] += g[b];
    });
  }
  return y;
}

/// out[b] = max over classes j != labels[b] of x[b,j]; gradient flows to the
/// winning class (first index on ties).
template <typename T>
Tensor<T> max_excluding(const Tensor<T>& x, const std::vector<int32_t>& labels) {
  if (x.ndim() != 2) throw ShapeError("max_excluding: want [B,K], got " + shape_str(x.shape()));
  const int B = x.dim(0), K = x.dim(1);
  if (K < 2) throw ShapeError("max_excluding: needs at least 2 classes");
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("max_excluding: label count mismatch");
  Tensor<T> y = Tensor<T>::zeros({B});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    const int32_t skip = labels[static_cast<size_t>(b)];
    if (skip < 0 || skip >= K) throw IndexError("max_excluding: label out of range");
    const T* xb = x.data() + static_cast<size_t>(b) * K;
    T best = -std::numeric_limits<T>::infinity();
    int best_j = -1;
    for (int j = 0; j < K; ++j) {
      if (j == skip) continue;
      if (xb[j] > best) {
        best = xb[j];
        best_j = j;
      }
    }
    y.values()[static_cast<size_t>(b)] = best;
    (*argmax)[static_cast<size_t>(b)] = best_j;
  }
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), argmax, K] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const auto& g = yi->grad;
      for (size_t b = 0; b < g.size(); ++b) gx[b * K + (*argmax)[b]] += g[b];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  Tensor<T> y = Tensor<T>::from({1}, {acc});
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl()] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const T g = yi->grad[0];
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  Tensor<T> y = Tensor<T>::from({1}, {acc * inv});
  if (Tape<T>* tp = tape_of<T>({&x})) {
    tp->record(y, [xi = x.impl(), yi = y.impl(), inv] {
      if (!xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const T g = yi->grad[0] * inv;
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

}  // namespace ops

}  // namespace tlab
