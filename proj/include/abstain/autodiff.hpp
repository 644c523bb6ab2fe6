#pragma once

// Reverse-mode differentiation over a closed operation set: exactly the ops the
// segmenter and the loss functions need, with explicit shapes and no broadcasting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abstain/error.hpp"
#include "abstain/tensor.hpp"

namespace abstain::ad {

class Tape;

using BackwardFn = std::function<void(Tape&, std::size_t self)>;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of a computation. Node ids are assigned in creation order,
/// which is already a topological order of the DAG.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad, "leaf"});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op result. The node requires grad iff any input does; otherwise the
  // backward rule is dropped.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool rg = false;
    for (auto in : inputs) rg = rg || nodes_.at(in).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), rg ? std::move(backward) : BackwardFn{}, rg, op});
    return Var(this, nodes_.size() - 1);
  }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node that requires grad.
  // Each node's backward rule runs at most once per call.
  void backward(Var root) {
    const auto r = root.id();
    if (nodes_.at(r).value.size() != 1) {
      throw DimensionError("backward: root must be a scalar, got shape " + shape_str(nodes_[r].value.shape()));
    }
    std::vector<char> reachable(r + 1, 0);
    reachable[r] = 1;
    for (std::size_t i = r + 1; i-- > 0;) {
      if (!reachable[i] || !nodes_[i].requires_grad) continue;
      for (auto in : nodes_[i].inputs) reachable[in] = 1;
    }
    visits_.assign(nodes_.size(), 0);
    grad_mut(r).fill(1.0);
    for (std::size_t i = r + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!reachable[i] || !n.requires_grad) continue;
      ++visits_[i];
      if (n.backward) n.backward(*this, i);
    }
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  // Gradient buffer; zero-filled on first access.
  const Tensor& grad(std::size_t id) const { return const_cast<Tape*>(this)->grad_mut(id); }

  Tensor& grad_mut(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  const char* op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Per-node count of backward visits during the last backward() call.
  const std::vector<std::size_t>& visit_counts() const noexcept { return visits_; }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor{};
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
    const char* op;
  };
  std::deque<Node> nodes_;  // stable references: values stay valid while the tape grows
  std::vector<std::size_t> visits_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void same_tape(const char* op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

inline void same_shape(const char* op, const Var& a, const Var& b) {
  same_tape(op, a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size()) throw DimensionError(op, "rank", sa.size(), sb.size());
  static const char* names[] = {"0", "1", "2", "3", "4", "5", "6", "7"};
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) throw DimensionError(op, i < 8 ? names[i] : "n", sa[i], sb[i]);
  }
}

inline void require_rank(const char* op, const Var& v, std::size_t rank) {
  if (v.shape().size() != rank) throw DimensionError(op, "rank", rank, v.shape().size());
}

// Elementwise unary op with derivative expressed in terms of (input, output).
template <class Fwd, class Deriv>
Var unary(const char* op, Var a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto in = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  const auto ia = a.id();
  return a.tape().record(op, std::move(out), {ia}, [ia, deriv](Tape& t, std::size_t self) {
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  detail::same_shape("add", a, b);
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& gx = t.grad_mut(id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape("sub", a, b);
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::same_shape("mul", a, b);
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// Elementwise a / b. The caller keeps b away from zero (loss code clamps first).
inline Var div(Var a, Var b) {
  detail::same_shape("div", a, b);
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (bv[i] == 0.0) throw DomainError("div", i, bv[i]);
    out[i] /= bv[i];
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("div", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& bv = t.value(ib);
    const auto& y = t.value(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_mut(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

// 1 - a, the recurring "probability of not abstaining" form.
inline Var one_minus(Var a) {
  return detail::unary("one_minus", a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

// a^e for a >= 0 (a > 0 when e < 1).
inline Var pow_scalar(Var a, double e) {
  const auto& v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0 || (e < 1.0 && v[i] == 0.0)) throw DomainError("pow", i, v[i]);
  }
  return detail::unary(
      "pow", a, [e](double x) { return std::pow(x, e); }, [e](double x, double) { return e * std::pow(x, e - 1.0); });
}

// Natural log; strictly positive input required. No clamping happens here.
inline Var log(Var a) {
  const auto& v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0)) throw DomainError("log", i, v[i]);
  }
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// |a|; the derivative at exactly 0 is taken as 0.
inline Var abs(Var a) {
  return detail::unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// max(a, lo); passes gradient where a >= lo.
inline Var clamp_min(Var a, double lo) {
  return detail::unary(
      "clamp_min", a, [lo](double x) { return x < lo ? lo : x; }, [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

inline Var reduce_sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape().record("reduce_sum", Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

inline Var reduce_mean(Var a) {
  const auto n = a.value().size();
  if (n == 0) throw DimensionError("reduce_mean: empty tensor");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape().record("reduce_mean", Tensor::scalar(s / static_cast<double>(n)), {ia},
                         [ia, n](Tape& t, std::size_t self) {
                           const double g = t.grad(self)[0] / static_cast<double>(n);
                           auto& gx = t.grad_mut(ia);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                         });
}

// [b, c, h, w] -> [c]: sum over batch and pixels for each channel.
inline Var channel_sum(Var a) {
  detail::require_rank("channel_sum", a, 4);
  const auto& s = a.shape();
  const std::size_t nb = s[0], nc = s[1], plane = s[2] * s[3];
  Tensor out(Shape{nc});
  const auto& x = a.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const double* p = x.data().data() + (b * nc + c) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out[c] += acc;
    }
  const auto ia = a.id();
  return a.tape().record("channel_sum", std::move(out), {ia}, [ia, nb, nc, plane](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t c = 0; c < nc; ++c) {
        double* p = gx.data().data() + (b * nc + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += g[c];
      }
  });
}

// [b, n] -> [n]: mean over the batch axis.
inline Var batch_mean(Var a) {
  detail::require_rank("batch_mean", a, 2);
  const std::size_t nb = a.shape()[0], n = a.shape()[1];
  Tensor out(Shape{n});
  const auto& x = a.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[b * n + j];
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(nb);
  const auto ia = a.id();
  return a.tape().record("batch_mean", std::move(out), {ia}, [ia, nb, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t j = 0; j < n; ++j) gx[b * n + j] += g[j] / static_cast<double>(nb);
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.tape().record("reshape", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

// [b, c, h, w] -> [b, c*h*w], channel-major.
inline Var flatten(Var a) {
  detail::require_rank("flatten", a, 4);
  const auto& s = a.shape();
  return reshape(a, Shape{s[0], s[1] * s[2] * s[3]});
}

// [b, c, h, w] -> [b, count, h, w] taking channels [start, start + count).
inline Var slice_channels(Var a, std::size_t start, std::size_t count) {
  detail::require_rank("slice_channels", a, 4);
  const auto& s = a.shape();
  if (start + count > s[1] || count == 0) throw DimensionError("slice_channels", "channel", s[1], start + count);
  const std::size_t nb = s[0], nc = s[1], plane = s[2] * s[3];
  Tensor out(Shape{nb, count, s[2], s[3]});
  const auto& x = a.value();
  for (std::size_t b = 0; b < nb; ++b)
    std::copy_n(x.data().data() + (b * nc + start) * plane, count * plane, out.data().data() + b * count * plane);
  const auto ia = a.id();
  return a.tape().record("slice_channels", std::move(out), {ia},
                         [ia, nb, nc, plane, start, count](Tape& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad_mut(ia);
                           for (std::size_t b = 0; b < nb; ++b) {
                             const double* src = g.data().data() + b * count * plane;
                             double* dst = gx.data().data() + (b * nc + start) * plane;
                             for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Network ops

// Per-pixel softmax over the channel axis of a [b, c, h, w] tensor (c >= 2).
inline Var softmax_channel(Var logits) {
  detail::require_rank("softmax_channel", logits, 4);
  const auto& s = logits.shape();
  if (s[1] < 2) throw DimensionError("softmax_channel", "channel", 2, s[1]);
  const std::size_t nb = s[0], nc = s[1], plane = s[2] * s[3];
  const auto& x = logits.value();
  Tensor out(s);
  std::vector<double> mx(plane), den(plane);
  for (std::size_t b = 0; b < nb; ++b) {
    const double* xb = x.data().data() + b * nc * plane;
    double* ob = out.data().data() + b * nc * plane;
    std::copy_n(xb, plane, mx.begin());
    for (std::size_t c = 1; c < nc; ++c)
      for (std::size_t i = 0; i < plane; ++i) mx[i] = std::max(mx[i], xb[c * plane + i]);
    std::fill(den.begin(), den.end(), 0.0);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double e = std::exp(xb[c * plane + i] - mx[i]);
        ob[c * plane + i] = e;
        den[i] += e;
      }
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < plane; ++i) ob[c * plane + i] /= den[i];
  }
  const auto ia = logits.id();
  return logits.tape().record("softmax_channel", std::move(out), {ia}, [ia, nb, nc, plane](Tape& t, std::size_t self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    std::vector<double> dot(plane);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t off = b * nc * plane;
      std::fill(dot.begin(), dot.end(), 0.0);
      for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t i = 0; i < plane; ++i) dot[i] += g[off + c * plane + i] * y[off + c * plane + i];
      for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const auto j = off + c * plane + i;
          gx[j] += y[j] * (g[j] - dot[i]);
        }
    }
  });
}

// Probability of each pixel's labelled class: [b, c, h, w] x labels[b, h, w] -> [b, 1, h, w].
inline Var gather_class(Var probs, const LabelMask& labels) {
  detail::require_rank("gather_class", probs, 4);
  const auto& s = probs.shape();
  if (labels.batch() != s[0]) throw DimensionError("gather_class", "batch", s[0], labels.batch());
  if (labels.height() != s[2]) throw DimensionError("gather_class", "height", s[2], labels.height());
  if (labels.width() != s[3]) throw DimensionError("gather_class", "width", s[3], labels.width());
  const std::size_t nb = s[0], nc = s[1], plane = s[2] * s[3];
  std::vector<std::size_t> index(nb * plane);
  Tensor out(Shape{nb, 1, s[2], s[3]});
  const auto& p = probs.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t c = labels[b * plane + i];
      if (c >= nc) throw RangeError("gather_class: label " + std::to_string(c) + " at pixel " + std::to_string(b * plane + i) +
                                    " outside [0," + std::to_string(nc) + ")");
      index[b * plane + i] = (b * nc + c) * plane + i;
      out[b * plane + i] = p[index[b * plane + i]];
    }
  const auto ia = probs.id();
  return probs.tape().record("gather_class", std::move(out), {ia}, [ia, index = std::move(index)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    for (std::size_t j = 0; j < index.size(); ++j) gx[index[j]] += g[j];
  });
}

/// Same-size cross-correlation with a square kernel of side 3 (zero padding 1) or
/// side 1 (no padding), stride 1.
/// input [b, c_in, h, w], weight [c_out, c_in, k, k], bias [c_out] -> [b, c_out, h, w].
inline Var conv2d(Var input, Var weight, Var bias) {
  detail::same_tape("conv2d", input, weight);
  detail::same_tape("conv2d", input, bias);
  detail::require_rank("conv2d", input, 4);
  detail::require_rank("conv2d", weight, 4);
  detail::require_rank("conv2d", bias, 1);
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  const std::size_t nb = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  if (ws[1] != cin) throw DimensionError("conv2d", "in_channels", cin, ws[1]);
  if (k != 3 && k != 1) throw DimensionError("conv2d", "kernel_height", 3, k);
  if (ws[3] != k) throw DimensionError("conv2d", "kernel_width", k, ws[3]);
  if (bias.shape()[0] != cout) throw DimensionError("conv2d", "out_channels", cout, bias.shape()[0]);
  const long pad = static_cast<long>(k / 2);

  // Visits every (output pixel, input pixel, weight) triple of the correlation. Rows are
  // clipped to the valid range once per (ky, kx) so the inner loop is branch-free.
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      const long dy = static_cast<long>(ky) - pad;
      const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
      const std::size_t y1 = static_cast<std::size_t>(std::min(static_cast<long>(h), static_cast<long>(h) - dy));
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long dx = static_cast<long>(kx) - pad;
        const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
        const std::size_t x1 = static_cast<std::size_t>(std::min(static_cast<long>(w), static_cast<long>(w) - dx));
        for (std::size_t y = y0; y < y1; ++y) {
          const std::size_t yi = static_cast<std::size_t>(static_cast<long>(y) + dy);
          body(ky, kx, y * w + x0, yi * w + static_cast<std::size_t>(static_cast<long>(x0) + dx), x1 - x0);
        }
      }
    }
  };

  Tensor out(Shape{nb, cout, h, w});
  {
    const double* X = input.value().data().data();
    const double* W = weight.value().data().data();
    const double* B = bias.value().data().data();
    double* O = out.data().data();
    const std::size_t plane = h * w;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        double* o = O + (b * cout + co) * plane;
        std::fill(o, o + plane, B[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double* x = X + (b * cin + ci) * plane;
          const double* wk = W + (co * cin + ci) * k * k;
          for_each_tap([&](std::size_t ky, std::size_t kx, std::size_t oo, std::size_t io, std::size_t len) {
            const double wv = wk[ky * k + kx];
            for (std::size_t j = 0; j < len; ++j) o[oo + j] += wv * x[io + j];
          });
        }
      }
  }
  const auto ix = input.id(), iw = weight.id(), ib = bias.id();
  return input.tape().record(
      "conv2d", std::move(out), {ix, iw, ib}, [=](Tape& t, std::size_t self) {
        const std::size_t plane = h * w;
        const double* G = t.grad(self).data().data();
        const double* X = t.value(ix).data().data();
        const double* W = t.value(iw).data().data();
        if (t.requires_grad(ib)) {
          double* gb = t.grad_mut(ib).data().data();
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
              const double* g = G + (b * cout + co) * plane;
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += g[i];
              gb[co] += acc;
            }
        }
        const bool need_w = t.requires_grad(iw), need_x = t.requires_grad(ix);
        double* GW = need_w ? t.grad_mut(iw).data().data() : nullptr;
        double* GX = need_x ? t.grad_mut(ix).data().data() : nullptr;
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t co = 0; co < cout; ++co) {
            const double* g = G + (b * cout + co) * plane;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* x = X + (b * cin + ci) * plane;
              const double* wk = W + (co * cin + ci) * k * k;
              double* gwk = need_w ? GW + (co * cin + ci) * k * k : nullptr;
              double* gx = need_x ? GX + (b * cin + ci) * plane : nullptr;
              for_each_tap([&](std::size_t ky, std::size_t kx, std::size_t oo, std::size_t io, std::size_t len) {
                if (need_w) {
                  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
                  for (std::size_t j = 0; j < len; ++j) acc += g[oo + j] * x[io + j];
                  gwk[ky * k + kx] += acc;
                }
                if (need_x) {
                  const double wv = wk[ky * k + kx];
                  for (std::size_t j = 0; j < len; ++j) gx[io + j] += wv * g[oo + j];
                }
              });
            }
          }
      });
}

// Affine map: input [b, n], weight [m, n], bias [m] -> [b, m].
inline Var linear(Var input, Var weight, Var bias) {
  detail::same_tape("linear", input, weight);
  detail::same_tape("linear", input, bias);
  detail::require_rank("linear", input, 2);
  detail::require_rank("linear", weight, 2);
  detail::require_rank("linear", bias, 1);
  const std::size_t nb = input.shape()[0], n = input.shape()[1], m = weight.shape()[0];
  if (weight.shape()[1] != n) throw DimensionError("linear", "in_features", n, weight.shape()[1]);
  if (bias.shape()[0] != m) throw DimensionError("linear", "out_features", m, bias.shape()[0]);
  const auto& X = input.value();
  const auto& W = weight.value();
  const auto& B = bias.value();
  Tensor out(Shape{nb, m});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      double acc = B[i];
      for (std::size_t j = 0; j < n; ++j) acc += W[i * n + j] * X[b * n + j];
      out[b * m + i] = acc;
    }
  const auto ix = input.id(), iw = weight.id(), ib = bias.id();
  return input.tape().record("linear", std::move(out), {ix, iw, ib}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& X = t.value(ix);
    const auto& W = t.value(iw);
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_mut(ib);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < m; ++i) gb[i] += g[b * m + i];
    }
    if (t.requires_grad(iw)) {
      auto& gw = t.grad_mut(iw);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += g[b * m + i] * X[b * n + j];
    }
    if (t.requires_grad(ix)) {
      auto& gx = t.grad_mut(ix);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[b * n + j] += g[b * m + i] * W[i * n + j];
    }
  });
}

// Adaptive average pooling to an out x out grid. Cell i spans input rows
// [floor(i*h/out), floor((i+1)*h/out)), same for columns.
inline Var adaptive_avg_pool(Var input, std::size_t out_size) {
  detail::require_rank("adaptive_avg_pool", input, 4);
  const auto& s = input.shape();
  const std::size_t nb = s[0], nc = s[1], h = s[2], w = s[3];
  if (out_size < 1 || out_size > std::min(h, w)) {
    throw ConfigError("adaptive_avg_pool: output size " + std::to_string(out_size) + " outside [1, " +
                      std::to_string(std::min(h, w)) + "]");
  }
  auto lo = [](std::size_t i, std::size_t n, std::size_t o) { return i * n / o; };
  const auto& x = input.value();
  Tensor out(Shape{nb, nc, out_size, out_size});
  for (std::size_t bc = 0; bc < nb * nc; ++bc)
    for (std::size_t oy = 0; oy < out_size; ++oy)
      for (std::size_t ox = 0; ox < out_size; ++ox) {
        const std::size_t y0 = lo(oy, h, out_size), y1 = lo(oy + 1, h, out_size);
        const std::size_t x0 = lo(ox, w, out_size), x1 = lo(ox + 1, w, out_size);
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(bc * h + y) * w + xx];
        out[(bc * out_size + oy) * out_size + ox] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  const auto ia = input.id();
  return input.tape().record("adaptive_avg_pool", std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_mut(ia);
    for (std::size_t bc = 0; bc < nb * nc; ++bc)
      for (std::size_t oy = 0; oy < out_size; ++oy)
        for (std::size_t ox = 0; ox < out_size; ++ox) {
          const std::size_t y0 = lo(oy, h, out_size), y1 = lo(oy + 1, h, out_size);
          const std::size_t x0 = lo(ox, w, out_size), x1 = lo(ox + 1, w, out_size);
          const double share = g[(bc * out_size + oy) * out_size + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx) gx[(bc * h + y) * w + xx] += share;
        }
  });
}

}  // namespace abstain::ad
