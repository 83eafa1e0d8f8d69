#pragma once

// Minimal reverse-mode automatic differentiation over (channels, height, width) tensors.
//
// A Tape owns every value produced during one forward pass. Tensors are lightweight handles
// (tape pointer + node index). Nodes are appended in execution order, so the reverse of the
// node list is a valid topological order for the backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "endodepth/errors.hpp"
#include "endodepth/raster.hpp"

namespace endodepth {

struct Shape {
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const noexcept { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  bool is_scalar() const noexcept { return c == 1 && h == 1 && w == 1; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> values() const;
  std::span<const double> grad() const;
  double item() const;
  /// Copies a single-channel tensor into a raster.
  Raster<double> to_raster() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    std::string op;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameters, or anything a gradient is wanted for).
  Tensor variable(Shape shape, std::vector<double> values, std::string op = "variable") {
    return push(std::move(op), shape, std::move(values), {}, nullptr, true);
  }
  Tensor variable(const Raster<double>& r) { return variable({1, r.height(), r.width()}, r.data()); }
  /// Non-differentiable input.
  Tensor constant(Shape shape, std::vector<double> values, std::string op = "constant") {
    return push(std::move(op), shape, std::move(values), {}, nullptr, false);
  }
  Tensor constant(const Raster<double>& r) { return constant({1, r.height(), r.width()}, r.data()); }
  Tensor scalar(double v) { return constant({}, {v}); }

  /// Records an op. The backward callback reads node(self).grad and accumulates into inputs.
  Tensor record(std::string op, Shape shape, std::vector<double> value, std::vector<std::size_t> inputs,
                Backward backward) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    return push(std::move(op), shape, std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr,
                needs);
  }

  /// Seeds d(output)/d(output) = 1 and propagates to every node that requires a gradient.
  void backward(const Tensor& output) {
    if (!node(output.id()).shape.is_scalar()) throw ShapeError("backward() needs a scalar output");
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
      else n.grad.clear();
    }
    auto& out = node(output.id());
    if (!out.requires_grad) return;
    out.grad[0] = 1.0;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::size_t count_op(std::string_view op) const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.op == op; }));
  }

 private:
  Tensor push(std::string op, Shape shape, std::vector<double> value, std::vector<std::size_t> inputs, Backward bw,
              bool requires_grad) {
    if (value.size() != shape.numel())
      throw ShapeError(op + ": value count " + std::to_string(value.size()) + " does not match shape " + shape.str());
    for (std::size_t i = 0; i < value.size(); ++i) {
      if (!std::isfinite(value[i]))
        throw NumericalError("non-finite value produced by op '" + op + "' at element " + std::to_string(i));
    }
    nodes_.push_back(Node{std::move(op), shape, std::move(value), {}, std::move(inputs), std::move(bw), requires_grad});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
inline std::span<const double> Tensor::values() const { return tape_->node(id_).value; }
inline std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }
inline double Tensor::item() const {
  if (!shape().is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape().str());
  return values()[0];
}
inline Raster<double> Tensor::to_raster() const {
  if (shape().c != 1) throw ShapeError("to_raster() needs a single-channel tensor, got " + shape().str());
  return {shape().w, shape().h, std::vector<double>(values().begin(), values().end())};
}

namespace ops {

namespace detail {

inline void require_same_tape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (&a.tape() != &b.tape()) throw ShapeError(std::string(op) + ": tensors live on different tapes");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  require_same_tape(a, b, op);
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

// Accumulate into an input's gradient only if it takes part in differentiation.
inline double* grad_of(Tape& t, std::size_t id) {
  return t.requires_grad(id) ? t.node(id).grad.data() : nullptr;
}

template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& x, std::string op, Fwd f, Dfdx dfdx) {
  Tape& t = x.tape();
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return t.record(std::move(op), x.shape(), std::move(out), {xi}, [xi, dfdx](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    const auto& in = tp.node(xi).value;
    const auto& outv = tp.node(self).value;
    double* gx = grad_of(tp, xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(in[i], outv[i]);
  });
}

// Elementwise binary op; b may be a scalar broadcast over a.
template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, std::string op, Fwd f, Da dfda, Db dfdb) {
  require_same_tape(a, b, op);
  const bool broadcast = b.shape().is_scalar() && !a.shape().is_scalar();
  if (!broadcast && !(a.shape() == b.shape()))
    throw ShapeError(op + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tape& t = a.tape();
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[broadcast ? 0 : i]);
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(std::move(op), a.shape(), std::move(out), {ai, bi},
                  [ai, bi, broadcast, dfda, dfdb](Tape& tp, std::size_t self) {
                    const auto& g = tp.node(self).grad;
                    const auto& x = tp.node(ai).value;
                    const auto& y = tp.node(bi).value;
                    double* ga = grad_of(tp, ai);
                    double* gb = grad_of(tp, bi);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const std::size_t j = broadcast ? 0 : i;
                      if (ga) ga[i] += g[i] * dfda(x[i], y[j]);
                      if (gb) gb[j] += g[i] * dfdb(x[i], y[j]);
                    }
                  });
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                        [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor add_constant(const Tensor& x, double c) {
  return detail::unary(x, "add_constant", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor scale_constant(const Tensor& x, double c) {
  return detail::unary(x, "scale_constant", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (!(v > 0.0)) throw NumericalError("log of non-positive value " + std::to_string(v));
  return detail::unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, "softplus", detail::softplus, [](double v, double) { return detail::sigmoid(v); });
}

/// Subgradient at 0 is 0.
inline Tensor abs(const Tensor& x) {
  return detail::unary(x, "abs", [](double v) { return std::abs(v); },
                       [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const std::size_t xi = x.id();
  return x.tape().record("sum", {}, {s}, {xi}, [xi](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    auto& gx = tp.node(xi).grad;
    for (double& v : gx) v += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale_constant(sum(x), 1.0 / static_cast<double>(x.shape().numel())); }

/// sum_i w_i x_i. Gradient flows to both x and w.
inline Tensor weighted_sum(const Tensor& x, const Tensor& w) {
  detail::require_same_shape(x, w, "weighted_sum");
  auto xv = x.values();
  auto wv = w.values();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += wv[i] * xv[i];
  const std::size_t xi = x.id(), wi = w.id();
  return x.tape().record("weighted_sum", {}, {s}, {xi, wi}, [xi, wi](Tape& tp, std::size_t self) {
    const double g = tp.node(self).grad[0];
    const auto& xv = tp.node(xi).value;
    const auto& wv = tp.node(wi).value;
    double* gx = detail::grad_of(tp, xi);
    double* gw = detail::grad_of(tp, wi);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (gx) gx[i] += g * wv[i];
      if (gw) gw[i] += g * xv[i];
    }
  });
}

/// Copies `shape.numel()` consecutive values starting at `offset` out of a flat tensor.
inline Tensor slice(const Tensor& x, std::size_t offset, Shape shape) {
  const std::size_t n = shape.numel();
  if (offset + n > x.shape().numel())
    throw ShapeError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + n) + ") exceeds " +
                     x.shape().str());
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(offset),
                          xv.begin() + static_cast<std::ptrdiff_t>(offset + n));
  const std::size_t xi = x.id();
  return x.tape().record("slice", shape, std::move(out), {xi}, [xi, offset](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    double* gx = tp.node(xi).grad.data() + offset;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Channel concatenation of two tensors with equal spatial size.
inline Tensor concat(const Tensor& a, const Tensor& b) {
  detail::require_same_tape(a, b, "concat");
  if (a.shape().h != b.shape().h || a.shape().w != b.shape().w)
    throw ShapeError("concat: spatial mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const Shape s{a.shape().c + b.shape().c, a.shape().h, a.shape().w};
  const std::size_t ai = a.id(), bi = b.id(), na = a.shape().numel();
  return a.tape().record("concat", s, std::move(out), {ai, bi}, [ai, bi, na](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    double* ga = detail::grad_of(tp, ai);
    double* gb = detail::grad_of(tp, bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (i < na) {
        if (ga) ga[i] += g[i];
      } else if (gb) {
        gb[i - na] += g[i];
      }
    }
  });
}

/// Nearest-neighbour x2 upsampling.
inline Tensor upsample_nearest2x(const Tensor& x) {
  const Shape in = x.shape();
  const Shape out_shape{in.c, in.h * 2, in.w * 2};
  std::vector<double> out(out_shape.numel());
  auto xv = x.values();
  for (int c = 0; c < in.c; ++c)
    for (int y = 0; y < out_shape.h; ++y)
      for (int xx = 0; xx < out_shape.w; ++xx)
        out[(static_cast<std::size_t>(c) * out_shape.h + y) * out_shape.w + xx] =
            xv[(static_cast<std::size_t>(c) * in.h + y / 2) * in.w + xx / 2];
  const std::size_t xi = x.id();
  return x.tape().record("upsample_nearest2x", out_shape, std::move(out), {xi}, [xi, in, out_shape](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.node(xi).grad;
    for (int c = 0; c < in.c; ++c)
      for (int y = 0; y < out_shape.h; ++y)
        for (int xx = 0; xx < out_shape.w; ++xx)
          gx[(static_cast<std::size_t>(c) * in.h + y / 2) * in.w + xx / 2] +=
              g[(static_cast<std::size_t>(c) * out_shape.h + y) * out_shape.w + xx];
  });
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
/// weight: (out_channels, in_channels, 9), bias: (out_channels, 1, 1).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride) {
  detail::require_same_tape(x, weight, "conv2d");
  detail::require_same_tape(x, bias, "conv2d");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  const Shape in = x.shape();
  const int cout = weight.shape().c;
  if (weight.shape().h != in.c || weight.shape().w != 9)
    throw ShapeError("conv2d: weight shape " + weight.shape().str() + " incompatible with input " + in.str());
  if (bias.shape().numel() != static_cast<std::size_t>(cout))
    throw ShapeError("conv2d: bias shape " + bias.shape().str() + " does not match " + std::to_string(cout) + " outputs");
  const Shape os{cout, (in.h + stride - 1) / stride, (in.w + stride - 1) / stride};

  const double* xv = x.values().data();
  const double* wv = weight.values().data();
  const double* bv = bias.values().data();
  std::vector<double> out(os.numel());
  for (int o = 0; o < cout; ++o) {
    double* op = out.data() + static_cast<std::size_t>(o) * os.plane();
    std::fill(op, op + os.plane(), bv[o]);
    for (int i = 0; i < in.c; ++i) {
      const double* ip = xv + static_cast<std::size_t>(i) * in.plane();
      const double* kp = wv + (static_cast<std::size_t>(o) * in.c + i) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double k = kp[ky * 3 + kx];
          for (int y = 0; y < os.h; ++y) {
            const int iy = y * stride + ky - 1;
            if (iy < 0 || iy >= in.h) continue;
            const double* irow = ip + static_cast<std::size_t>(iy) * in.w;
            double* orow = op + static_cast<std::size_t>(y) * os.w;
            const int x0 = (kx == 0) ? 1 : 0;
            int x1 = os.w;
            while (x1 > 0 && (x1 - 1) * stride + kx - 1 >= in.w) --x1;
            for (int xx = x0; xx < x1; ++xx) orow[xx] += k * irow[xx * stride + kx - 1];
          }
        }
      }
    }
  }

  const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.tape().record(
      "conv2d", os, std::move(out), {xi, wi, bi}, [xi, wi, bi, in, os, cout, stride](Tape& tp, std::size_t self) {
        const double* g = tp.node(self).grad.data();
        const double* xv = tp.node(xi).value.data();
        const double* wv = tp.node(wi).value.data();
        double* gx = detail::grad_of(tp, xi);
        double* gw = detail::grad_of(tp, wi);
        double* gb = detail::grad_of(tp, bi);
        for (int o = 0; o < cout; ++o) {
          const double* gp = g + static_cast<std::size_t>(o) * os.plane();
          if (gb) {
            double s = 0.0;
            for (std::size_t p = 0; p < os.plane(); ++p) s += gp[p];
            gb[o] += s;
          }
          for (int i = 0; i < in.c; ++i) {
            const double* ip = xv + static_cast<std::size_t>(i) * in.plane();
            double* gip = gx ? gx + static_cast<std::size_t>(i) * in.plane() : nullptr;
            const std::size_t kbase = (static_cast<std::size_t>(o) * in.c + i) * 9;
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const double k = wv[kbase + ky * 3 + kx];
                double acc = 0.0;
                const int x0 = (kx == 0) ? 1 : 0;
                int x1 = os.w;
                while (x1 > 0 && (x1 - 1) * stride + kx - 1 >= in.w) --x1;
                for (int y = 0; y < os.h; ++y) {
                  const int iy = y * stride + ky - 1;
                  if (iy < 0 || iy >= in.h) continue;
                  const double* irow = ip + static_cast<std::size_t>(iy) * in.w;
                  const double* grow = gp + static_cast<std::size_t>(y) * os.w;
                  if (gip) {
                    double* girow = gip + static_cast<std::size_t>(iy) * in.w;
                    for (int xx = x0; xx < x1; ++xx) {
                      acc += grow[xx] * irow[xx * stride + kx - 1];
                      girow[xx * stride + kx - 1] += k * grow[xx];
                    }
                  } else {
                    for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx * stride + kx - 1];
                  }
                }
                if (gw) gw[kbase + ky * 3 + kx] += acc;
              }
            }
          }
        }
      });
}

}  // namespace ops
}  // namespace endodepth
