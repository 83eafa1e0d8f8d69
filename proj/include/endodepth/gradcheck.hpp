#pragma once

// Central finite-difference checks of every differentiable op, the two custom layers, both losses
// and the network end to end.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "endodepth/autodiff.hpp"
#include "endodepth/layers.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/model.hpp"

namespace endodepth {

struct GradCheckResult {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;

  bool passed() const { return rel_error < tolerance; }
};

/// Builds a scalar from the differentiable input x, recorded on x's tape.
using ScalarGraph = std::function<Tensor(const Tensor& x)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded random subset of this size.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

/// Compares the tape gradient with central differences (f(x+h) - f(x-h)) / 2h and reports the
/// norm-wise relative error ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||) over the checked coordinates.
inline GradCheckResult check_gradient(const std::string& name, Shape shape, const std::vector<double>& x0,
                                      const ScalarGraph& graph, const GradCheckOptions& opt = {}) {
  std::vector<double> analytic;
  {
    Tape tape;
    const Tensor x = tape.variable(shape, x0);
    const Tensor y = graph(x);
    tape.backward(y);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  std::vector<std::size_t> coords(x0.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (opt.max_coordinates > 0 && opt.max_coordinates < coords.size()) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }
  auto eval = [&](const std::vector<double>& x) {
    Tape tape;
    return graph(tape.variable(shape, x)).item();
  };
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::vector<double> x = x0;
  for (std::size_t i : coords) {
    x[i] = x0[i] + opt.step;
    const double fp = eval(x);
    x[i] = x0[i] - opt.step;
    const double fm = eval(x);
    x[i] = x0[i];
    const double numeric = (fp - fm) / (2.0 * opt.step);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    a2 += analytic[i] * analytic[i];
    n2 += numeric * numeric;
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  return {name, std::sqrt(diff2) / denom, opt.tolerance, coords.size()};
}

namespace detail {

inline std::vector<double> uniform_values(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Random linear read-out that turns any tensor into a scalar touching every element.
inline Tensor readout(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::weighted_sum(t, t.tape().constant(t.shape(), uniform_values(rng, t.shape().numel(), -1.0, 1.0)));
}

}  // namespace detail

/// The complete suite. Smooth ops are held to 1e-5; the warp (frozen assignment) and the
/// end-to-end network to 1e-4.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 1) {
  using detail::readout;
  using detail::uniform_values;
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  const Shape s{2, 3, 4};
  const std::size_t n = s.numel();
  const GradCheckOptions smooth{1e-5, 1e-5, 0, seed};
  const GradCheckOptions loose{1e-5, 1e-4, 0, seed};

  // Two operands packed into one variable so both gradients are checked at once.
  auto binary = [&](const std::string& name, auto op, double lo, double hi) {
    const auto x0 = uniform_values(rng, 2 * n, lo, hi);
    out.push_back(check_gradient(name, {4, 3, 4}, x0, [&, op](const Tensor& x) {
      return readout(op(ops::slice(x, 0, s), ops::slice(x, n, s)), seed + 11);
    }, smooth));
  };
  binary("add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); }, -1.0, 1.0);
  binary("sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); }, -1.0, 1.0);
  binary("mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); }, -1.0, 1.0);
  binary("div", [](const Tensor& a, const Tensor& b) { return ops::div(a, b); }, 0.5, 2.0);
  binary("concat", [](const Tensor& a, const Tensor& b) { return ops::concat(a, b); }, -1.0, 1.0);
  {
    const auto x0 = uniform_values(rng, n + 1, 0.5, 2.0);
    out.push_back(check_gradient("div_scalar_broadcast", {1, 1, static_cast<int>(n + 1)}, x0, [&](const Tensor& x) {
      return readout(ops::div(ops::slice(x, 0, s), ops::slice(x, n, {})), seed + 12);
    }, smooth));
  }

  auto unary = [&](const std::string& name, auto op, double lo, double hi, bool flip_signs = false) {
    auto x0 = uniform_values(rng, n, lo, hi);
    if (flip_signs)
      for (std::size_t i = 0; i < n; i += 2) x0[i] = -x0[i];
    out.push_back(check_gradient(name, s, x0, [&, op](const Tensor& x) { return readout(op(x), seed + 13); }, smooth));
  };
  unary("add_constant", [](const Tensor& x) { return ops::add_constant(x, 0.75); }, -1.0, 1.0);
  unary("scale_constant", [](const Tensor& x) { return ops::scale_constant(x, -1.5); }, -1.0, 1.0);
  unary("log", [](const Tensor& x) { return ops::log(x); }, 0.5, 3.0);
  unary("exp", [](const Tensor& x) { return ops::exp(x); }, -1.0, 1.0);
  unary("softplus", [](const Tensor& x) { return ops::softplus(x); }, -3.0, 3.0);
  unary("abs", [](const Tensor& x) { return ops::abs(x); }, 0.1, 1.0, true);
  unary("square", [](const Tensor& x) { return ops::square(x); }, -1.0, 1.0);
  unary("upsample_nearest2x", [](const Tensor& x) { return ops::upsample_nearest2x(x); }, -1.0, 1.0);
  unary("slice", [&](const Tensor& x) { return ops::slice(x, 5, {1, 2, 5}); }, -1.0, 1.0);
  {
    const auto x0 = uniform_values(rng, n, -1.0, 1.0);
    out.push_back(check_gradient("sum", s, x0, [](const Tensor& x) { return ops::square(ops::sum(x)); }, smooth));
    out.push_back(check_gradient("mean", s, x0, [](const Tensor& x) { return ops::square(ops::mean(x)); }, smooth));
    out.push_back(check_gradient("weighted_sum", {2, 3, 4}, x0, [&](const Tensor& x) {
      // weights are differentiable too: half the variable weights the other half
      const Shape h{1, 3, 4};
      return ops::weighted_sum(ops::slice(x, 0, h), ops::slice(x, h.numel(), h));
    }, smooth));
  }

  for (int stride : {1, 2}) {
    const int cin = 2, cout = 3, H = 6, W = 8;
    const std::size_t nx = static_cast<std::size_t>(cin) * H * W, nw = static_cast<std::size_t>(cout) * cin * 9;
    const auto x0 = uniform_values(rng, nx + nw + cout, -1.0, 1.0);
    out.push_back(check_gradient("conv2d_stride" + std::to_string(stride), {1, 1, static_cast<int>(x0.size())}, x0,
                                 [&, stride](const Tensor& x) {
                                   const Tensor in = ops::slice(x, 0, {cin, H, W});
                                   const Tensor w = ops::slice(x, nx, {cout, cin, 9});
                                   const Tensor b = ops::slice(x, nx + nw, {cout, 1, 1});
                                   return readout(ops::conv2d(in, w, b, stride), seed + 14);
                                 },
                                 smooth));
  }

  // Annotations on an 8x8 grid with a handful of weighted pixels.
  const int H = 8, W = 8;
  const CameraIntrinsics K{7.0, 7.0, 3.5, 3.5, W, H};
  SparseDepthMap sparse{0, DepthMap(W, H, 0.0)};
  SoftMask mask{0, Raster<double>(W, H, 0.0)};
  {
    std::uniform_real_distribution<double> z(1.0, 3.0), w(0.2, 1.0);
    for (std::size_t i = 3; i < sparse.raster.size(); i += 7) {
      sparse.raster[i] = z(rng);
      mask.raster[i] = w(rng);
    }
  }
  const Shape img{1, H, W};
  const std::size_t npx = img.numel();
  {
    const auto x0 = uniform_values(rng, npx, 1.0, 3.0);
    out.push_back(check_gradient("depth_scaling_layer", img, x0, [&](const Tensor& x) {
      return readout(depth_scaling_layer(x, sparse, mask).depth, seed + 15);
    }, smooth));
    out.push_back(check_gradient("scale_invariant_weighted_loss", img, x0, [&](const Tensor& x) {
      return scale_invariant_weighted_loss(x, sparse, mask);
    }, smooth));
  }
  {
    const RigidTransform T = RigidTransform::from_axis_angle(Vec3(0.2, 1.0, 0.1), 0.05, Vec3(0.08, -0.03, 0.05));
    const auto x0 = uniform_values(rng, npx, 1.8, 2.2);
    const WarpPlan plan = plan_warp(x0, W, H, T, K);
    out.push_back(check_gradient("depth_warping_layer", img, x0, [&](const Tensor& x) {
      return readout(apply_warp_plan(x, plan, T, K), seed + 16);
    }, loose));
  }
  {
    // Keep |warped - target| away from the kink of |.| so differences stay on one side.
    auto x0 = uniform_values(rng, 2 * npx, 1.0, 2.0);
    for (std::size_t i = 0; i < npx; ++i) x0[npx + i] = x0[i] + ((i % 2) ? 0.3 : -0.3);
    BinaryMask validity(W, H, 0);
    for (std::size_t i = 0; i < validity.size(); ++i) validity[i] = (i % 3) ? 1 : 0;
    out.push_back(check_gradient("depth_consistency_loss", {2, H, W}, x0, [&](const Tensor& x) {
      return depth_consistency_loss(ops::slice(x, 0, img), validity, ops::slice(x, npx, img));
    }, smooth));
  }
  {
    const DepthNet net({3, 8, 1e-4});
    const auto params = net.init_parameters(seed + 17);
    IntensityImage image(W, H);
    for (double& v : image.values()) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    GradCheckOptions opt = loose;
    opt.max_coordinates = 400;
    out.push_back(check_gradient("depthnet_end_to_end", {static_cast<int>(params.size()), 1, 1}, params,
                                 [&](const Tensor& x) {
                                   return scale_invariant_weighted_loss(net.forward(x, {0, &image}), sparse, mask);
                                 },
                                 opt));
  }
  return out;
}

}  // namespace endodepth
