#pragma once

// Depth map scaling and warping layers used by the two-branch training graph.

#include <cmath>
#include <limits>
#include <vector>

#include "endodepth/annotations.hpp"
#include "endodepth/autodiff.hpp"
#include "endodepth/geometry.hpp"

namespace endodepth {

struct ScaledDepth {
  Tensor depth;  // s * Y
  Tensor scale;  // s, scalar
};

/// Rescales a dense prediction so that its soft-mask weighted sum over the annotated pixels
/// equals that of the sparse map: s = sum(w * y*) / sum(w * y).
inline ScaledDepth depth_scaling_layer(const Tensor& prediction, const SparseDepthMap& sparse, const SoftMask& mask) {
  Tape& tape = prediction.tape();
  const Shape s = prediction.shape();
  if (s.c != 1 || s.h != sparse.raster.height() || s.w != sparse.raster.width() ||
      s.h != mask.raster.height() || s.w != mask.raster.width())
    throw ShapeError("depth_scaling_layer: prediction " + s.str() + " does not match annotation rasters");

  double anchor = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < mask.raster.size(); ++i) {
    if (mask.raster[i] > 0.0) {
      any = true;
      anchor += mask.raster[i] * sparse.raster[i];
    }
  }
  if (!any) throw EmptyAnnotation("depth_scaling_layer: soft mask of frame " + std::to_string(mask.frame_id) + " is empty");

  const Tensor weights = tape.constant(mask.raster);
  const Tensor denom = ops::weighted_sum(prediction, weights);
  if (!(denom.item() > 0.0))
    throw NumericalError("depth_scaling_layer: weighted prediction sum " + std::to_string(denom.item()) + " <= 0");
  const Tensor scale = ops::div(tape.scalar(anchor), denom);
  return {ops::mul(prediction, scale), scale};
}

/// Destination-pixel assignment of a forward warp. winner[dst] is the source pixel index whose
/// transformed depth survived the z-buffer, or -1.
struct WarpPlan {
  int width = 0;
  int height = 0;
  std::vector<int> winner;
  std::size_t valid_count = 0;
};

namespace detail {

// Transformed depth is linear in source depth: z_k = gain * z + t_z with gain = r3 . ray(u, v).
inline std::vector<double> warp_gains(const CameraIntrinsics& K, const RigidTransform& T, int width, int height) {
  const Mat3 R = T.rotation_matrix();
  std::vector<double> gain(static_cast<std::size_t>(width) * height);
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) {
      const Vec3 ray = pixel_ray(K, {static_cast<double>(u), static_cast<double>(v)});
      gain[static_cast<std::size_t>(v) * width + u] = R.row(2).dot(ray);
    }
  return gain;
}

}  // namespace detail

/// Scatters every source pixel into the target frame with nearest-pixel rounding and a min-z buffer.
inline WarpPlan plan_warp(std::span<const double> depth, int width, int height, const RigidTransform& target_from_source,
                          const CameraIntrinsics& K) {
  WarpPlan plan{width, height, std::vector<int>(static_cast<std::size_t>(width) * height, -1), 0};
  std::vector<double> zbuf(plan.winner.size(), std::numeric_limits<double>::infinity());
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      const int src = v * width + u;
      const double z = depth[static_cast<std::size_t>(src)];
      if (!(z > 0.0)) continue;
      const Vec3 p = target_from_source.apply(unproject(K, {static_cast<double>(u), static_cast<double>(v)}, z));
      if (!(p.z() > 0.0)) continue;
      const Pixel q = project(K, p);
      const long du = std::lround(q.u);
      const long dv = std::lround(q.v);
      if (du < 0 || du >= width || dv < 0 || dv >= height) continue;
      const std::size_t dst = static_cast<std::size_t>(dv) * width + static_cast<std::size_t>(du);
      if (p.z() < zbuf[dst]) {
        if (plan.winner[dst] < 0) ++plan.valid_count;
        zbuf[dst] = p.z();
        plan.winner[dst] = src;
      }
    }
  }
  return plan;
}

/// Evaluates a warp with a frozen assignment. Gradients flow to the winning source depths only.
inline Tensor apply_warp_plan(const Tensor& depth, const WarpPlan& plan, const RigidTransform& target_from_source,
                              const CameraIntrinsics& K) {
  const Shape s = depth.shape();
  if (s.c != 1 || s.h != plan.height || s.w != plan.width)
    throw ShapeError("apply_warp_plan: depth " + s.str() + " does not match plan");
  const std::vector<double> gain = detail::warp_gains(K, target_from_source, s.w, s.h);
  const double tz = target_from_source.translation().z();
  auto z = depth.values();
  std::vector<double> out(s.numel(), 0.0);
  for (std::size_t dst = 0; dst < out.size(); ++dst) {
    const int src = plan.winner[dst];
    if (src >= 0) out[dst] = gain[static_cast<std::size_t>(src)] * z[static_cast<std::size_t>(src)] + tz;
  }
  const std::size_t di = depth.id();
  return depth.tape().record("depth_warp", s, std::move(out), {di},
                             [di, winner = plan.winner, gain](Tape& tp, std::size_t self) {
                               const auto& g = tp.node(self).grad;
                               auto& gz = tp.node(di).grad;
                               for (std::size_t dst = 0; dst < g.size(); ++dst) {
                                 const int src = winner[dst];
                                 if (src >= 0) gz[static_cast<std::size_t>(src)] += g[dst] * gain[static_cast<std::size_t>(src)];
                               }
                             });
}

struct WarpResult {
  Tensor warped;       // depth expressed in the target frame; 0 where invalid
  BinaryMask validity; // 1 where at least one source pixel landed
  WarpPlan plan;
};

/// Warps a (scaled) dense depth map from its own camera into the target camera.
inline WarpResult depth_warping_layer(const Tensor& depth, const RigidTransform& target_from_source,
                                      const CameraIntrinsics& K) {
  const Shape s = depth.shape();
  if (s.c != 1 || s.h != K.height || s.w != K.width)
    throw ShapeError("depth_warping_layer: depth " + s.str() + " does not match intrinsics " +
                     std::to_string(K.width) + "x" + std::to_string(K.height));
  for (double z : depth.values())
    if (!(z > 0.0)) throw InvalidDepth("depth_warping_layer needs strictly positive depth, got " + std::to_string(z));
  WarpPlan plan = plan_warp(depth.values(), s.w, s.h, target_from_source, K);
  if (plan.valid_count == 0) throw WarpOutOfView("no source pixel lands inside the target view");
  BinaryMask validity(s.w, s.h, 0);
  for (std::size_t i = 0; i < plan.winner.size(); ++i) validity[i] = plan.winner[i] >= 0 ? 1 : 0;
  Tensor warped = apply_warp_plan(depth, plan, target_from_source, K);
  return {warped, std::move(validity), std::move(plan)};
}

}  // namespace endodepth
