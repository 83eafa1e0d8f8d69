#pragma once

// Sparse training annotations: per-frame sparse depth maps, soft confidence masks, and the
// two-frame training pairs assembled from them.

#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "endodepth/annotations.hpp"
#include "endodepth/errors.hpp"
#include "endodepth/geometry.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/raster.hpp"

namespace endodepth {

struct ScatterSummary {
  std::size_t written = 0;
  std::size_t collisions = 0;
  std::size_t behind_camera = 0;
  std::size_t out_of_bounds = 0;
  std::size_t zero_weight = 0;
};

/// Z-buffered projection of the points observed in one frame. winner[pixel] indexes into points.
struct Scatter {
  int frame_id = 0;
  DepthMap depth;
  std::vector<int> winner;
  ScatterSummary summary;
};

/// Projects every point with b = 1 for this frame, rounds to the nearest pixel (half away from zero)
/// and keeps the nearest point on collisions. Zero-weight points carry no supervision and are skipped.
inline Scatter scatter_points(const SparsePointSet& points, int frame_id, const RigidTransform& world_to_camera,
                              const CameraIntrinsics& K) {
  Scatter out{frame_id, DepthMap(K.width, K.height, 0.0), std::vector<int>(static_cast<std::size_t>(K.width) * K.height, -1), {}};
  for (std::size_t i = 0; i < points.points.size(); ++i) {
    const SparsePoint& p = points.points[i];
    if (!p.observed_in(frame_id)) continue;
    if (!(p.weight > 0.0)) {
      ++out.summary.zero_weight;
      continue;
    }
    const Vec3 pc = world_to_camera.apply(p.xyz);
    if (!(pc.z() > 0.0)) {
      ++out.summary.behind_camera;
      continue;
    }
    const Pixel px = project(K, pc);
    const long u = std::lround(px.u);
    const long v = std::lround(px.v);
    if (u < 0 || u >= K.width || v < 0 || v >= K.height) {
      ++out.summary.out_of_bounds;
      continue;
    }
    const std::size_t idx = static_cast<std::size_t>(v) * K.width + static_cast<std::size_t>(u);
    if (out.winner[idx] >= 0) {
      ++out.summary.collisions;
      if (!(pc.z() < out.depth[idx])) continue;
    } else {
      ++out.summary.written;
    }
    out.depth[idx] = pc.z();
    out.winner[idx] = static_cast<int>(i);
  }
  return out;
}

inline SparseDepthMap build_sparse_depth_map(const SparsePointSet& points, int frame_id,
                                             const RigidTransform& world_to_camera, const CameraIntrinsics& K,
                                             ScatterSummary* summary = nullptr) {
  Scatter s = scatter_points(points, frame_id, world_to_camera, K);
  if (summary) *summary = s.summary;
  return {frame_id, std::move(s.depth)};
}

/// c = n * accumulated parallax, where n is the number of observing frames and the parallax is the
/// summed pixel displacement between consecutive observations (in trajectory order). Unnormalised.
inline double compute_confidence(std::span<const Observation> observations, const Trajectory& trajectory) {
  if (observations.size() < 2)
    throw InsufficientObservations("a point needs at least 2 observations, got " + std::to_string(observations.size()));
  std::vector<std::pair<int, Pixel>> ordered;
  ordered.reserve(observations.size());
  for (const auto& o : observations) {
    const int idx = trajectory.index_of(o.frame_id);
    if (idx < 0) throw ReferentialIntegrityError("observation references unknown frame " + std::to_string(o.frame_id));
    ordered.emplace_back(idx, o.pixel);
  }
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double parallax = 0.0;
  for (std::size_t i = 1; i < ordered.size(); ++i)
    parallax += std::hypot(ordered[i].second.u - ordered[i - 1].second.u, ordered[i].second.v - ordered[i - 1].second.v);
  return static_cast<double>(ordered.size()) * parallax;
}

/// Writes each scatter winner's confidence and normalises the frame by its maximum.
inline SoftMask build_soft_mask(const SparsePointSet& points, const Scatter& scatter) {
  SoftMask mask{scatter.frame_id, Raster<double>(scatter.depth.width(), scatter.depth.height(), 0.0)};
  double peak = 0.0;
  for (std::size_t i = 0; i < scatter.winner.size(); ++i) {
    if (scatter.winner[i] < 0) continue;
    mask.raster[i] = points.points[static_cast<std::size_t>(scatter.winner[i])].weight;
    peak = std::max(peak, mask.raster[i]);
  }
  if (!(peak > 0.0)) throw EmptyAnnotation("frame " + std::to_string(scatter.frame_id) + " has no annotated pixels");
  for (double& w : mask.raster.values()) w /= peak;
  return mask;
}

inline SoftMask build_soft_mask(const SparsePointSet& points, int frame_id, const RigidTransform& world_to_camera,
                                const CameraIntrinsics& K) {
  return build_soft_mask(points, scatter_points(points, frame_id, world_to_camera, K));
}

/// Recomputes every point's confidence from its observations.
inline void assign_confidences(SparsePointSet& points, const Trajectory& trajectory) {
  for (auto& p : points.points) p.weight = compute_confidence(p.observations, trajectory);
}

struct FrameAnnotation {
  int frame_id = 0;
  SparseDepthMap sparse;
  SoftMask mask;
  ScatterSummary summary;
};

/// Annotates one frame, or returns nothing if no point supervises it.
inline std::optional<FrameAnnotation> annotate_frame(const SparsePointSet& points, const Frame& frame,
                                                     const CameraIntrinsics& K) {
  Scatter s = scatter_points(points, frame.id, frame.world_to_camera, K);
  try {
    SoftMask mask = build_soft_mask(points, s);
    return FrameAnnotation{frame.id, {frame.id, std::move(s.depth)}, std::move(mask), s.summary};
  } catch (const EmptyAnnotation&) {
    return std::nullopt;
  }
}

struct TrainingPair {
  int frame_j = 0;
  int frame_k = 0;
  IntensityImage image_j, image_k;
  PairAnnotations annotations;
};

struct PairingConfig {
  /// Largest index distance between the two frames of a pair, within a subsequence.
  int max_gap = std::numeric_limits<int>::max();
};

/// All pairs j < k of annotated frames in the same subsequence with k - j <= max_gap.
/// `images` is keyed by frame id; frames missing from `annotations` are excluded.
inline std::vector<TrainingPair> assemble_pairs(const Trajectory& trajectory,
                                                const std::map<int, FrameAnnotation>& annotations,
                                                const std::map<int, IntensityImage>& images, PairingConfig pairing = {}) {
  std::vector<TrainingPair> pairs;
  const auto& frames = trajectory.frames;
  for (std::size_t a = 0; a < frames.size(); ++a) {
    auto ja = annotations.find(frames[a].id);
    if (ja == annotations.end()) continue;
    for (std::size_t b = a + 1; b < frames.size(); ++b) {
      if (static_cast<long>(b - a) > pairing.max_gap) break;
      if (frames[b].subsequence != frames[a].subsequence) continue;
      auto kb = annotations.find(frames[b].id);
      if (kb == annotations.end()) continue;
      TrainingPair p;
      p.frame_j = frames[a].id;
      p.frame_k = frames[b].id;
      if (auto it = images.find(p.frame_j); it != images.end()) p.image_j = it->second;
      if (auto it = images.find(p.frame_k); it != images.end()) p.image_k = it->second;
      p.annotations = {ja->second.sparse, kb->second.sparse, ja->second.mask, kb->second.mask,
                       relative_pose(frames[a].world_to_camera, frames[b].world_to_camera), trajectory.intrinsics};
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

}  // namespace endodepth
