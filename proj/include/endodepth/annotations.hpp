#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "endodepth/geometry.hpp"
#include "endodepth/raster.hpp"

namespace endodepth {

struct Frame {
  int id = 0;
  RigidTransform world_to_camera;
  int subsequence = 0;
};

/// Camera path; frames are ordered and share one set of intrinsics.
struct Trajectory {
  std::vector<Frame> frames;
  CameraIntrinsics intrinsics;

  const Frame* find(int frame_id) const {
    auto it = std::find_if(frames.begin(), frames.end(), [&](const Frame& f) { return f.id == frame_id; });
    return it == frames.end() ? nullptr : &*it;
  }
  /// Position of a frame in the trajectory order, or -1.
  int index_of(int frame_id) const {
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].id == frame_id) return static_cast<int>(i);
    return -1;
  }
};

struct Observation {
  int frame_id = 0;
  Pixel pixel;

  bool operator==(const Observation&) const = default;
};

/// A reconstructed 3D point. Frame j took part in triangulating it iff j appears in `observations`.
struct SparsePoint {
  int id = 0;
  Vec3 xyz = Vec3::Zero();
  double weight = 0.0;
  std::vector<Observation> observations;

  bool observed_in(int frame_id) const {
    return std::any_of(observations.begin(), observations.end(),
                       [&](const Observation& o) { return o.frame_id == frame_id; });
  }
};

struct SparsePointSet {
  std::vector<SparsePoint> points;
};

struct SparseDepthMap {
  int frame_id = 0;
  DepthMap raster;
};

struct SoftMask {
  int frame_id = 0;
  Raster<double> raster;
};

}  // namespace endodepth
