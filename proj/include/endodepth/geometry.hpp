#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "endodepth/errors.hpp"

namespace endodepth {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Continuous pixel coordinate. Integer values are pixel centres; u runs along the width, v along the height.
struct Pixel {
  double u = 0.0;
  double v = 0.0;

  bool operator==(const Pixel&) const = default;
};

/// Pinhole intrinsics, no distortion.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InvalidArgument("image size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      throw InvalidArgument("principal point must lie inside the image");
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

/// SE(3) element stored as a unit quaternion and a translation.
/// Maps points from the source frame to the target frame: x_target = R * x_source + t.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Eigen::Quaterniond::Identity()), translation_(Vec3::Zero()) {}
  RigidTransform(const Eigen::Quaterniond& rotation, const Vec3& translation)
      : rotation_(rotation.normalized()), translation_(translation) {}
  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(Eigen::Quaterniond(rotation).normalized()), translation_(translation) {}

  static RigidTransform identity() { return {}; }
  /// Stores the quaternion bit-for-bit; the caller guarantees it is unit length.
  static RigidTransform from_unit_quaternion(const Eigen::Quaterniond& unit_rotation, const Vec3& translation) {
    RigidTransform T;
    T.rotation_ = unit_rotation;
    T.translation_ = translation;
    return T;
  }
  static RigidTransform translate(double x, double y, double z) {
    return {Eigen::Quaterniond::Identity(), Vec3(x, y, z)};
  }
  static RigidTransform from_axis_angle(const Vec3& axis, double angle, const Vec3& translation = Vec3::Zero()) {
    return {Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized())), translation};
  }

  const Eigen::Quaterniond& rotation() const noexcept { return rotation_; }
  const Vec3& translation() const noexcept { return translation_; }
  Mat3 rotation_matrix() const { return rotation_.toRotationMatrix(); }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }

  RigidTransform inverse() const {
    const Eigen::Quaterniond inv = rotation_.conjugate();
    return {inv, -(inv * translation_)};
  }

  /// (*this) o other: first other, then *this.
  RigidTransform compose(const RigidTransform& other) const {
    return {(rotation_ * other.rotation_).normalized(), rotation_ * other.translation_ + translation_};
  }

  bool is_approx(const RigidTransform& other, double tol) const {
    // q and -q are the same rotation.
    const double dq = std::min((rotation_.coeffs() - other.rotation_.coeffs()).norm(),
                               (rotation_.coeffs() + other.rotation_.coeffs()).norm());
    return dq <= tol && (translation_ - other.translation_).norm() <= tol;
  }

 private:
  Eigen::Quaterniond rotation_;
  Vec3 translation_;
};

inline Pixel project(const CameraIntrinsics& K, const Vec3& p) {
  if (!(p.z() > 0.0)) throw PointBehindCamera("z = " + std::to_string(p.z()));
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

inline Vec3 unproject(const CameraIntrinsics& K, const Pixel& px, double z) {
  if (!(z > 0.0)) throw InvalidDepth("z = " + std::to_string(z));
  return {z * (px.u - K.cx) / K.fx, z * (px.v - K.cy) / K.fy, z};
}

/// Unit-depth ray direction through a pixel (z component 1).
inline Vec3 pixel_ray(const CameraIntrinsics& K, const Pixel& px) {
  return {(px.u - K.cx) / K.fx, (px.v - K.cy) / K.fy, 1.0};
}

/// Given world->cam_j and world->cam_k, returns cam_j->cam_k.
inline RigidTransform relative_pose(const RigidTransform& world_to_j, const RigidTransform& world_to_k) {
  return world_to_k.compose(world_to_j.inverse());
}

}  // namespace endodepth
