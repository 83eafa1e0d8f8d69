#pragma once

// Synthetic textured scenes with exact ground-truth depth, camera paths through them, and a
// simulated structure-from-motion output (sparse noisy points with partial visibility tracks).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "endodepth/annotations.hpp"
#include "endodepth/errors.hpp"
#include "endodepth/geometry.hpp"
#include "endodepth/raster.hpp"
#include "endodepth/supervision.hpp"

namespace endodepth {

struct PlaneSurface {
  Vec3 point = Vec3(0, 0, 2);
  Vec3 normal = Vec3(0, 0, 1);
};

struct Bump {
  double x = 0, y = 0, amplitude = 0, sigma = 1;
};

/// z = base + slope_x * x + slope_y * y + sum of Gaussian bumps.
struct HeightFieldSurface {
  double base = 2.0;
  double slope_x = 0.0;
  double slope_y = 0.0;
  std::vector<Bump> bumps;
  double extent = 1.5;  // nominal half-width of the region cameras look at

  double height(double x, double y) const {
    double h = base + slope_x * x + slope_y * y;
    for (const auto& b : bumps) {
      const double dx = x - b.x, dy = y - b.y;
      h += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
    }
    return h;
  }
};

/// Bent tube around the z axis, closed by a cap at z = length. Cameras sit inside and look down +z.
struct TubeSurface {
  double radius = 0.5;
  double length = 5.0;
  double bend = 0.4;
  double ripple = 0.12;
  double ripple_phase = 0.0;

  double centre_x(double z) const { return bend * std::sin(std::numbers::pi * z / length); }
  double radius_at(double z) const {
    return radius * (1.0 + ripple * std::sin(6.0 * std::numbers::pi * z / length + ripple_phase));
  }
  /// Positive outside the open tube or past the cap.
  double outside(const Vec3& p) const {
    const double wall = std::hypot(p.x() - centre_x(p.z()), p.y()) - radius_at(p.z());
    return std::max(wall, p.z() - length);
  }
};

struct Texture {
  double f1 = 5.0, f2 = 4.0, f3 = 11.0, f4 = 13.0;
  double p1 = 0.0, p2 = 0.0, p3 = 0.0, p4 = 0.0;
  double contrast = 1.0;

  double operator()(const Vec3& q) const {
    const double t = 0.2 * std::sin(f1 * q.x() + p1) * std::cos(f2 * q.y() + p2) +
                     0.12 * std::sin(f3 * (q.x() + 0.7 * q.y() + 0.3 * q.z()) + p3) +
                     0.08 * std::sin(f4 * q.y() + p4) * std::sin(f4 * 0.8 * q.x() + p1);
    return std::clamp(0.6 + contrast * t, 0.05, 1.0);
  }
};

struct SpecularSpot {
  Vec3 centre;
  double radius = 0.05;
  double strength = 0.5;
};

struct Scene {
  std::variant<PlaneSurface, HeightFieldSurface, TubeSurface> surface;
  Texture texture;
  double diameter = 1.0;
  /// Depth at which the co-located light gives unit irradiance.
  double reference_depth = 1.5;
  std::vector<SpecularSpot> specular;

  /// Distance along `dir` (not necessarily unit) from `origin` to the first surface hit.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const {
    return std::visit([&](const auto& s) { return intersect_impl(s, origin, dir); }, surface);
  }

  double shade(const Vec3& world_point, double depth) const {
    double value = texture(world_point) * (reference_depth * reference_depth) / (depth * depth);
    for (const auto& s : specular) {
      const double d2 = (world_point - s.centre).squaredNorm();
      value += s.strength * std::exp(-d2 / (2.0 * s.radius * s.radius));
    }
    return std::clamp(value, 0.0, 1.0);
  }

 private:
  static std::optional<double> intersect_impl(const PlaneSurface& s, const Vec3& o, const Vec3& d) {
    const double denom = s.normal.dot(d);
    if (std::abs(denom) < 1e-15) return std::nullopt;
    const double t = s.normal.dot(s.point - o) / denom;
    if (!(t > 0.0)) return std::nullopt;
    return t;
  }

  // Marches until the sign of f changes, then bisects.
  template <typename F>
  static std::optional<double> march(F f, double step, double t_max) {
    double t0 = 0.0;
    if (f(t0) >= 0.0) return std::nullopt;
    for (double t1 = step; t1 <= t_max; t1 += step) {
      const double f1 = f(t1);
      if (f1 >= 0.0) {
        double lo = t0, hi = t1;
        for (int i = 0; i < 100 && hi - lo > 1e-14 * hi; ++i) {
          const double mid = 0.5 * (lo + hi);
          (f(mid) >= 0.0 ? hi : lo) = mid;
        }
        return 0.5 * (lo + hi);
      }
      t0 = t1;
    }
    return std::nullopt;
  }

  static std::optional<double> intersect_impl(const HeightFieldSurface& s, const Vec3& o, const Vec3& d) {
    auto f = [&](double t) {
      const Vec3 p = o + t * d;
      return p.z() - s.height(p.x(), p.y());
    };
    return march(f, 0.01 / d.norm(), 50.0 / d.norm());
  }

  static std::optional<double> intersect_impl(const TubeSurface& s, const Vec3& o, const Vec3& d) {
    auto f = [&](double t) { return s.outside(o + t * d); };
    return march(f, 0.005 * s.radius / d.norm(), 4.0 * s.length / d.norm());
  }
};

inline Scene make_plane_scene(const PlaneSurface& plane, double diameter = 4.0) {
  Scene s;
  s.surface = plane;
  s.diameter = diameter;
  s.reference_depth = plane.point.z();
  return s;
}

struct HeightFieldConfig {
  int bumps = 6;
  double base = 2.2;
  double amplitude = 0.8;
  double slope = 0.15;
  double extent = 1.6;
  /// Bump widths are drawn from [sigma_min, 2 * sigma_min].
  double sigma_min = 0.45;
};

/// Random smooth height field seen from above. Bump widths are bounded below, which bounds the
/// surface gradient.
inline Scene make_heightfield_scene(std::uint64_t seed, const HeightFieldConfig& cfg = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  HeightFieldSurface hf;
  hf.base = cfg.base;
  hf.extent = cfg.extent;
  hf.slope_x = cfg.slope * (2.0 * unit(rng) - 1.0);
  hf.slope_y = cfg.slope * (2.0 * unit(rng) - 1.0);
  for (int i = 0; i < cfg.bumps; ++i) {
    Bump b;
    b.x = cfg.extent * (2.0 * unit(rng) - 1.0);
    b.y = cfg.extent * (2.0 * unit(rng) - 1.0);
    b.amplitude = cfg.amplitude * (2.0 * unit(rng) - 1.0);
    b.sigma = cfg.sigma_min * (1.0 + unit(rng));
    hf.bumps.push_back(b);
  }
  Scene s;
  s.surface = hf;
  s.texture.p1 = 2 * std::numbers::pi * unit(rng);
  s.texture.p2 = 2 * std::numbers::pi * unit(rng);
  s.texture.p3 = 2 * std::numbers::pi * unit(rng);
  s.texture.p4 = 2 * std::numbers::pi * unit(rng);
  double zmin = 1e300, zmax = -1e300;
  for (int i = 0; i <= 40; ++i)
    for (int j = 0; j <= 40; ++j) {
      const double z = hf.height(-cfg.extent + 2 * cfg.extent * i / 40.0, -cfg.extent + 2 * cfg.extent * j / 40.0);
      zmin = std::min(zmin, z);
      zmax = std::max(zmax, z);
    }
  s.diameter = std::sqrt(8.0 * cfg.extent * cfg.extent + (zmax - zmin) * (zmax - zmin));
  s.reference_depth = zmin;
  return s;
}

struct TubeConfig {
  double radius = 0.5;
  double length = 5.0;
  double bend = 0.4;
  double ripple = 0.12;
};

inline Scene make_tube_scene(std::uint64_t seed, const TubeConfig& cfg = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TubeSurface tube{cfg.radius, cfg.length, cfg.bend, cfg.ripple, 2 * std::numbers::pi * unit(rng)};
  Scene s;
  s.surface = tube;
  s.texture.f1 = 9.0;
  s.texture.f2 = 9.0;
  s.texture.p1 = 2 * std::numbers::pi * unit(rng);
  s.texture.p2 = 2 * std::numbers::pi * unit(rng);
  s.texture.p3 = 2 * std::numbers::pi * unit(rng);
  s.texture.p4 = 2 * std::numbers::pi * unit(rng);
  s.diameter = std::hypot(cfg.length, 2.0 * cfg.radius * (1.0 + cfg.ripple) + cfg.bend);
  s.reference_depth = cfg.radius;
  return s;
}

struct Rendering {
  DepthMap depth;
  IntensityImage intensity;
  Raster<double> texture;
  std::size_t missed = 0;
};

/// Casts one ray through a continuous pixel; returns the camera-frame depth of the first hit.
inline std::optional<double> cast_pixel(const Scene& scene, const RigidTransform& world_to_camera,
                                        const CameraIntrinsics& K, const Pixel& px, Vec3* world_hit = nullptr) {
  const RigidTransform camera_to_world = world_to_camera.inverse();
  const Vec3 origin = camera_to_world.translation();
  // Camera-frame ray has z = 1, so the hit distance along it is the depth.
  const Vec3 dir = camera_to_world.rotation() * pixel_ray(K, px);
  auto t = scene.intersect(origin, dir);
  if (!t) return std::nullopt;
  if (world_hit) *world_hit = origin + *t * dir;
  return *t;
}

/// Ground-truth depth (camera z of the first hit) and shaded intensity. Throws SceneCoverage when
/// 1% or more of the rays miss the surface.
inline Rendering render_ground_truth(const Scene& scene, const RigidTransform& world_to_camera, const CameraIntrinsics& K) {
  K.validate();
  Rendering r{DepthMap(K.width, K.height, 0.0), IntensityImage(K.width, K.height, 0.0),
              Raster<double>(K.width, K.height, 0.0), 0};
  for (int v = 0; v < K.height; ++v) {
    for (int u = 0; u < K.width; ++u) {
      Vec3 hit;
      auto z = cast_pixel(scene, world_to_camera, K, {static_cast<double>(u), static_cast<double>(v)}, &hit);
      if (!z || !(*z > 0.0)) {
        ++r.missed;
        continue;
      }
      r.depth(v, u) = *z;
      r.texture(v, u) = scene.texture(hit);
      r.intensity(v, u) = scene.shade(hit, *z);
    }
  }
  if (static_cast<double>(r.missed) >= 0.01 * static_cast<double>(r.depth.size()))
    throw SceneCoverage(std::to_string(r.missed) + " of " + std::to_string(r.depth.size()) + " rays missed the surface");
  return r;
}

struct TrajectoryConfig {
  int frames = 20;
  int size = 64;
  /// Focal length as a multiple of the image width.
  double focal_scale = 0.9;
  /// Camera advance per frame, in scene units.
  double step = 0.06;
  /// Peak camera rotation wobble, radians.
  double wobble = 0.04;
  int subsequence = 0;
  int first_id = 0;
  /// Lateral offset of the whole path (used to place held-out test views).
  double lateral_offset = 0.0;
  std::uint64_t seed = 0;
};

inline CameraIntrinsics make_intrinsics(int size, double focal_scale) {
  const double f = focal_scale * size;
  return {f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size};
}

/// Camera path suited to the scene family: a lateral sweep above a height field, or a forward
/// advance along a tube's centre line.
inline Trajectory make_trajectory(const Scene& scene, const TrajectoryConfig& cfg) {
  if (cfg.frames < 1) throw InvalidArgument("trajectory needs at least one frame");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double ph1 = 2 * std::numbers::pi * unit(rng), ph2 = 2 * std::numbers::pi * unit(rng);
  const double ph3 = 2 * std::numbers::pi * unit(rng);

  Trajectory traj;
  traj.intrinsics = make_intrinsics(cfg.size, cfg.focal_scale);
  const double mid = 0.5 * (cfg.frames - 1);
  for (int i = 0; i < cfg.frames; ++i) {
    const double s = static_cast<double>(i);
    Vec3 centre;
    double yaw = cfg.wobble * std::sin(0.5 * s + ph1);
    const double pitch = cfg.wobble * std::sin(0.37 * s + ph2);
    const double roll = 0.5 * cfg.wobble * std::sin(0.23 * s + ph3);
    if (const auto* tube = std::get_if<TubeSurface>(&scene.surface)) {
      const double z = 0.2 + cfg.step * s;
      centre = Vec3(tube->centre_x(z) + 0.1 * tube->radius * std::sin(0.3 * s + ph1),
                    cfg.lateral_offset + 0.1 * tube->radius * std::sin(0.41 * s + ph2), z);
      const double slope = tube->bend * std::numbers::pi / tube->length * std::cos(std::numbers::pi * z / tube->length);
      yaw += std::atan(slope);
    } else {
      centre = Vec3(cfg.step * (s - mid), cfg.lateral_offset + 0.05 * std::sin(0.3 * s + ph3), 0.05 * std::sin(0.2 * s + ph1));
    }
    const Mat3 camera_to_world_rot = (Eigen::AngleAxisd(yaw, Vec3::UnitY()) * Eigen::AngleAxisd(pitch, Vec3::UnitX()) *
                                      Eigen::AngleAxisd(roll, Vec3::UnitZ()))
                                         .toRotationMatrix();
    const RigidTransform camera_to_world(camera_to_world_rot, centre);
    traj.frames.push_back({cfg.first_id + i, camera_to_world.inverse(), cfg.subsequence});
  }
  return traj;
}

struct SfmSimConfig {
  /// Target number of reconstructed points.
  int num_points = 200;
  /// Isotropic position noise, as a fraction of the scene diameter.
  double point_noise = 0.005;
  /// Fraction of points replaced by gross outliers.
  double outlier_rate = 0.05;
  /// Outlier displacement as a fraction of the scene diameter (never below 10 noise sigmas).
  double outlier_displacement = 0.15;
  /// Image drift per frame of an outlier's tracked position, in pixels. Outliers mimic features
  /// locked to a moving highlight: they barely move in the image, so their parallax is small.
  double outlier_drift = 0.1;
  /// Outliers are drawn in groups from neighbourhoods of twice this many points, so corrupted
  /// regions still hold inliers.
  int outlier_cluster = 6;
  int min_track = 2;
  /// 0 means unbounded.
  int max_track = 0;
  /// Fewer accepted points than this is treated as a reconstruction failure.
  int min_points = 8;
  std::uint64_t seed = 0;
};

struct SimulatedSfm {
  SparsePointSet points;
  std::vector<Vec3> true_positions;
  std::vector<bool> outlier;
  double noise_sigma = 0.0;
  double outlier_magnitude = 0.0;
};

namespace detail {

// Local maxima of the texture raster (strict 3x3), as pixel coordinates.
inline std::vector<Pixel> texture_maxima(const Raster<double>& tex, const DepthMap& depth) {
  std::vector<Pixel> out;
  for (int v = 1; v + 1 < tex.height(); ++v)
    for (int u = 1; u + 1 < tex.width(); ++u) {
      if (!(depth(v, u) > 0.0)) continue;
      const double c = tex(v, u);
      bool is_max = true;
      for (int dv = -1; dv <= 1 && is_max; ++dv)
        for (int du = -1; du <= 1; ++du)
          if ((dv || du) && tex(v + dv, u + du) >= c) {
            is_max = false;
            break;
          }
      if (is_max) out.push_back({static_cast<double>(u), static_cast<double>(v)});
    }
  return out;
}

inline bool visible_in(const Scene& scene, const Frame& f, const CameraIntrinsics& K, const Vec3& world, Pixel* px) {
  const Vec3 pc = f.world_to_camera.apply(world);
  if (!(pc.z() > 0.0)) return false;
  const Pixel p = project(K, pc);
  const long u = std::lround(p.u), v = std::lround(p.v);
  if (u < 0 || u >= K.width || v < 0 || v >= K.height) return false;
  auto z = cast_pixel(scene, f.world_to_camera, K, p);
  if (!z || std::abs(*z - pc.z()) > 1e-6 * pc.z() + 1e-9) return false;
  *px = p;
  return true;
}

}  // namespace detail

/// Stand-in for an SfM reconstruction. Points are picked at texture maxima; each one is tracked
/// over a random contiguous run of frames where it is visible; positions get Gaussian noise and a
/// fixed fraction become gross outliers. Confidences follow compute_confidence().
///
/// Outliers model low-parallax mismatches: their recorded image positions drift by only
/// `outlier_drift` pixels per frame, and the point is placed too deep along its first viewing ray.
/// They come in loose spatial groups. Noise and outliers use their own random streams, so the
/// inliers of a run do not depend on the outlier rate.
inline SimulatedSfm simulate_sfm(const Scene& scene, const Trajectory& trajectory, const SfmSimConfig& cfg) {
  if (trajectory.frames.size() < 2) throw InsufficientParallax("need at least 2 frames");
  if (cfg.min_track < 2) throw InvalidArgument("min_track must be >= 2");
  if (cfg.outlier_cluster < 1) throw InvalidArgument("outlier_cluster must be >= 1");
  if (!(cfg.outlier_drift >= 0.0)) throw InvalidArgument("outlier_drift must be >= 0");
  if (!(cfg.outlier_rate >= 0.0 && cfg.outlier_rate <= 1.0)) throw InvalidArgument("outlier_rate must lie in [0, 1]");
  const CameraIntrinsics& K = trajectory.intrinsics;
  std::mt19937_64 rng(cfg.seed);

  std::vector<Vec3> candidates;
  for (const auto& f : trajectory.frames) {
    Rendering r = render_ground_truth(scene, f.world_to_camera, K);
    for (const Pixel& px : detail::texture_maxima(r.texture, r.depth)) {
      Vec3 hit;
      if (cast_pixel(scene, f.world_to_camera, K, px, &hit)) candidates.push_back(hit);
    }
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  // Top up with uniformly sampled surface points when the texture has too few maxima.
  {
    std::uniform_int_distribution<std::size_t> pick_frame(0, trajectory.frames.size() - 1);
    std::uniform_real_distribution<double> pu(0.0, K.width - 1.0), pv(0.0, K.height - 1.0);
    for (int i = 0; i < 4 * cfg.num_points; ++i) {
      const Frame& f = trajectory.frames[pick_frame(rng)];
      Vec3 hit;
      if (cast_pixel(scene, f.world_to_camera, K, {pu(rng), pv(rng)}, &hit)) candidates.push_back(hit);
    }
  }

  const double min_separation = 0.005 * scene.diameter;
  struct Accepted {
    Vec3 xyz;
    std::vector<Observation> track;
    std::vector<std::pair<int, int>> runs;  // [begin, end) in visible-list positions
    std::vector<Observation> visible;
  };
  std::vector<Accepted> accepted;
  for (const Vec3& c : candidates) {
    if (static_cast<int>(accepted.size()) >= cfg.num_points) break;
    bool too_close = false;
    for (const auto& a : accepted)
      if ((a.xyz - c).norm() < min_separation) {
        too_close = true;
        break;
      }
    if (too_close) continue;
    Accepted a{c, {}, {}, {}};
    int run_start = -1;
    int prev_index = -2;
    for (std::size_t fi = 0; fi < trajectory.frames.size(); ++fi) {
      Pixel px;
      if (!detail::visible_in(scene, trajectory.frames[fi], K, c, &px)) continue;
      const int pos = static_cast<int>(a.visible.size());
      if (static_cast<int>(fi) != prev_index + 1 || trajectory.frames[fi].subsequence !=
                                                        trajectory.frames[static_cast<std::size_t>(std::max(prev_index, 0))].subsequence) {
        if (run_start >= 0) a.runs.emplace_back(run_start, pos);
        run_start = pos;
      }
      a.visible.push_back({trajectory.frames[fi].id, px});
      prev_index = static_cast<int>(fi);
    }
    if (run_start >= 0) a.runs.emplace_back(run_start, static_cast<int>(a.visible.size()));
    std::erase_if(a.runs, [&](const auto& r) { return r.second - r.first < cfg.min_track; });
    if (a.runs.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick_run(0, a.runs.size() - 1);
    const auto [rb, re] = a.runs[pick_run(rng)];
    const int longest = cfg.max_track > 0 ? std::min(re - rb, cfg.max_track) : re - rb;
    const int len = std::uniform_int_distribution<int>(cfg.min_track, longest)(rng);
    const int start = std::uniform_int_distribution<int>(rb, re - len)(rng);
    a.track.assign(a.visible.begin() + start, a.visible.begin() + start + len);
    accepted.push_back(std::move(a));
  }
  if (static_cast<int>(accepted.size()) < cfg.min_points)
    throw InsufficientParallax("only " + std::to_string(accepted.size()) + " points are visible in 2 or more frames (need " +
                               std::to_string(cfg.min_points) + ")");

  SimulatedSfm out;
  out.noise_sigma = cfg.point_noise * scene.diameter;
  out.outlier_magnitude = std::max(10.0 * out.noise_sigma, cfg.outlier_displacement * scene.diameter);
  const std::size_t n = accepted.size();
  const auto n_out = static_cast<std::size_t>(std::llround(cfg.outlier_rate * static_cast<double>(n)));
  std::mt19937_64 noise_rng(cfg.seed ^ 0x6e6f697365ull);
  std::mt19937_64 outlier_rng(cfg.seed ^ 0x6f75746c6965ull);

  // Grow groups: pick a random seed point, then take a random half of its nearest neighbourhood.
  out.outlier.assign(n, false);
  for (std::size_t chosen = 0; chosen < n_out;) {
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < n; ++i)
      if (!out.outlier[i]) free.push_back(i);
    const std::size_t seed_point = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(outlier_rng)];
    std::sort(free.begin(), free.end(), [&](std::size_t a, std::size_t b) {
      const double da = (accepted[a].xyz - accepted[seed_point].xyz).squaredNorm();
      const double db = (accepted[b].xyz - accepted[seed_point].xyz).squaredNorm();
      return da < db || (da == db && a < b);
    });
    free.resize(std::min(free.size(), 2 * static_cast<std::size_t>(cfg.outlier_cluster)));
    std::shuffle(free.begin(), free.end(), outlier_rng);
    const std::size_t take = std::min({free.size(), static_cast<std::size_t>(cfg.outlier_cluster), n_out - chosen});
    for (std::size_t i = 0; i < take; ++i) out.outlier[free[i]] = true;
    chosen += take;
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n; ++i) {
    Accepted& a = accepted[i];
    SparsePoint p;
    p.id = static_cast<int>(i);
    const Vec3 offset(noise(noise_rng), noise(noise_rng), noise(noise_rng));
    p.xyz = a.xyz + out.noise_sigma * offset;
    if (out.outlier[i]) {
      const Frame* f = trajectory.find(a.track.front().frame_id);
      const Vec3 centre = f->world_to_camera.inverse().translation();
      p.xyz = a.xyz + out.outlier_magnitude * (a.xyz - centre).normalized();
      for (std::size_t k = 1; k < a.track.size(); ++k) {
        const double t = angle(outlier_rng);
        a.track[k].pixel = {a.track[k - 1].pixel.u + cfg.outlier_drift * std::cos(t),
                            a.track[k - 1].pixel.v + cfg.outlier_drift * std::sin(t)};
      }
    }
    p.observations = a.track;
    p.weight = compute_confidence(p.observations, trajectory);
    out.points.points.push_back(std::move(p));
    out.true_positions.push_back(a.xyz);
  }
  return out;
}

}  // namespace endodepth
