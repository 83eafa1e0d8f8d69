#pragma once

// Registration-based evaluation: predicted depth maps become point clouds, which are aligned to
// ground truth with a closed-form similarity transform (absorbing the unknown global scale) and
// scored by their residual.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "endodepth/errors.hpp"
#include "endodepth/geometry.hpp"
#include "endodepth/raster.hpp"

namespace endodepth {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Pixel> pixels;  // source pixel of each point; may be empty
  std::size_t size() const { return points.size(); }
};

/// Unprojects every stride-th pixel (rows and columns with index % stride == 0) with depth > 0.
inline PointCloud depth_to_cloud(const DepthMap& depth, const CameraIntrinsics& K, int stride = 1) {
  if (stride < 1) throw InvalidArgument("stride must be >= 1");
  PointCloud cloud;
  for (int v = 0; v < depth.height(); v += stride)
    for (int u = 0; u < depth.width(); u += stride) {
      const double z = depth(v, u);
      if (!(z > 0.0) || !std::isfinite(z)) continue;
      const Pixel px{static_cast<double>(u), static_cast<double>(v)};
      cloud.points.push_back(unproject(K, px, z));
      cloud.pixels.push_back(px);
    }
  if (cloud.points.empty()) throw EmptyCloud("depth map has no valid pixels at stride " + std::to_string(stride));
  return cloud;
}

struct SimilarityResult {
  double scale = 1.0;
  RigidTransform transform;  // q ~ scale * R p + t
  double rms = 0.0;
  double mean_abs = 0.0;

  Vec3 apply(const Vec3& p) const { return scale * (transform.rotation() * p) + transform.translation(); }
};

namespace detail {

// Closed-form least squares (s, R, t) between corresponding point sets (Umeyama).
inline SimilarityResult umeyama(const std::vector<Vec3>& src, const std::vector<Vec3>& dst, bool with_scale) {
  if (src.size() != dst.size()) throw InvalidArgument("alignment needs one-to-one correspondences");
  const std::size_t n = src.size();
  if (n < 3) throw DegenerateAlignment("need at least 3 correspondences, got " + std::to_string(n));
  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= static_cast<double>(n);
  mu_d /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  Mat3 src_scatter = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = src[i] - mu_s, b = dst[i] - mu_d;
    cov += b * a.transpose();
    src_scatter += a * a.transpose();
    var_s += a.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_s /= static_cast<double>(n);

  const Eigen::JacobiSVD<Mat3> spread(src_scatter);
  const auto sv = spread.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0))
    throw DegenerateAlignment("source points are coincident or collinear");

  const Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  const Mat3 R = svd.matrixU() * S * svd.matrixV().transpose();
  const double scale = with_scale ? (svd.singularValues().asDiagonal() * S).trace() / var_s : 1.0;
  if (!(scale > 0.0)) throw DegenerateAlignment("non-positive scale " + std::to_string(scale));
  const Vec3 t = mu_d - scale * R * mu_s;

  SimilarityResult r;
  r.scale = scale;
  r.transform = RigidTransform(R, t);
  double sq = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = (scale * (R * src[i]) + t - dst[i]).norm();
    sq += e * e;
    ab += e;
  }
  r.rms = std::sqrt(sq / static_cast<double>(n));
  r.mean_abs = ab / static_cast<double>(n);
  return r;
}

}  // namespace detail

/// Least-squares similarity (scale, rotation, translation) mapping source onto target, given
/// one-to-one correspondence by index.
inline SimilarityResult similarity_align(const PointCloud& source, const PointCloud& target) {
  return detail::umeyama(source.points, target.points, true);
}

/// Static 3-d tree over a point set for nearest-neighbour queries.
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& points) : points_(points), index_(points.size()) {
    std::iota(index_.begin(), index_.end(), 0);
    nodes_.reserve(points.size());
    if (!points_.empty()) root_ = build(0, index_.size(), 0);
  }

  /// Index of the nearest point and its squared distance.
  std::pair<std::size_t, double> nearest(const Vec3& q) const {
    std::pair<std::size_t, double> best{0, std::numeric_limits<double>::infinity()};
    if (root_ >= 0) search(root_, q, best);
    return best;
  }

 private:
  struct Node {
    std::size_t point;
    int axis;
    int left = -1, right = -1;
  };

  int build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const std::size_t mid = (lo + hi) / 2;
    std::nth_element(index_.begin() + static_cast<std::ptrdiff_t>(lo), index_.begin() + static_cast<std::ptrdiff_t>(mid),
                     index_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({index_[mid], axis});
    const int l = build(lo, mid, depth + 1);
    const int r = build(mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void search(int id, const Vec3& q, std::pair<std::size_t, double>& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Vec3& p = points_[n.point];
    const double d2 = (p - q).squaredNorm();
    if (d2 < best.second) best = {n.point, d2};
    const double diff = q[n.axis] - p[n.axis];
    const int near = diff < 0 ? n.left : n.right;
    const int far = diff < 0 ? n.right : n.left;
    if (near >= 0) search(near, q, best);
    if (far >= 0 && diff * diff < best.second) search(far, q, best);
  }

  const std::vector<Vec3>& points_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

struct IcpResult {
  RigidTransform transform;  // applied to the source
  double rms = 0.0;
  int iterations = 0;
  std::vector<double> rms_history;  // history[0] is the starting residual
  bool diverged = false;
};

/// Point-to-nearest-neighbour ICP (rigid). Stops when an iteration improves the RMS by less than
/// `tol`, after `max_iters`, or when the RMS rises on two consecutive iterations (the best
/// transform seen is kept and `diverged` is set).
inline IcpResult icp_refine(const PointCloud& source, const PointCloud& target, int max_iters = 50, double tol = 1e-10) {
  if (source.points.empty() || target.points.empty()) throw EmptyCloud("icp_refine needs non-empty clouds");
  const KdTree tree(target.points);
  auto residual = [&](const RigidTransform& T, std::vector<Vec3>* matched) {
    double sq = 0.0;
    if (matched) matched->resize(source.points.size());
    for (std::size_t i = 0; i < source.points.size(); ++i) {
      const auto [idx, d2] = tree.nearest(T.apply(source.points[i]));
      sq += d2;
      if (matched) (*matched)[i] = target.points[idx];
    }
    return std::sqrt(sq / static_cast<double>(source.points.size()));
  };

  IcpResult r;
  std::vector<Vec3> matched;
  RigidTransform current;
  r.rms = residual(current, &matched);
  r.rms_history.push_back(r.rms);
  if (r.rms <= tol) return r;

  RigidTransform best = current;
  int rises = 0;
  std::vector<Vec3> moved(source.points.size());
  for (int it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = current.apply(source.points[i]);
    const SimilarityResult step = detail::umeyama(moved, matched, false);
    current = step.transform.compose(current);
    const double rms = residual(current, &matched);
    const double prev = r.rms_history.back();
    r.rms_history.push_back(rms);
    ++r.iterations;
    if (rms > prev) {
      if (++rises >= 2) {
        r.diverged = true;
        break;
      }
    } else {
      rises = 0;
    }
    if (rms < r.rms) {
      r.rms = rms;
      best = current;
    }
    if (std::abs(prev - rms) < tol) break;
  }
  r.transform = best;
  return r;
}

struct FrameResidual {
  int frame_id = 0;
  double rms = 0.0;
  double mean_abs = 0.0;
  double scale = 1.0;
  std::size_t points = 0;
};

struct SceneReport {
  std::string scene_id;
  double diameter = 1.0;
  std::vector<FrameResidual> frames;
  std::size_t skipped_frames = 0;
  double mean_rms = 0.0;
  double std_rms = 0.0;  // sample standard deviation (n - 1)
  double mean_abs = 0.0;
  double mean_scale = 0.0;

  double mean_rms_percent() const { return 100.0 * mean_rms / diameter; }
  double std_rms_percent() const { return 100.0 * std_rms / diameter; }
};

struct EvalReport {
  std::vector<SceneReport> scenes;
};

/// Mean and sample standard deviation, two-pass.
inline std::pair<double, double> mean_and_sample_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

/// Aligns one predicted depth map to ground truth using pixel-wise correspondences.
inline FrameResidual evaluate_frame(int frame_id, const DepthMap& predicted, const DepthMap& truth,
                                    const CameraIntrinsics& K, int stride = 1) {
  if (predicted.width() != truth.width() || predicted.height() != truth.height())
    throw ShapeError("prediction and ground truth differ in size");
  PointCloud pred, gt;
  for (int v = 0; v < truth.height(); v += stride)
    for (int u = 0; u < truth.width(); u += stride) {
      const double zp = predicted(v, u), zt = truth(v, u);
      if (!(zp > 0.0) || !(zt > 0.0) || !std::isfinite(zp)) continue;
      const Pixel px{static_cast<double>(u), static_cast<double>(v)};
      pred.points.push_back(unproject(K, px, zp));
      gt.points.push_back(unproject(K, px, zt));
    }
  if (pred.points.empty()) throw EmptyCloud("frame " + std::to_string(frame_id) + " has no pixel valid in both maps");
  const SimilarityResult a = similarity_align(pred, gt);
  return {frame_id, a.rms, a.mean_abs, a.scale, pred.size()};
}

struct EvalFrame {
  int frame_id = 0;
  const DepthMap* truth = nullptr;
};

using DepthPredictor = std::function<DepthMap(int frame_id)>;

/// Per-frame residuals plus the per-scene mean and sample std. Frames that fail are skipped and counted.
inline SceneReport evaluate_scene(const std::string& scene_id, const DepthPredictor& predict,
                                  const std::vector<EvalFrame>& frames, const CameraIntrinsics& K, double diameter,
                                  int stride = 1) {
  if (frames.empty()) throw InvalidArgument("evaluate_scene needs at least one frame");
  SceneReport rep;
  rep.scene_id = scene_id;
  rep.diameter = diameter;
  for (const auto& f : frames) {
    try {
      rep.frames.push_back(evaluate_frame(f.frame_id, predict(f.frame_id), *f.truth, K, stride));
    } catch (const EmptyCloud&) {
      ++rep.skipped_frames;
    } catch (const DegenerateAlignment&) {
      ++rep.skipped_frames;
    }
  }
  std::vector<double> rms, abs, scale;
  for (const auto& f : rep.frames) {
    rms.push_back(f.rms);
    abs.push_back(f.mean_abs);
    scale.push_back(f.scale);
  }
  std::tie(rep.mean_rms, rep.std_rms) = mean_and_sample_std(rms);
  rep.mean_abs = mean_and_sample_std(abs).first;
  rep.mean_scale = mean_and_sample_std(scale).first;
  return rep;
}

inline nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : report.scenes) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : s.frames)
      frames.push_back({{"frame_id", f.frame_id},
                        {"residual_rms", f.rms},
                        {"residual_mean_abs", f.mean_abs},
                        {"residual_rms_percent", 100.0 * f.rms / s.diameter},
                        {"scale", f.scale},
                        {"points", f.points}});
    scenes.push_back({{"scene_id", s.scene_id},
                      {"diameter", s.diameter},
                      {"frames", frames},
                      {"skipped_frames", s.skipped_frames},
                      {"mean_residual_rms", s.mean_rms},
                      {"std_residual_rms", s.std_rms},
                      {"mean_residual_rms_percent", s.mean_rms_percent()},
                      {"std_residual_rms_percent", s.std_rms_percent()},
                      {"mean_residual_mean_abs", s.mean_abs},
                      {"mean_scale", s.mean_scale}});
  }
  return {{"scenes", scenes}};
}

/// One row per frame: scene_id,frame_id,residual,scale.
inline std::string to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << std::setprecision(17) << "scene_id,frame_id,residual,scale\n";
  for (const auto& s : report.scenes)
    for (const auto& f : s.frames) os << s.scene_id << ',' << f.frame_id << ',' << f.rms << ',' << f.scale << '\n';
  return os.str();
}

/// ASCII PLY with x y z and, when `gray` is given (one value in [0,1] per point), red green blue.
inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud, const std::vector<double>* gray = nullptr) {
  if (gray && gray->size() != cloud.size()) throw InvalidArgument("one colour value per point is required");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (gray) os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "end_header\n" << std::setprecision(9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    os << p.x() << ' ' << p.y() << ' ' << p.z();
    if (gray) {
      const int c = static_cast<int>(std::lround(255.0 * std::clamp((*gray)[i], 0.0, 1.0)));
      os << ' ' << c << ' ' << c << ' ' << c;
    }
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace endodepth
