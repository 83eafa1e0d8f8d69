#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "endodepth/gradcheck.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/scene_sim.hpp"
#include "endodepth/supervision.hpp"

using namespace endodepth;

namespace {

// Direct evaluation of the weighted scale-invariant loss on plain arrays.
double reference_loss(const std::vector<double>& y, const std::vector<double>& ystar, const std::vector<double>& w) {
  double sw = 0.0, swd = 0.0, swd2 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (w[i] <= 0.0) continue;
    const double d = std::log(y[i]) - std::log(ystar[i]);
    sw += w[i];
    swd += w[i] * d;
    swd2 += w[i] * d * d;
  }
  return swd2 / sw - (swd * swd) / (sw * sw);
}

struct Instance {
  int w = 0, h = 0;
  std::vector<double> y;
  SparseDepthMap sparse;
  SoftMask mask;
};

Instance random_instance(std::mt19937_64& rng, int w = 8, int h = 6) {
  std::uniform_real_distribution<double> z(0.2, 5.0), wt(0.0, 1.0), coin(0.0, 1.0);
  Instance in{w, h, std::vector<double>(static_cast<std::size_t>(w) * h), {0, DepthMap(w, h, 0.0)},
              {0, Raster<double>(w, h, 0.0)}};
  for (double& v : in.y) v = z(rng);
  bool any = false;
  for (std::size_t i = 0; i < in.y.size(); ++i)
    if (coin(rng) < 0.3) {
      in.sparse.raster[i] = z(rng);
      in.mask.raster[i] = 0.05 + wt(rng);
      any = true;
    }
  if (!any) {
    in.sparse.raster[0] = 1.0;
    in.mask.raster[0] = 1.0;
  }
  return in;
}

double loss_value(const std::vector<double>& y, const Instance& in, const SoftMask& mask) {
  Tape t;
  return scale_invariant_weighted_loss(t.variable({1, in.h, in.w}, y), in.sparse, mask).item();
}

}  // namespace

TEST(SparseLoss, TwoPixelHandValue) {
  Tape t;
  SparseDepthMap sparse{0, DepthMap(2, 1, 1.0)};
  SoftMask mask{0, Raster<double>(2, 1, 1.0)};
  const double value = scale_invariant_weighted_loss(t.variable({1, 1, 2}, {1.0, 4.0}), sparse, mask).item();
  const double l4 = std::log(4.0);
  EXPECT_NEAR(value, 0.5 * l4 * l4 - 0.25 * l4 * l4, 1e-12);
  EXPECT_NEAR(value, 0.4804530139182014, 1e-9);
}

TEST(SparseLoss, ZeroAtTruthAndAtAnyScale) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Instance in = random_instance(rng);
    std::vector<double> y = in.y;
    for (std::size_t k = 0; k < y.size(); ++k)
      if (in.mask.raster[k] > 0.0) y[k] = in.sparse.raster[k];
    EXPECT_NEAR(loss_value(y, in, in.mask), 0.0, 1e-15);
    for (double& v : y) v *= 3.7;
    EXPECT_NEAR(loss_value(y, in, in.mask), 0.0, 1e-14);
  }
}

TEST(SparseLoss, MatchesReferenceAndIsNonNegative) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    const Instance in = random_instance(rng);
    const double v = loss_value(in.y, in, in.mask);
    EXPECT_NEAR(v, reference_loss(in.y, in.sparse.raster.data(), in.mask.raster.data()), 1e-12);
    EXPECT_GE(v, -1e-15);
  }
}

TEST(SparseLoss, ScaleInvarianceOfPredictionsAndWeights) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Instance in = random_instance(rng);
    const double base = loss_value(in.y, in, in.mask);
    for (double alpha : {0.1, 3.0, 10.0}) {
      std::vector<double> y = in.y;
      for (double& v : y) v *= alpha;
      EXPECT_LT(std::abs(loss_value(y, in, in.mask) - base), 1e-10);
      SoftMask m = in.mask;
      for (double& v : m.raster.values()) v *= alpha;
      EXPECT_LT(std::abs(loss_value(in.y, in, m) - base), 1e-10);
    }
  }
}

TEST(SparseLoss, ZeroWeightPixelsContributeNothing) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    Instance in = random_instance(rng);
    const double base = loss_value(in.y, in, in.mask);
    for (std::size_t k = 0; k < in.y.size(); ++k)
      if (in.mask.raster[k] == 0.0) in.sparse.raster[k] = 0.123 + static_cast<double>(k);
    EXPECT_EQ(loss_value(in.y, in, in.mask), base);
  }
}

TEST(SparseLoss, Errors) {
  Tape t;
  SparseDepthMap sparse{0, DepthMap(2, 1, 1.0)};
  SoftMask empty{0, Raster<double>(2, 1, 0.0)};
  SoftMask full{0, Raster<double>(2, 1, 1.0)};
  EXPECT_THROW(scale_invariant_weighted_loss(t.variable({1, 1, 2}, {1.0, 1.0}), sparse, empty), EmptyAnnotation);
  EXPECT_THROW(scale_invariant_weighted_loss(t.variable({1, 1, 2}, {1.0, -1.0}), sparse, full), NumericalError);
  EXPECT_THROW(scale_invariant_weighted_loss(t.variable({1, 1, 3}, {1.0, 1.0, 1.0}), sparse, full), ShapeError);
}

TEST(SparseLoss, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    const Instance in = random_instance(rng);
    const auto r = check_gradient("sparse", {1, in.h, in.w}, in.y, [&](const Tensor& x) {
      return scale_invariant_weighted_loss(x, in.sparse, in.mask);
    });
    EXPECT_LT(r.rel_error, 1e-5);
  }
}

TEST(ConsistencyLoss, Examples) {
  Tape t;
  BinaryMask valid(3, 2, 1);
  valid[1] = 0;
  const std::vector<double> a{1, 2, 3, 4, 5, 6};
  std::vector<double> b = a;
  EXPECT_EQ(depth_consistency_loss(t.constant({1, 2, 3}, a), valid, t.constant({1, 2, 3}, b)).item(), 0.0);
  for (double& v : b) v += 0.5;
  EXPECT_DOUBLE_EQ(depth_consistency_loss(t.constant({1, 2, 3}, a), valid, t.constant({1, 2, 3}, b)).item(), 0.5);
  EXPECT_THROW(depth_consistency_loss(t.constant({1, 2, 3}, a), BinaryMask(3, 2, 0), t.constant({1, 2, 3}, b)),
               WarpOutOfView);
}

TEST(ConsistencyLoss, BruteForceOracle) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> z(0.1, 3.0), coin(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> a(35), b(35);
    BinaryMask valid(7, 5, 0);
    for (std::size_t k = 0; k < 35; ++k) {
      a[k] = z(rng);
      b[k] = z(rng);
      valid[k] = coin(rng) < 0.6;
    }
    valid[0] = 1;
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < 35; ++k)
      if (valid[k]) {
        acc += std::abs(a[k] - b[k]);
        ++n;
      }
    Tape t;
    EXPECT_NEAR(depth_consistency_loss(t.constant({1, 5, 7}, a), valid, t.constant({1, 5, 7}, b)).item(),
                acc / static_cast<double>(n), 1e-12);
  }
}

TEST(TotalLoss, OmegaZeroIsSumOfSparseTerms) {
  std::mt19937_64 rng(7);
  const Instance a = random_instance(rng, 8, 8), b = random_instance(rng, 8, 8);
  PairAnnotations pair{a.sparse, b.sparse, a.mask, b.mask, RigidTransform::translate(0.01, 0, 0),
                       {8, 8, 3.5, 3.5, 8, 8}};
  Tape t;
  const auto l = total_loss(pair, t.variable({1, 8, 8}, a.y), t.variable({1, 8, 8}, b.y), 0.0);
  EXPECT_EQ(l.breakdown.total, l.breakdown.sparse_j + l.breakdown.sparse_k);
  EXPECT_EQ(l.breakdown.consist_jk, 0.0);
  EXPECT_EQ(t.count_op("depth_warp"), 0u);
}

TEST(TotalLoss, BreakdownIdentity) {
  std::mt19937_64 rng(8);
  const Instance a = random_instance(rng, 8, 8), b = random_instance(rng, 8, 8);
  PairAnnotations pair{a.sparse, b.sparse, a.mask, b.mask, RigidTransform::translate(0.01, 0, 0),
                       {8, 8, 3.5, 3.5, 8, 8}};
  Tape t;
  const auto l = total_loss(pair, t.variable({1, 8, 8}, a.y), t.variable({1, 8, 8}, b.y), 2e-4);
  const auto& bd = l.breakdown;
  EXPECT_NEAR(bd.total, bd.sparse_j + bd.sparse_k + bd.omega * (bd.consist_jk + bd.consist_kj), 1e-12);
  EXPECT_GT(bd.consist_jk, 0.0);
  EXPECT_EQ(t.count_op("depth_warp"), 2u);
}

TEST(TotalLoss, PerfectPredictionsOnPlaneScene) {
  // Fronto-parallel plane, noise-free annotations, ground-truth predictions: the global optimum.
  const Scene scene = make_plane_scene({Vec3(0, 0, 2), Vec3(0, 0, 1)});
  const CameraIntrinsics K = make_intrinsics(32, 0.9);
  const RigidTransform Tj = RigidTransform::identity();
  const RigidTransform Tk = RigidTransform::translate(-0.05, 0.0, 0.0);
  Trajectory traj{{{0, Tj, 0}, {1, Tk, 0}}, K};
  SparsePointSet pts;
  for (int i = 0; i < 10; ++i) {
    const Vec3 x(-0.3 + 0.06 * i, 0.1 * std::sin(i), 2.0);
    pts.points.push_back({i, x, 0.0, {{0, project(K, Tj.apply(x))}, {1, project(K, Tk.apply(x))}}});
  }
  assign_confidences(pts, traj);
  const auto fj = annotate_frame(pts, traj.frames[0], K);
  const auto fk = annotate_frame(pts, traj.frames[1], K);
  ASSERT_TRUE(fj && fk);
  PairAnnotations pair{fj->sparse, fk->sparse, fj->mask, fk->mask, relative_pose(Tj, Tk), K};
  const Rendering rj = render_ground_truth(scene, Tj, K), rk = render_ground_truth(scene, Tk, K);
  Tape t;
  const auto l = total_loss(pair, t.variable(rj.depth), t.variable(rk.depth), 2e-4);
  EXPECT_LT(l.breakdown.sparse_j, 1e-6);
  EXPECT_LT(l.breakdown.sparse_k, 1e-6);
  EXPECT_LT(l.breakdown.consist_jk, 1e-6);
  EXPECT_LT(l.breakdown.consist_kj, 1e-6);
  EXPECT_LT(l.breakdown.total, 1e-6 * (2 + 2 * 2e-4));
}

TEST(TotalLoss, GradientMatchesFiniteDifference) {
  // Gradient through both branches, scaling and (frozen) warps, w.r.t. the two predictions.
  std::mt19937_64 rng(9);
  const Instance a = random_instance(rng, 8, 8), b = random_instance(rng, 8, 8);
  PairAnnotations pair{a.sparse, b.sparse, a.mask, b.mask,
                       RigidTransform::from_axis_angle(Vec3(0, 1, 0), 0.02, Vec3(0.03, 0, 0.02)),
                       {8, 8, 3.5, 3.5, 8, 8}};
  std::vector<double> x0 = a.y;
  x0.insert(x0.end(), b.y.begin(), b.y.end());
  const auto r = check_gradient("total", {2, 8, 8}, x0, [&](const Tensor& x) {
    // Large omega so the consistency terms matter numerically.
    return total_loss(pair, ops::slice(x, 0, {1, 8, 8}), ops::slice(x, 64, {1, 8, 8}), 0.5).total;
  });
  EXPECT_LT(r.rel_error, 1e-4);
}
