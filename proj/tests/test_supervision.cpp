#include <gtest/gtest.h>

#include <map>
#include <random>

#include "endodepth/pipeline.hpp"
#include "endodepth/supervision.hpp"

using namespace endodepth;

namespace {

const CameraIntrinsics K64{100, 100, 32, 32, 64, 64};

Trajectory two_frames() { return {{{0, RigidTransform::identity(), 0}, {1, RigidTransform::translate(0.1, 0, 0), 0}}, K64}; }

SparsePoint point_at(int id, const Vec3& xyz, std::vector<int> frames, double weight = 1.0) {
  SparsePoint p{id, xyz, weight, {}};
  for (int f : frames) p.observations.push_back({f, {0, 0}});
  return p;
}

}  // namespace

TEST(SparseDepth, SinglePointOnAxis) {
  SparsePointSet pts{{point_at(0, Vec3(0, 0, 2), {0, 1})}};
  const SparseDepthMap m = build_sparse_depth_map(pts, 0, RigidTransform::identity(), K64);
  EXPECT_EQ(m.raster(32, 32), 2.0);
  EXPECT_EQ(count_nonzero(m.raster), 1u);
}

TEST(SparseDepth, UnobservedPointContributesNothing) {
  SparsePointSet pts{{point_at(0, Vec3(0, 0, 2), {1, 2})}};
  const SparseDepthMap m = build_sparse_depth_map(pts, 0, RigidTransform::identity(), K64);
  EXPECT_EQ(count_nonzero(m.raster), 0u);
}

TEST(SparseDepth, SkipsAreCounted) {
  SparsePointSet pts{{point_at(0, Vec3(0, 0, -2), {0, 1}), point_at(1, Vec3(5, 0, 1), {0, 1}),
                      point_at(2, Vec3(0, 0, 3), {0, 1}, 0.0)}};
  ScatterSummary s;
  build_sparse_depth_map(pts, 0, RigidTransform::identity(), K64, &s);
  EXPECT_EQ(s.behind_camera, 1u);
  EXPECT_EQ(s.out_of_bounds, 1u);
  EXPECT_EQ(s.written, 0u);
}

TEST(SparseDepth, RoundingTiesGoAwayFromZero) {
  // u = 100 * 0.5 / 100 + 32 = 32.5 rounds to 33.
  SparsePointSet pts{{point_at(0, Vec3(0.5, 0, 100), {0, 1})}};
  const SparseDepthMap m = build_sparse_depth_map(pts, 0, RigidTransform::identity(), K64);
  EXPECT_EQ(m.raster(32, 33), 100.0);
}

TEST(SparseDepth, CollisionsMatchBruteForceScatter) {
  std::mt19937_64 rng(11);
  const CameraIntrinsics K{6, 6, 3.5, 2.5, 8, 6};
  std::uniform_real_distribution<double> xy(-0.7, 0.7), z(0.5, 3.0), w(0.1, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    SparsePointSet pts;
    for (int i = 0; i < 80; ++i) {
      const double zz = z(rng);
      pts.points.push_back(point_at(i, Vec3(xy(rng) * zz, xy(rng) * zz, zz), {0, 1}, w(rng)));
    }
    const Scatter s = scatter_points(pts, 0, RigidTransform::identity(), K);
    // oracle: for each pixel, minimum depth over all points that round there
    DepthMap oracle(8, 6, 0.0);
    std::vector<int> owner(48, -1);
    for (const auto& p : pts.points) {
      const double u = 6 * p.xyz.x() / p.xyz.z() + 3.5, v = 6 * p.xyz.y() / p.xyz.z() + 2.5;
      const long iu = std::lround(u), iv = std::lround(v);
      if (iu < 0 || iu >= 8 || iv < 0 || iv >= 6) continue;
      double& cell = oracle(static_cast<int>(iv), static_cast<int>(iu));
      if (cell == 0.0 || p.xyz.z() < cell) {
        cell = p.xyz.z();
        owner[static_cast<std::size_t>(iv * 8 + iu)] = p.id;
      }
    }
    ASSERT_EQ(s.depth, oracle);
    EXPECT_EQ(s.winner, owner);
    const SoftMask mask = build_soft_mask(pts, s);
    for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(mask.raster[i] > 0.0, oracle[i] > 0.0);
  }
}

TEST(Confidence, TwoObservationsTenPixels) {
  const Trajectory t = two_frames();
  const std::vector<Observation> obs{{0, {10, 10}}, {1, {16, 18}}};
  EXPECT_DOUBLE_EQ(compute_confidence(obs, t), 20.0);
}

TEST(Confidence, FourObservationsAndNormalisation) {
  Trajectory t = two_frames();
  t.frames.push_back({2, RigidTransform::translate(0.2, 0, 0), 0});
  t.frames.push_back({3, RigidTransform::translate(0.3, 0, 0), 0});
  // 5 + 5 + 10 = 20 px of accumulated displacement, given out of order
  const std::vector<Observation> obs{{2, {10, 10}}, {0, {0, 10}}, {3, {20, 10}}, {1, {5, 10}}};
  EXPECT_DOUBLE_EQ(compute_confidence(obs, t), 80.0);

  SparsePointSet pts{{SparsePoint{0, Vec3(0, 0, 2), 20.0, {{0, {}}, {1, {}}}},
                      SparsePoint{1, Vec3(0.5, 0.5, 2), 80.0, {{0, {}}, {1, {}}}}}};
  const SoftMask m = build_soft_mask(pts, 0, RigidTransform::identity(), K64);
  EXPECT_DOUBLE_EQ(m.raster(32, 32), 0.25);
  EXPECT_DOUBLE_EQ(m.raster(57, 57), 1.0);
}

TEST(Confidence, ZeroParallaxAndErrors) {
  const Trajectory t = two_frames();
  EXPECT_EQ(compute_confidence(std::vector<Observation>{{0, {3, 3}}, {1, {3, 3}}}, t), 0.0);
  EXPECT_THROW(compute_confidence(std::vector<Observation>{{0, {3, 3}}}, t), InsufficientObservations);
  EXPECT_THROW(compute_confidence(std::vector<Observation>{{0, {3, 3}}, {7, {3, 3}}}, t), ReferentialIntegrityError);
}

TEST(Confidence, MonotoneInObservations) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> px(0, 64);
  Trajectory t{{}, K64};
  for (int i = 0; i < 10; ++i) t.frames.push_back({i, RigidTransform::identity(), 0});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Observation> obs{{0, {px(rng), px(rng)}}, {1, {px(rng), px(rng)}}};
    double prev = compute_confidence(obs, t);
    for (int f = 2; f < 10; ++f) {
      obs.push_back({f, {px(rng), px(rng)}});
      const double c = compute_confidence(obs, t);
      EXPECT_GE(c, prev);
      prev = c;
    }
  }
}

TEST(SoftMask, SinglePointIsOne) {
  SparsePointSet pts{{SparsePoint{0, Vec3(0, 0, 2), 20.0, {{0, {}}, {1, {}}}}}};
  EXPECT_EQ(build_soft_mask(pts, 0, RigidTransform::identity(), K64).raster(32, 32), 1.0);
}

TEST(SoftMask, EmptyFrameThrows) {
  SparsePointSet pts{{point_at(0, Vec3(0, 0, 2), {1, 2})}};
  EXPECT_THROW(build_soft_mask(pts, 0, RigidTransform::identity(), K64), EmptyAnnotation);
  SparsePointSet flat{{point_at(0, Vec3(0, 0, 2), {0, 1}, 0.0)}};
  EXPECT_THROW(build_soft_mask(flat, 0, RigidTransform::identity(), K64), EmptyAnnotation);
}

TEST(Pairs, CountsAndExclusion) {
  Trajectory t{{}, K64};
  std::map<int, FrameAnnotation> ann;
  std::map<int, IntensityImage> img;
  for (int i = 0; i < 5; ++i) {
    t.frames.push_back({i, RigidTransform::translate(0.1 * i, 0, 0), 0});
    if (i == 2) continue;  // no annotations for frame 2
    ann[i] = FrameAnnotation{i, {i, DepthMap(64, 64, 0.0)}, {i, Raster<double>(64, 64, 0.0)}, {}};
    img[i] = IntensityImage(64, 64, 0.5);
  }
  const auto all = assemble_pairs(t, ann, img);
  EXPECT_EQ(all.size(), 6u);
  for (const auto& p : all) {
    EXPECT_NE(p.frame_j, 2);
    EXPECT_NE(p.frame_k, 2);
    EXPECT_LT(p.frame_j, p.frame_k);
    EXPECT_TRUE(p.annotations.k_from_j.is_approx(
        relative_pose(t.find(p.frame_j)->world_to_camera, t.find(p.frame_k)->world_to_camera), 1e-15));
  }
  t.frames.erase(t.frames.begin() + 2);
  EXPECT_EQ(assemble_pairs(t, ann, img, {1}).size(), 3u);
}

TEST(Pairs, SubsequencesAreNotMixed) {
  Trajectory t{{}, K64};
  std::map<int, FrameAnnotation> ann;
  for (int i = 0; i < 4; ++i) {
    t.frames.push_back({i, RigidTransform::identity(), i / 2});
    ann[i] = FrameAnnotation{i, {i, DepthMap(64, 64, 0.0)}, {i, Raster<double>(64, 64, 0.0)}, {}};
  }
  EXPECT_EQ(assemble_pairs(t, ann, {}).size(), 2u);
}

TEST(Annotation, GeneratedDatasetInvariants) {
  GenConfig cfg;
  cfg.size = 32;
  cfg.frames = 6;
  cfg.test_frames = 0;
  cfg.sfm.num_points = 60;
  cfg.sfm.point_noise = 0.0;
  cfg.sfm.outlier_rate = 0.0;
  cfg.seed = 5;
  const GeneratedDataset g = generate_dataset(cfg);
  const Trajectory traj = g.dataset.trajectory("train");
  std::size_t checked = 0;
  for (const auto& f : traj.frames) {
    const auto a = annotate_frame(g.dataset.points, f, traj.intrinsics);
    if (!a) continue;
    double peak = 0.0;
    for (std::size_t i = 0; i < a->mask.raster.size(); ++i) {
      EXPECT_EQ(a->mask.raster[i] > 0.0, a->sparse.raster[i] > 0.0);
      EXPECT_GE(a->mask.raster[i], 0.0);
      EXPECT_LE(a->mask.raster[i], 1.0);
      peak = std::max(peak, a->mask.raster[i]);
      if (a->sparse.raster[i] > 0.0) {
        // noise-free point: annotation depth agrees with the rendered depth up to one pixel of relief
        const double truth = g.dataset.find(f.id)->depth[i];
        EXPECT_NEAR(a->sparse.raster[i], truth, 0.05 * truth);
        ++checked;
      }
    }
    EXPECT_EQ(peak, 1.0);
  }
  EXPECT_GT(checked, 20u);
}

TEST(Annotation, EmptyPointSetYieldsNoPairs) {
  GenConfig cfg;
  cfg.size = 16;
  cfg.frames = 3;
  cfg.test_frames = 0;
  cfg.sfm.num_points = 20;
  cfg.seed = 2;
  GeneratedDataset g = generate_dataset(cfg);
  g.dataset.points.points.clear();
  PairBuildSummary s;
  EXPECT_TRUE(build_training_pairs(g.dataset, {}, false, &s).empty());
  EXPECT_EQ(s.empty_frames, 3u);
}
