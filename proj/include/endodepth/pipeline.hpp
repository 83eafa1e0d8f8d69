#pragma once

// Glue between the simulator, the on-disk dataset and the trainer: synthetic dataset generation
// and training-pair assembly from a loaded dataset.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "endodepth/dataset_io.hpp"
#include "endodepth/scene_sim.hpp"
#include "endodepth/supervision.hpp"

namespace endodepth {

struct GenConfig {
  std::string family = "heightfield";  // "heightfield" or "tube"
  int size = 64;
  int frames = 20;
  /// Held-out views on a parallel path; they carry ground truth but no sparse observations.
  int test_frames = 4;
  double focal_scale = 0.9;
  double step = 0.06;
  double wobble = 0.04;
  HeightFieldConfig heightfield;
  SfmSimConfig sfm;
  std::uint64_t seed = 0;

  void validate() const {
    if (family != "heightfield" && family != "tube") throw InvalidArgument("unknown scene family '" + family + "'");
    if (size < 8) throw InvalidArgument("size must be >= 8");
    if (frames < 2) throw InvalidArgument("frames must be >= 2");
    if (test_frames < 0) throw InvalidArgument("test_frames must be >= 0");
    if (!(sfm.point_noise >= 0.0)) throw InvalidArgument("point noise must be >= 0");
    if (!(sfm.outlier_rate >= 0.0 && sfm.outlier_rate <= 1.0)) throw InvalidArgument("outlier rate must lie in [0, 1]");
  }
};

inline Json to_json(const GenConfig& c) {
  return {{"family", c.family},
          {"size", c.size},
          {"frames", c.frames},
          {"test_frames", c.test_frames},
          {"focal_scale", c.focal_scale},
          {"step", c.step},
          {"wobble", c.wobble},
          {"seed", c.seed},
          {"heightfield",
           {{"bumps", c.heightfield.bumps},
            {"base", c.heightfield.base},
            {"amplitude", c.heightfield.amplitude},
            {"slope", c.heightfield.slope},
            {"extent", c.heightfield.extent},
            {"sigma_min", c.heightfield.sigma_min}}},
          {"sfm",
           {{"num_points", c.sfm.num_points},
            {"point_noise", c.sfm.point_noise},
            {"outlier_rate", c.sfm.outlier_rate},
            {"outlier_displacement", c.sfm.outlier_displacement},
            {"min_track", c.sfm.min_track},
            {"max_track", c.sfm.max_track},
            {"outlier_drift", c.sfm.outlier_drift},
            {"outlier_cluster", c.sfm.outlier_cluster},
            {"min_points", c.sfm.min_points}}}};
}

struct GeneratedDataset {
  Scene scene;
  Dataset dataset;
  SimulatedSfm sfm;
};

namespace detail {
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Renders a synthetic scene along a training path (subsequence 0) and a held-out path
/// (subsequence 1, split "test"), and simulates SfM over the training path. Images are quantised
/// to 16 bits and depths to float so the in-memory dataset equals what read_dataset() returns.
inline GeneratedDataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  GeneratedDataset g;
  g.scene = cfg.family == "tube" ? make_tube_scene(detail::sub_seed(cfg.seed, 1))
                                 : make_heightfield_scene(detail::sub_seed(cfg.seed, 1), cfg.heightfield);

  TrajectoryConfig tc;
  tc.frames = cfg.frames;
  tc.size = cfg.size;
  tc.focal_scale = cfg.focal_scale;
  tc.step = cfg.step;
  tc.wobble = cfg.wobble;
  tc.seed = detail::sub_seed(cfg.seed, 2);
  const Trajectory train = make_trajectory(g.scene, tc);

  Trajectory test;
  if (cfg.test_frames > 0) {
    TrajectoryConfig hc = tc;
    hc.frames = cfg.test_frames;
    hc.subsequence = 1;
    hc.first_id = cfg.frames;
    // Spread the held-out views over the same stretch of surface, shifted sideways.
    hc.step = cfg.test_frames > 1 ? tc.step * (cfg.frames - 1) / (cfg.test_frames - 1) : 0.0;
    hc.lateral_offset = cfg.family == "tube" ? 0.08 * std::get<TubeSurface>(g.scene.surface).radius : 0.12;
    hc.seed = detail::sub_seed(cfg.seed, 3);
    test = make_trajectory(g.scene, hc);
  }

  SfmSimConfig sc = cfg.sfm;
  sc.seed = detail::sub_seed(cfg.seed, 4);
  g.sfm = simulate_sfm(g.scene, train, sc);

  Dataset& d = g.dataset;
  d.scene_id = cfg.family + "-" + std::to_string(cfg.seed);
  d.family = cfg.family;
  d.diameter = g.scene.diameter;
  d.intrinsics = train.intrinsics;
  d.generator = to_json(cfg);
  d.generator["outliers"] = std::count(g.sfm.outlier.begin(), g.sfm.outlier.end(), true);
  d.points = g.sfm.points;
  auto add = [&](const Frame& f, const char* split) {
    Rendering r = render_ground_truth(g.scene, f.world_to_camera, train.intrinsics);
    quantize_to_16bit(r.intensity);
    quantize_to_float(r.depth);
    DatasetFrame df;
    df.id = f.id;
    df.world_to_camera = f.world_to_camera;
    df.subsequence = f.subsequence;
    df.split = split;
    df.image = std::move(r.intensity);
    df.depth = std::move(r.depth);
    df.image_path = detail::frame_file("images", f.id, "pgm");
    df.depth_path = detail::frame_file("depth", f.id, "pfm");
    d.frames.push_back(std::move(df));
  };
  for (const auto& f : train.frames) add(f, "train");
  for (const auto& f : test.frames) add(f, "test");
  return g;
}

struct PairBuildSummary {
  std::size_t annotated_frames = 0;
  std::size_t empty_frames = 0;
};

/// Annotates the training frames of a dataset and assembles two-frame pairs. With
/// `uniform_masks`, every annotated pixel gets weight 1 (confidence weighting disabled).
inline std::vector<TrainingPair> build_training_pairs(const Dataset& d, PairingConfig pairing = {},
                                                      bool uniform_masks = false, PairBuildSummary* summary = nullptr) {
  const Trajectory traj = d.trajectory("train");
  std::map<int, FrameAnnotation> annotations;
  std::map<int, IntensityImage> images;
  PairBuildSummary s;
  for (const auto& f : traj.frames) {
    auto a = annotate_frame(d.points, f, d.intrinsics);
    if (!a) {
      ++s.empty_frames;
      continue;
    }
    if (uniform_masks)
      for (double& w : a->mask.raster.values()) w = w > 0.0 ? 1.0 : 0.0;
    annotations.emplace(f.id, std::move(*a));
    images.emplace(f.id, d.find(f.id)->image);
    ++s.annotated_frames;
  }
  if (summary) *summary = s;
  return assemble_pairs(traj, annotations, images, pairing);
}

}  // namespace endodepth
