#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "endodepth/pipeline.hpp"
#include "endodepth/trainer.hpp"

using namespace endodepth;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  GeneratedDataset data;
  std::vector<TrainingPair> pairs;
  std::vector<int> frame_ids;
};

Fixture make_fixture(int frames, int size, double noise, std::uint64_t seed = 3) {
  GenConfig cfg;
  cfg.size = size;
  cfg.frames = frames;
  cfg.test_frames = 0;
  cfg.sfm.num_points = 60;
  cfg.sfm.point_noise = noise;
  cfg.sfm.outlier_rate = 0.0;
  cfg.seed = seed;
  Fixture f{generate_dataset(cfg), {}, {}};
  f.pairs = build_training_pairs(f.data.dataset);
  for (const auto& fr : f.data.dataset.frames) f.frame_ids.push_back(fr.id);
  return f;
}

TrainConfig pixel_config(int epochs) {
  TrainConfig c;
  c.learning_rate = 0.02;
  c.epochs = epochs;
  c.noise_sigma = 0.0;
  c.validation_fraction = 0.0;
  c.seed = 1;
  return c;
}

}  // namespace

TEST(Trainer, PixelModelSinglePairConvergesHundredfold) {
  Fixture f = make_fixture(2, 24, 0.0);
  ASSERT_EQ(f.pairs.size(), 1u);
  const PixelLogDepthModel model(24, 24);  // one map shared by both frames
  TrainState state = initial_state(model, 0);
  const TrainReport r = train(f.pairs, model, state, pixel_config(500));
  ASSERT_EQ(r.steps.size(), 500u);
  const double first = r.steps.front().loss.total, last = r.steps.back().loss.total;
  EXPECT_GT(first, 0.0);
  EXPECT_LE(last, first / 100.0) << "first " << first << " last " << last;
}

TEST(Trainer, DeterministicAcrossRunsAndThreadCounts) {
  Fixture f = make_fixture(4, 16, 0.005);
  const DepthNet net({3, 4, 1e-4});
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.seed = 7;
  cfg.validation_fraction = 0.2;
  TrainState a = initial_state(net, 2), b = a, c = a;
  const TrainReport ra = train(f.pairs, net, a, cfg), rb = train(f.pairs, net, b, cfg);
  cfg.threads = 3;
  const TrainReport rc = train(f.pairs, net, c, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.params, c.params);
  ASSERT_EQ(ra.steps.size(), rb.steps.size());
  for (std::size_t i = 0; i < ra.steps.size(); ++i) {
    EXPECT_EQ(ra.steps[i].loss.total, rb.steps[i].loss.total);
    EXPECT_EQ(ra.steps[i].loss.total, rc.steps[i].loss.total);
  }
  EXPECT_EQ(ra.validation_loss, rb.validation_loss);
}

TEST(Trainer, StepCountAndSplit) {
  Fixture f = make_fixture(5, 16, 0.005);
  ASSERT_EQ(f.pairs.size(), 10u);
  const PixelLogDepthModel model(16, 16, f.frame_ids);
  TrainConfig cfg = pixel_config(3);
  cfg.validation_fraction = 0.2;
  cfg.batch_size = 3;
  TrainState s = initial_state(model, 0);
  const TrainReport r = train(f.pairs, model, s, cfg);
  EXPECT_EQ(r.validation_pairs, 2u);
  EXPECT_EQ(r.train_pairs, 8u);
  EXPECT_EQ(r.steps.size(), 3u * 3u);  // ceil(8 / 3) per epoch
  EXPECT_EQ(r.validation_loss.size(), 3u);
  EXPECT_TRUE(r.validation_loss.back().has_value());
  EXPECT_EQ(s.steps_done, 9);
  EXPECT_EQ(s.epochs_done, 3);

  const PairSplit a = split_pairs(100, 0.05, 4), b = split_pairs(100, 0.05, 4);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(a.validation.size(), 5u);
  EXPECT_EQ(a.train.size(), 95u);
}

TEST(Trainer, BranchesShareParameters) {
  // The pair gradient must equal the derivative of the pair loss with both branches moving
  // together, checked along random directions by central differences.
  Fixture f = make_fixture(2, 8, 0.005);
  const DepthNet net({3, 2, 1e-4});
  const auto p0 = net.init_parameters(4);
  const TrainingPair& pair = f.pairs.at(0);
  const PairEvaluation e = evaluate_pair(net, p0, pair, 0.5, true);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> dir(p0.size());
    for (double& d : dir) d = n(rng);
    const double h = 1e-6;
    std::vector<double> plus = p0, minus = p0;
    for (std::size_t i = 0; i < p0.size(); ++i) {
      plus[i] += h * dir[i];
      minus[i] -= h * dir[i];
    }
    const double fd = (evaluate_pair(net, plus, pair, 0.5, false).loss.total -
                       evaluate_pair(net, minus, pair, 0.5, false).loss.total) / (2 * h);
    double analytic = 0.0;
    for (std::size_t i = 0; i < p0.size(); ++i) analytic += e.grad[i] * dir[i];
    EXPECT_NEAR(analytic, fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Trainer, RescalingConvergedPixelModelLeavesLossUnchanged) {
  Fixture f = make_fixture(2, 24, 0.0);
  const PixelLogDepthModel model(24, 24, f.frame_ids);
  TrainState s = initial_state(model, 0);
  train(f.pairs, model, s, pixel_config(300));
  const double base = evaluate_pair(model, s.params, f.pairs[0], 2e-4, false).loss.total;
  for (double shift : {-1.0, 0.3, 2.0}) {
    std::vector<double> p = s.params;
    for (double& x : p) x += shift;
    const LossBreakdown l = evaluate_pair(model, p, f.pairs[0], 2e-4, false).loss;
    EXPECT_LT(std::abs(l.total - base), 1e-8) << "shift " << shift;
  }
}

TEST(Trainer, SkippedPairsAreCountedAndContributeNothing) {
  Fixture f = make_fixture(3, 16, 0.005);
  ASSERT_EQ(f.pairs.size(), 3u);
  std::vector<TrainingPair> pairs = f.pairs;
  // pair 1: frame j's mask emptied; pair 2: k sits far behind j so nothing warps into view
  for (double& w : pairs[1].annotations.mask_j.raster.values()) w = 0.0;
  pairs[2].annotations.k_from_j = RigidTransform::translate(0, 0, -100);
  const PixelLogDepthModel model(16, 16, f.frame_ids);
  TrainConfig cfg = pixel_config(2);
  TrainState s = initial_state(model, 0);
  const TrainReport r = train(pairs, model, s, cfg);
  EXPECT_EQ(r.skipped.empty_annotation, 2u);
  EXPECT_EQ(r.skipped.warp_out_of_view, 2u);
  std::size_t used = 0;
  for (const auto& st : r.steps) used += static_cast<std::size_t>(st.pairs_used);
  EXPECT_EQ(used + r.skipped.empty_annotation + r.skipped.warp_out_of_view, 3u * 2u);

  // Training on the usable pair alone gives the same parameters.
  TrainState alone = initial_state(model, 0);
  std::vector<TrainingPair> good{pairs[0]};
  train(good, model, alone, cfg);
  EXPECT_EQ(alone.params, s.params);
}

TEST(Trainer, EmptyDatasetAndBadConfig) {
  const PixelLogDepthModel model(4, 4, {0});
  TrainState s = initial_state(model, 0);
  EXPECT_THROW(train({}, model, s, {}), EmptyDataset);
  Fixture f = make_fixture(2, 16, 0.0);
  TrainConfig bad;
  bad.learning_rate = 0.0;
  TrainState s2 = initial_state(PixelLogDepthModel(16, 16, f.frame_ids), 0);
  EXPECT_THROW(train(f.pairs, PixelLogDepthModel(16, 16, f.frame_ids), s2, bad), InvalidArgument);
}

TEST(Trainer, NonFiniteLossAbortsWithStepIndex) {
  Fixture f = make_fixture(2, 16, 0.0);
  const PixelLogDepthModel model(16, 16, f.frame_ids);
  TrainState s = initial_state(model, 0);
  s.params[5] = std::nan("");
  try {
    train(f.pairs, model, s, pixel_config(1));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  Fixture f = make_fixture(4, 16, 0.005);
  const DepthNet net({3, 4, 1e-4});
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 9;
  cfg.validation_fraction = 0.2;
  TrainState straight = initial_state(net, 1);
  const TrainReport full = train(f.pairs, net, straight, cfg);

  TrainState part = initial_state(net, 1);
  TrainConfig first = cfg;
  first.epochs = 2;
  train(f.pairs, net, part, first);
  const fs::path path = fs::temp_directory_path() / "endodepth_resume_state.bin";
  save_train_state(path, net, part);
  TrainState resumed = load_train_state(path, net);
  EXPECT_EQ(resumed.params, part.params);
  EXPECT_EQ(resumed.adam.m, part.adam.m);
  EXPECT_EQ(resumed.adam.step, part.adam.step);
  const TrainReport rest = train(f.pairs, net, resumed, cfg);
  EXPECT_EQ(resumed.params, straight.params);
  ASSERT_EQ(rest.validation_loss.size(), 2u);
  EXPECT_EQ(rest.validation_loss[1], full.validation_loss[3]);
  EXPECT_EQ(rest.steps.front().step, full.steps[full.steps.size() / 2].step);
  EXPECT_THROW(load_train_state(path, DepthNet({2, 4, 1e-4})), ModelConfigError);
}

TEST(Validate, PerfectPredictorDeterminismAndAbsence) {
  // Fronto-parallel plane seen from laterally shifted cameras: depth is exactly 2 everywhere, so
  // neither pixel rounding nor warping introduces any error for the true depth.
  const Scene scene = make_plane_scene({});
  Trajectory traj{{}, make_intrinsics(16, 0.9)};
  for (int i = 0; i < 3; ++i) traj.frames.push_back({i, RigidTransform::translate(-0.05 * i, 0.01 * i, 0), 0});
  SfmSimConfig sc;
  sc.num_points = 30;
  sc.point_noise = 0.0;
  sc.outlier_rate = 0.0;
  const SimulatedSfm sfm = simulate_sfm(scene, traj, sc);
  std::map<int, FrameAnnotation> ann;
  std::map<int, IntensityImage> img;
  for (const auto& fr : traj.frames) {
    ann.emplace(fr.id, *annotate_frame(sfm.points, fr, traj.intrinsics));
    img.emplace(fr.id, render_ground_truth(scene, fr.world_to_camera, traj.intrinsics).intensity);
  }
  const auto pairs = assemble_pairs(traj, ann, img);
  ASSERT_EQ(pairs.size(), 3u);
  const PixelLogDepthModel model(16, 16, {0, 1, 2});
  const std::vector<double> p(model.parameter_count(), std::log(2.0));
  const auto v1 = validate(model, p, pairs, 2e-4), v2 = validate(model, p, pairs, 2e-4);
  ASSERT_TRUE(v1.has_value());
  EXPECT_LT(*v1, 1e-6);
  EXPECT_EQ(v1, v2);
  EXPECT_FALSE(validate(model, p, pairs, std::vector<std::size_t>{}, 2e-4).has_value());
}

TEST(Validate, ConvergedRunMatchesTrainingLoss) {
  Fixture f = make_fixture(3, 16, 0.005);
  const PixelLogDepthModel model(16, 16, f.frame_ids);
  TrainState s = initial_state(model, 0);
  const TrainReport r = train(f.pairs, model, s, pixel_config(400));
  const double final_train = r.train_loss.back();
  const double v = *validate(model, s.params, f.pairs, 2e-4);
  EXPECT_LT(v, 2.0 * final_train);
  EXPECT_GT(v, 0.5 * final_train);
}
