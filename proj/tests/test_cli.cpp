#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "endodepth/dataset_io.hpp"
#include "endodepth/model.hpp"
#include "endodepth/pipeline.hpp"

using namespace endodepth;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "endodepth_cli_test";

fs::path fresh(const std::string& name) {
  const fs::path p = kRoot / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(ENDODEPTH_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json load_json(const fs::path& p) { return Json::parse(slurp(p)); }

void expect_same_tree(const fs::path& a, const fs::path& b, const std::set<std::string>& ignore = {}) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (ignore.contains(rel.string())) continue;
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 0u);
}

// Small dataset shared by the training tests.
const fs::path& small_dataset() {
  static const fs::path p = [] {
    const fs::path d = fresh("small");
    EXPECT_EQ(run("gen --frames 6 --test-frames 2 --size 32 --seed 3 --out " + d.string()), 0);
    return d;
  }();
  return p;
}

const std::string kQuickTrain = " --levels 2 --channels 4 --lr 1e-3 ";

}  // namespace

TEST(CliGen, DocumentedExampleIsDeterministic) {
  const fs::path a = fresh("gen_a"), b = fresh("gen_b");
  ASSERT_EQ(run("gen --scene heightfield --frames 20 --size 64 --seed 7 --out " + a.string()), 0);
  ASSERT_EQ(run("gen --scene heightfield --frames 20 --size 64 --seed 7 --out " + b.string()), 0);
  // The resolved config names its own output directory, so it differs by construction.
  expect_same_tree(a, b, {"config.toml"});
  const Dataset d = read_dataset(a);
  EXPECT_EQ(d.trajectory("train").frames.size(), 20u);
  EXPECT_EQ(d.intrinsics.width, 64);
  EXPECT_TRUE(fs::exists(a / "config.toml"));
}

TEST(CliGen, OutlierRateIsRecordedAndHonoured) {
  const fs::path a = fresh("gen_outliers");
  ASSERT_EQ(run("gen --frames 8 --size 32 --seed 2 --outliers 0.1 --points 150 --out " + a.string()), 0);
  const Json m = load_json(a / kManifestName);
  EXPECT_DOUBLE_EQ(m["generator"]["sfm"]["outlier_rate"].get<double>(), 0.1);
  EXPECT_EQ(m["generator"]["outliers"].get<long>(), std::lround(0.1 * static_cast<double>(m["points"].size())));
}

TEST(CliTrain, DefaultsAndArtifacts) {
  const fs::path out = fresh("train_defaults");
  ASSERT_EQ(run("train --epochs 1 --levels 2 --channels 4 --data " + small_dataset().string() + " --out " + out.string()), 0);
  const std::string cfg = slurp(out / "config.toml");
  EXPECT_NE(cfg.find("train.lr=0.0001\n"), std::string::npos) << cfg;
  EXPECT_NE(cfg.find("train.omega=0.0002\n"), std::string::npos) << cfg;
  EXPECT_NE(cfg.find("train.val-fraction=0.05\n"), std::string::npos) << cfg;
  for (const char* f : {"model.bin", "train_state.bin", "train_log.csv", "train_report.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const Json rep = load_json(out / "train_report.json");
  EXPECT_EQ(rep["epochs"].size(), 1u);
  // One log row per step plus the header.
  const std::string log = slurp(out / "train_log.csv");
  EXPECT_EQ(static_cast<long>(std::count(log.begin(), log.end(), '\n')), rep["steps"].get<long>() + 1);
}

TEST(CliTrain, ConfigFileIsOverriddenByFlags) {
  const fs::path out = fresh("train_config");
  const fs::path cfg = kRoot / "override.toml";
  std::ofstream(cfg) << "train.epochs=3\ntrain.levels=2\ntrain.channels=4\ntrain.omega=0.5\n";
  ASSERT_EQ(run("train --config " + cfg.string() + " --epochs 1 --data " + small_dataset().string() + " --out " + out.string()), 0);
  const std::string resolved = slurp(out / "config.toml");
  EXPECT_NE(resolved.find("train.epochs=1\n"), std::string::npos) << resolved;
  EXPECT_NE(resolved.find("train.omega=0.5\n"), std::string::npos) << resolved;
  EXPECT_EQ(load_json(out / "train_report.json")["epochs"].size(), 1u);
  // The persisted config reproduces the run.
  const fs::path again = fresh("train_config_again");
  ASSERT_EQ(run("train --config " + (out / "config.toml").string() + " --out " + again.string()), 0);
  EXPECT_EQ(slurp(out / "model.bin"), slurp(again / "model.bin"));
}

TEST(CliTrain, ResumedRunContinuesTheLossCurve) {
  const fs::path full = fresh("resume_full"), part = fresh("resume_part");
  const std::string common = kQuickTrain + "--seed 4 --data " + small_dataset().string();
  ASSERT_EQ(run("train --epochs 4" + common + " --out " + full.string()), 0);
  ASSERT_EQ(run("train --epochs 2" + common + " --out " + part.string()), 0);
  ASSERT_EQ(run("train --epochs 4 --resume" + common + " --out " + part.string()), 0);
  const Json a = load_json(full / "train_report.json")["epochs"], b = load_json(part / "train_report.json")["epochs"];
  ASSERT_EQ(a.size(), 4u);
  ASSERT_EQ(b.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    const double la = a[e]["train_loss"].get<double>(), lb = b[e]["train_loss"].get<double>();
    EXPECT_LT(std::abs(la - lb), 0.05 * la) << "epoch " << e + 1;
  }
  // With a restored optimiser state the continuation is in fact exact.
  EXPECT_EQ(slurp(full / "model.bin"), slurp(part / "model.bin"));
  EXPECT_EQ(slurp(full / "train_log.csv"), slurp(part / "train_log.csv"));
}

TEST(CliTrain, ResumeWithoutStateIsAnIoError) {
  const fs::path out = fresh("resume_missing");
  EXPECT_EQ(run("train --resume --epochs 1" + kQuickTrain + "--data " + small_dataset().string() + " --out " + out.string()), 3);
}

TEST(CliPipeline, SerialRunsAreBitIdentical) {
  const std::string data = small_dataset().string();
  std::vector<fs::path> runs;
  for (const char* tag : {"det_a", "det_b"}) {
    const fs::path r = fresh(tag);
    ASSERT_EQ(run("train --threads 1 --epochs 2" + kQuickTrain + "--data " + data + " --out " + (r / "train").string()), 0);
    ASSERT_EQ(run("predict --model " + (r / "train" / "model.bin").string() + " --data " + data + " --out " + (r / "pred").string()), 0);
    ASSERT_EQ(run("eval --data " + data + " --pred " + (r / "pred").string() + " --out " + (r / "eval").string()), 0);
    runs.push_back(r);
  }
  for (const char* f : {"train/model.bin", "train/train_state.bin", "train/train_log.csv", "train/train_report.json",
                        "eval/eval_report.json", "eval/eval.csv"})
    EXPECT_EQ(slurp(runs[0] / f), slurp(runs[1] / f)) << f;
  expect_same_tree(runs[0] / "pred" / "depth", runs[1] / "pred" / "depth");
  // A multi-threaded run reaches the same checkpoint.
  const fs::path mt = fresh("det_mt");
  ASSERT_EQ(run("train --threads 3 --epochs 2" + kQuickTrain + "--data " + data + " --out " + mt.string()), 0);
  EXPECT_EQ(slurp(runs[0] / "train/model.bin"), slurp(mt / "model.bin"));
}

TEST(CliPipeline, PerfectPredictorScoresZero) {
  const Dataset d = read_dataset(small_dataset());
  std::vector<int> ids;
  std::vector<double> params;
  for (const auto& f : d.frames) {
    ids.push_back(f.id);
    for (double z : f.depth.values()) params.push_back(std::log(z > 0.0 ? z : 1.0));
  }
  const PixelLogDepthModel model(d.intrinsics.width, d.intrinsics.height, ids);
  const fs::path dir = fresh("perfect");
  fs::create_directories(dir);
  save_parameters(dir / "perfect.bin", model, params);
  ASSERT_EQ(run("predict --model " + (dir / "perfect.bin").string() + " --data " + small_dataset().string() + " --out " +
                (dir / "pred").string()),
            0);
  ASSERT_EQ(run("eval --split all --data " + small_dataset().string() + " --pred " + (dir / "pred").string() + " --out " +
                (dir / "eval").string()),
            0);
  const Json rep = load_json(dir / "eval" / "eval_report.json");
  ASSERT_EQ(rep["scenes"].size(), 1u);
  ASSERT_EQ(rep["scenes"][0]["frames"].size(), d.frames.size());
  for (const auto& f : rep["scenes"][0]["frames"]) EXPECT_LT(f["residual_rms"].get<double>(), 1e-9);
  EXPECT_TRUE(fs::exists(dir / "eval" / "eval.csv"));
}

TEST(CliExportPly, VertexCountMatchesStride) {
  const Dataset d = read_dataset(small_dataset());
  const fs::path out = fresh("ply");
  for (int stride : {1, 2, 4}) {
    const fs::path dir = out / std::to_string(stride);
    ASSERT_EQ(run("export-ply --frame 1 --stride " + std::to_string(stride) + " --data " + small_dataset().string() + " --out " +
                  dir.string()),
              0);
    const DepthMap& z = d.find(1)->depth;
    std::size_t valid = 0;
    for (int v = 0; v < z.height(); v += stride)
      for (int u = 0; u < z.width(); u += stride) valid += z(v, u) > 0.0 ? 1 : 0;
    const std::string ply = slurp(dir / "frame_0001.ply");
    EXPECT_NE(ply.find("element vertex " + std::to_string(valid) + "\n"), std::string::npos);
    if (count_nonzero(z) == z.size()) {
      EXPECT_EQ(valid, z.size() / static_cast<std::size_t>(stride * stride));
    }
    EXPECT_NE(ply.find("property uchar red"), std::string::npos);
    const auto body = ply.substr(ply.find("end_header\n") + 11);
    EXPECT_EQ(static_cast<std::size_t>(std::count(body.begin(), body.end(), '\n')), valid);
  }
}

TEST(CliGradcheck, FreshBuildPasses) { EXPECT_EQ(run("gradcheck"), 0); }

TEST(CliExitCodes, ErrorClassesAreDistinct) {
  const std::string data = small_dataset().string();
  const fs::path out = fresh("codes");
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --no-such-flag"), 2);
  EXPECT_EQ(run("train --data " + data + " --out " + out.string() + " --lr -1"), 2);
  EXPECT_EQ(run("train --data " + (kRoot / "does_not_exist").string() + " --out " + out.string()), 3);

  // A dataset whose reconstruction has no points yields no training pairs.
  GenConfig g;
  g.size = 16;
  g.frames = 3;
  g.test_frames = 0;
  GeneratedDataset gd = generate_dataset(g);
  gd.dataset.points.points.clear();
  const fs::path empty = fresh("empty_ds");
  write_dataset(gd.dataset, empty);
  EXPECT_EQ(run("train --levels 2 --data " + empty.string() + " --out " + out.string()), 4);

  // Corrupt raster: a data error, not an I/O error.
  const fs::path broken = fresh("broken_ds");
  fs::copy(small_dataset(), broken, fs::copy_options::recursive);
  std::ofstream(broken / "depth" / "frame_0000.pfm", std::ios::trunc) << "PF\n2 2\n-1.0\n";
  EXPECT_EQ(run("train --data " + broken.string() + " --out " + out.string()), 4);
}
