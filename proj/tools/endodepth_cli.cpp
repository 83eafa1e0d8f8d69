// endodepth command-line tool: dataset generation, training, prediction, evaluation, point-cloud
// export and gradient checking.

#include <CLI/CLI.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "endodepth/endodepth.hpp"

using namespace endodepth;
namespace fs = std::filesystem;

namespace {

enum ExitCode : int { kOk = 0, kGeneric = 1, kConfigError = 2, kIoError = 3, kDataError = 4, kNumericalError = 5 };

int exit_code_for(ErrorClass c) {
  switch (c) {
    case ErrorClass::Config: return kConfigError;
    case ErrorClass::Io: return kIoError;
    case ErrorClass::Data: return kDataError;
    case ErrorClass::Numerical: return kNumericalError;
  }
  return kGeneric;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Every option of the active subcommand after config-file and flag merging, in the same format
// --config accepts.
void save_resolved_config(const CLI::App& root, const fs::path& dir) {
  const auto subs = root.get_subcommands();
  const std::string prefix = subs.empty() ? std::string() : subs.front()->get_name() + ".";
  std::istringstream all(root.config_to_str(true, false));
  std::string line, text;
  while (std::getline(all, line))
    if (line.rfind(prefix, 0) == 0) text += line + "\n";
  fs::create_directories(dir);
  write_text(dir / "config.toml", text);
}

std::vector<const DatasetFrame*> frames_of_split(const Dataset& d, const std::string& split) {
  std::vector<const DatasetFrame*> out;
  for (const auto& f : d.frames)
    if (split == "all" || f.split == split) out.push_back(&f);
  return out;
}

fs::path prediction_file(const fs::path& dir, int frame_id) { return dir / detail::frame_file("depth", frame_id, "pfm"); }

// ---------------------------------------------------------------------------------------------

struct GenOptions {
  GenConfig cfg;
  std::string out;
};

void add_gen(CLI::App& app, GenOptions& o) {
  app.add_option("--scene", o.cfg.family, "Scene family")->check(CLI::IsMember({"heightfield", "tube"}))->capture_default_str();
  app.add_option("--frames", o.cfg.frames, "Training-path frames")->capture_default_str();
  app.add_option("--test-frames", o.cfg.test_frames, "Held-out frames on a parallel path")->capture_default_str();
  app.add_option("--size", o.cfg.size, "Image width and height in pixels")->capture_default_str();
  app.add_option("--seed", o.cfg.seed, "Master seed")->capture_default_str();
  app.add_option("--points", o.cfg.sfm.num_points, "Reconstructed points to simulate")->capture_default_str();
  app.add_option("--noise", o.cfg.sfm.point_noise, "Point position noise, fraction of scene diameter")->capture_default_str();
  app.add_option("--outliers", o.cfg.sfm.outlier_rate, "Fraction of points turned into gross outliers")->capture_default_str();
  app.add_option("--outlier-displacement", o.cfg.sfm.outlier_displacement, "Outlier offset, fraction of scene diameter")
      ->capture_default_str();
  app.add_option("--out", o.out, "Output dataset directory")->required();
}

int run_gen(const GenOptions& o, const CLI::App& root) {
  GeneratedDataset g = generate_dataset(o.cfg);
  write_dataset(g.dataset, o.out);
  save_resolved_config(root, o.out);
  const Dataset check = read_dataset(o.out);
  std::cout << "wrote " << check.frames.size() << " frames and " << check.points.points.size() << " points ("
            << g.dataset.generator.at("outliers").get<long>() << " outliers) to " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::string out;
  std::string model = "depthnet";
  DepthNetConfig net;
  TrainConfig train;
  int max_gap = 0;
  bool uniform_masks = false;
  bool resume = false;
};

void add_train(CLI::App& app, TrainOptions& o) {
  app.add_option("--data", o.data, "Dataset directory")->required();
  app.add_option("--out", o.out, "Run directory (checkpoint, log, report)")->required();
  app.add_option("--model", o.model, "Model type")->check(CLI::IsMember({"depthnet", "pixel"}))->capture_default_str();
  app.add_option("--levels", o.net.levels, "DepthNet encoder levels")->capture_default_str();
  app.add_option("--channels", o.net.base_channels, "DepthNet base channel count")->capture_default_str();
  app.add_option("--lr", o.train.learning_rate, "Adam learning rate")->capture_default_str();
  app.add_option("--omega", o.train.omega, "Weight of the depth consistency terms")->capture_default_str();
  app.add_option("--epochs", o.train.epochs, "Total epochs (including any already done when resuming)")->capture_default_str();
  app.add_option("--batch-size", o.train.batch_size, "Pairs per optimisation step")->capture_default_str();
  app.add_option("--noise-sigma", o.train.noise_sigma, "Input image noise std")->capture_default_str();
  app.add_option("--val-fraction", o.train.validation_fraction, "Fraction of pairs held out for validation")->capture_default_str();
  app.add_option("--seed", o.train.seed, "Seed for initialisation, split, shuffling and noise")->capture_default_str();
  app.add_option("--threads", o.train.threads, "Worker threads (results do not depend on this)")->capture_default_str();
  app.add_option("--max-gap", o.max_gap, "Largest frame-index gap within a pair (0 = unlimited)")->capture_default_str();
  app.add_flag("--uniform-masks", o.uniform_masks, "Ignore confidences: weight 1 on every annotated pixel");
  app.add_flag("--resume", o.resume, "Continue from the training state in --out");
}

std::unique_ptr<DepthModel> make_model(const TrainOptions& o, const Dataset& d) {
  if (o.model == "pixel") return std::make_unique<PixelLogDepthModel>(d.intrinsics.width, d.intrinsics.height);
  return std::make_unique<DepthNet>(o.net);
}

// Keeps the header plus the first `rows` data rows of an existing log.
std::string truncated_log(const fs::path& path, long rows) {
  std::istringstream in(read_text(path));
  std::string line, out;
  for (long i = 0; i <= rows && std::getline(in, line); ++i) out += line + "\n";
  return out;
}

int run_train(const TrainOptions& o, const CLI::App& root) {
  const Dataset d = read_dataset(o.data);
  PairingConfig pairing;
  if (o.max_gap > 0) pairing.max_gap = o.max_gap;
  PairBuildSummary summary;
  const auto pairs = build_training_pairs(d, pairing, o.uniform_masks, &summary);
  const auto model = make_model(o, d);

  const fs::path out = o.out;
  const fs::path state_path = out / "train_state.bin", log_path = out / "train_log.csv",
                 report_path = out / "train_report.json", model_path = out / "model.bin";
  fs::create_directories(out);

  TrainState state;
  std::string log_text = "step,epoch,pairs_used,sparse_j,sparse_k,consist_jk,consist_kj,total\n";
  Json epochs = Json::array();
  if (o.resume) {
    state = load_train_state(state_path, *model);
    if (fs::exists(log_path)) log_text = truncated_log(log_path, state.steps_done);
    if (fs::exists(report_path)) {
      const Json prev = detail::parse_json_text(read_text(report_path), report_path.string());
      for (const auto& e : prev.value("epochs", Json::array()))
        if (e.at("epoch").get<int>() <= state.epochs_done) epochs.push_back(e);
    }
    std::cerr << "resuming after epoch " << state.epochs_done << " (step " << state.steps_done << ")\n";
  } else {
    state = initial_state(*model, o.train.seed);
  }
  save_resolved_config(root, out);

  auto report_json = [&](const TrainReport& r) {
    return Json{{"model", o.model},
                {"parameters", model->parameter_count()},
                {"annotated_frames", summary.annotated_frames},
                {"empty_frames", summary.empty_frames},
                {"pairs", pairs.size()},
                {"train_pairs", r.train_pairs},
                {"validation_pairs", r.validation_pairs},
                {"skipped", {{"empty_annotation", r.skipped.empty_annotation}, {"warp_out_of_view", r.skipped.warp_out_of_view}}},
                {"steps", state.steps_done},
                {"epochs_done", state.epochs_done},
                {"epochs", epochs},
                {"parameter_path", model_path.filename().string()},
                {"state_path", state_path.filename().string()}};
  };

  std::size_t logged_steps = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainReport rep = train(pairs, *model, state, o.train, [&](const TrainState& s, const TrainReport& r) {
    char buf[256];
    for (; logged_steps < r.steps.size(); ++logged_steps) {
      const StepLog& l = r.steps[logged_steps];
      std::snprintf(buf, sizeof buf, "%ld,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", l.step, l.epoch + 1, l.pairs_used,
                    l.loss.sparse_j, l.loss.sparse_k, l.loss.consist_jk, l.loss.consist_kj, l.loss.total);
      log_text += buf;
    }
    const auto& val = r.validation_loss.back();
    epochs.push_back({{"epoch", s.epochs_done}, {"train_loss", r.train_loss.back()},
                      {"validation_loss", val ? Json(*val) : Json(nullptr)}});
    save_parameters(model_path, *model, s.params);
    save_train_state(state_path, *model, s);
    write_text(log_path, log_text);
    write_text(report_path, report_json(r).dump(2) + "\n");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::snprintf(buf, sizeof buf, "epoch %d/%d  train %.6g  val %s  %.1fs", s.epochs_done, o.train.epochs, r.train_loss.back(),
                  val ? std::to_string(*val).c_str() : "n/a", secs);
    std::cerr << buf << std::endl;
  });

  // Nothing left to run still leaves a complete set of artifacts.
  if (rep.steps.empty()) {
    save_parameters(model_path, *model, state.params);
    write_text(log_path, log_text);
    write_text(report_path, report_json(rep).dump(2) + "\n");
  }
  std::cout << "trained " << state.epochs_done << " epochs (" << state.steps_done << " steps); checkpoint " << model_path.string()
            << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------------------------

struct PredictOptions {
  std::string model;
  std::string data;
  std::string out;
  std::string split = "all";
};

void add_predict(CLI::App& app, PredictOptions& o) {
  app.add_option("--model", o.model, "Checkpoint written by train")->required();
  app.add_option("--data", o.data, "Dataset directory")->required();
  app.add_option("--out", o.out, "Output directory; depth maps go to depth/frame_NNNN.pfm")->required();
  app.add_option("--split", o.split, "Frames to predict")->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
}

int run_predict(const PredictOptions& o, const CLI::App& root) {
  const auto [model, params] = load_model(o.model);
  const Dataset d = read_dataset(o.data);
  const auto frames = frames_of_split(d, o.split);
  if (frames.empty()) throw EmptyDataset("no frames in split '" + o.split + "'");
  fs::create_directories(fs::path(o.out) / "depth");
  save_resolved_config(root, o.out);
  std::size_t done = 0;
  for (const DatasetFrame* f : frames) {
    try {
      write_pfm(prediction_file(o.out, f->id), predict_depth(*model, params, {f->id, &f->image}));
      ++done;
    } catch (const Error& e) {
      std::cerr << "frame " << f->id << ": " << e.what() << "\n";
    }
  }
  std::cout << "predicted " << done << " of " << frames.size() << " frames into " << o.out << "\n";
  if (done == 0) throw EmptyDataset("prediction failed for every frame");
  return kOk;
}

// ---------------------------------------------------------------------------------------------

struct EvalOptions {
  std::vector<std::string> data;
  std::vector<std::string> pred;
  std::string out;
  std::string split = "test";
  int stride = 1;
};

void add_eval(CLI::App& app, EvalOptions& o) {
  app.add_option("--data", o.data, "Dataset directories, one scene each")->required();
  app.add_option("--pred", o.pred, "Prediction directories from predict, matching --data")->required();
  app.add_option("--out", o.out, "Output directory for eval_report.json and eval.csv")->required();
  app.add_option("--split", o.split, "Frames to evaluate")->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
  app.add_option("--stride", o.stride, "Pixel subsampling stride")->check(CLI::PositiveNumber)->capture_default_str();
}

int run_eval(const EvalOptions& o, const CLI::App& root) {
  if (o.data.size() != o.pred.size()) throw InvalidArgument("--data and --pred need the same number of entries");
  EvalReport report;
  std::size_t evaluated = 0;
  for (std::size_t s = 0; s < o.data.size(); ++s) {
    const Dataset d = read_dataset(o.data[s]);
    std::vector<EvalFrame> frames;
    for (const DatasetFrame* f : frames_of_split(d, o.split))
      if (!f->depth.empty()) frames.push_back({f->id, &f->depth});
    if (frames.empty()) throw EmptyDataset(o.data[s] + ": no ground-truth frames in split '" + o.split + "'");
    const fs::path pred_dir = o.pred[s];
    const auto predictor = [&](int id) {
      const fs::path p = prediction_file(pred_dir, id);
      if (!fs::exists(p)) {
        std::cerr << d.scene_id << " frame " << id << ": no prediction at " << p.string() << "\n";
        return DepthMap(d.intrinsics.width, d.intrinsics.height, 0.0);
      }
      return read_pfm(p);
    };
    SceneReport sr = evaluate_scene(d.scene_id, predictor, frames, d.intrinsics, d.diameter, o.stride);
    evaluated += sr.frames.size();
    std::printf("%s: %zu frames, residual %.6g (sd %.6g), %.4f%% of diameter\n", sr.scene_id.c_str(), sr.frames.size(),
                sr.mean_rms, sr.std_rms, sr.mean_rms_percent());
    report.scenes.push_back(std::move(sr));
  }
  fs::create_directories(o.out);
  save_resolved_config(root, o.out);
  write_text(fs::path(o.out) / "eval_report.json", to_json(report).dump(2) + "\n");
  write_text(fs::path(o.out) / "eval.csv", to_csv(report));
  if (evaluated == 0) throw EmptyDataset("no frame could be evaluated");
  return kOk;
}

// ---------------------------------------------------------------------------------------------

struct PlyOptions {
  std::string data;
  std::string pred;
  std::string out;
  std::string split = "all";
  std::vector<int> frames;
  int stride = 1;
};

void add_ply(CLI::App& app, PlyOptions& o) {
  app.add_option("--data", o.data, "Dataset directory (intrinsics, images, ground truth)")->required();
  app.add_option("--pred", o.pred, "Prediction directory; ground-truth depth is used when omitted");
  app.add_option("--out", o.out, "Output directory for frame_NNNN.ply")->required();
  app.add_option("--split", o.split, "Frames to export")->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
  app.add_option("--frame", o.frames, "Restrict to these frame ids");
  app.add_option("--stride", o.stride, "Pixel subsampling stride")->check(CLI::PositiveNumber)->capture_default_str();
}

int run_ply(const PlyOptions& o, const CLI::App& root) {
  const Dataset d = read_dataset(o.data);
  fs::create_directories(o.out);
  save_resolved_config(root, o.out);
  std::size_t written = 0, considered = 0;
  for (const DatasetFrame* f : frames_of_split(d, o.split)) {
    if (!o.frames.empty() && std::find(o.frames.begin(), o.frames.end(), f->id) == o.frames.end()) continue;
    ++considered;
    try {
      const DepthMap depth = o.pred.empty() ? f->depth : read_pfm(prediction_file(o.pred, f->id));
      const PointCloud cloud = depth_to_cloud(depth, d.intrinsics, o.stride);
      std::vector<double> gray;
      gray.reserve(cloud.size());
      for (const Pixel& px : cloud.pixels)
        gray.push_back(f->image.empty() ? 1.0 : f->image(static_cast<int>(px.v), static_cast<int>(px.u)));
      const fs::path path = fs::path(o.out) / detail::frame_file(".", f->id, "ply");
      write_ply(path, cloud, &gray);
      ++written;
      std::cout << path.lexically_normal().string() << ": " << cloud.size() << " vertices\n";
    } catch (const Error& e) {
      std::cerr << "frame " << f->id << ": " << e.what() << "\n";
    }
  }
  if (considered == 0) throw EmptyDataset("no frames selected");
  if (written == 0) throw EmptyDataset("export failed for every frame");
  return kOk;
}

// ---------------------------------------------------------------------------------------------

int run_gradcheck(std::uint64_t seed) {
  int failed = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& r : run_gradcheck_suite(seed)) {
    std::printf("%-32s rel_error %.3e  tol %.0e  coords %5zu  %s\n", r.name.c_str(), r.rel_error, r.tolerance, r.coordinates,
                r.passed() ? "ok" : "FAIL");
    failed += r.passed() ? 0 : 1;
  }
  std::printf("%d failure(s), %.1fs\n", failed, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return failed == 0 ? kOk : kNumericalError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-from-monocular-video training toolkit on synthetic scenes"};
  app.set_version_flag("--version", "endodepth 1.0");
  app.set_config("--config", "", "TOML file of option values; flags given on the command line take precedence");
  app.require_subcommand(1);
  app.fallthrough();  // lets --config follow the subcommand name

  GenOptions gen;
  TrainOptions tr;
  PredictOptions pr;
  EvalOptions ev;
  PlyOptions ply;
  std::uint64_t gradcheck_seed = 1;

  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_gen(*gen_cmd, gen);
  auto* train_cmd = app.add_subcommand("train", "Train a depth model on a dataset");
  add_train(*train_cmd, tr);
  auto* predict_cmd = app.add_subcommand("predict", "Write predicted depth maps for dataset frames");
  add_predict(*predict_cmd, pr);
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth after similarity alignment");
  add_eval(*eval_cmd, ev);
  auto* ply_cmd = app.add_subcommand("export-ply", "Export depth maps as intensity-coloured point clouds");
  add_ply(*ply_cmd, ply);
  auto* grad_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  grad_cmd->add_option("--seed", gradcheck_seed, "Seed for the random test inputs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen_cmd) return run_gen(gen, app);
    if (*train_cmd) return run_train(tr, app);
    if (*predict_cmd) return run_predict(pr, app);
    if (*eval_cmd) return run_eval(ev, app);
    if (*ply_cmd) return run_ply(ply, app);
    if (*grad_cmd) return run_gradcheck(gradcheck_seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.error_class());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGeneric;
  }
  return kGeneric;
}
