#pragma once

// Two-branch training loop: both frames of a pair go through the same parameters, each
// prediction is scaled against its own sparse annotations and warped into the other frame,
// and the combined loss is back-propagated into one shared gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "endodepth/autodiff.hpp"
#include "endodepth/errors.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/model.hpp"
#include "endodepth/supervision.hpp"

namespace endodepth {

struct TrainConfig {
  double learning_rate = 1.0e-4;
  double omega = 2.0e-4;
  int epochs = 10;
  int batch_size = 1;
  /// Std of the Gaussian noise added to input images (intensity units).
  double noise_sigma = 0.01;
  double validation_fraction = 0.05;
  std::uint64_t seed = 0;
  int threads = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
    if (!(omega >= 0.0)) throw InvalidArgument("omega must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) throw InvalidArgument("validation_fraction must lie in [0, 1)");
    if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
    if (threads < 1) throw InvalidArgument("threads must be >= 1");
  }
};

struct StepLog {
  long step = 0;
  int epoch = 0;
  int pairs_used = 0;
  LossBreakdown loss;  // mean over the pairs used in the step
};

struct SkipCounts {
  std::size_t empty_annotation = 0;
  std::size_t warp_out_of_view = 0;
  std::size_t total() const { return empty_annotation + warp_out_of_view; }
};

struct TrainReport {
  std::vector<StepLog> steps;
  std::vector<std::optional<double>> validation_loss;  // one per epoch run
  std::vector<double> train_loss;                      // mean total per epoch run
  SkipCounts skipped;
  std::size_t train_pairs = 0;
  std::size_t validation_pairs = 0;
  std::string parameter_path;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  std::vector<double> params;
  AdamState adam;
  int epochs_done = 0;
  long steps_done = 0;
};

struct PairSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Seeded split by pair. A non-zero fraction always yields at least one validation pair when
/// there are two or more pairs.
inline PairSplit split_pairs(std::size_t n, double validation_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
  if (validation_fraction > 0.0 && n >= 2) n_val = std::max<std::size_t>(n_val, 1);
  n_val = std::min(n_val, n > 0 ? n - 1 : 0);
  PairSplit s;
  s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct PairEvaluation {
  LossBreakdown loss;
  std::vector<double> grad;
};

/// Forward (and optionally backward) pass of one pair. Both branches read the same parameter node.
inline PairEvaluation evaluate_pair(const DepthModel& model, std::span<const double> params, const TrainingPair& pair,
                                    double omega, bool want_grad, const IntensityImage* image_j = nullptr,
                                    const IntensityImage* image_k = nullptr) {
  Tape tape;
  std::vector<double> pv(params.begin(), params.end());
  const Shape ps{static_cast<int>(pv.size()), 1, 1};
  const Tensor p = want_grad ? tape.variable(ps, std::move(pv), "parameters") : tape.constant(ps, std::move(pv), "parameters");
  const Tensor yj = model.forward(p, {pair.frame_j, image_j ? image_j : &pair.image_j});
  const Tensor yk = model.forward(p, {pair.frame_k, image_k ? image_k : &pair.image_k});
  PairLoss l = total_loss(pair.annotations, yj, yk, omega);
  PairEvaluation out{l.breakdown, {}};
  if (want_grad) {
    tape.backward(l.total);
    out.grad.assign(p.grad().begin(), p.grad().end());
  }
  return out;
}

namespace detail {

inline IntensityImage add_noise(const IntensityImage& img, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0.0) return img;
  std::normal_distribution<double> n(0.0, sigma);
  IntensityImage out = img;
  for (double& v : out.values()) v += n(rng);
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full);
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  return x;
}

template <typename F>
void parallel_for(std::size_t n, int threads, F&& body) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  const auto t = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  for (std::size_t w = 0; w < t; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += t) body(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

inline void adam_update(std::vector<double>& params, AdamState& state, std::span<const double> grad, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
  }
}

/// Mean combined loss over the given pairs; no augmentation, no update. Empty input (or every pair
/// skipped) yields no value.
inline std::optional<double> validate(const DepthModel& model, std::span<const double> params,
                                      const std::vector<TrainingPair>& pairs, std::span<const std::size_t> indices,
                                      double omega, int threads = 1) {
  std::vector<std::optional<double>> totals(indices.size());
  detail::parallel_for(indices.size(), threads, [&](std::size_t i) {
    try {
      totals[i] = evaluate_pair(model, params, pairs[indices[i]], omega, false).loss.total;
    } catch (const EmptyAnnotation&) {
    } catch (const WarpOutOfView&) {
    }
  });
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : totals)
    if (t) {
      sum += *t;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline std::optional<double> validate(const DepthModel& model, std::span<const double> params,
                                      const std::vector<TrainingPair>& pairs, double omega, int threads = 1) {
  std::vector<std::size_t> all(pairs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return validate(model, params, pairs, all, omega, threads);
}

/// Called after every epoch with the state so far (for checkpoints and progress output).
using EpochCallback = std::function<void(const TrainState&, const TrainReport&)>;

/// Runs epochs state.epochs_done .. cfg.epochs-1. Gradients are averaged over the pairs of a batch
/// that were not skipped; per-pair work is reduced in a fixed order, so results do not depend on
/// the thread count.
inline TrainReport train(const std::vector<TrainingPair>& pairs, const DepthModel& model, TrainState& state,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (pairs.empty()) throw EmptyDataset("no usable training pairs");
  if (state.params.size() != model.parameter_count()) throw ModelConfigError("parameter vector does not match the model");
  const PairSplit split = split_pairs(pairs.size(), cfg.validation_fraction, cfg.seed);
  if (split.train.empty()) throw EmptyDataset("validation split leaves no training pairs");

  TrainReport report;
  report.train_pairs = split.train.size();
  report.validation_pairs = split.validation.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    std::mt19937_64 shuffle_rng(detail::mix_seed(cfg.seed, 1, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_sum = 0.0;
    std::size_t epoch_n = 0;

    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      std::vector<std::optional<PairEvaluation>> results(count);
      std::vector<int> skip_kind(count, 0);
      std::vector<std::exception_ptr> errors(count);
      detail::parallel_for(count, cfg.threads, [&](std::size_t i) {
        const std::size_t pi = order[start + i];
        const TrainingPair& pair = pairs[pi];
        std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 2, pi));
        const IntensityImage img_j = detail::add_noise(pair.image_j, cfg.noise_sigma, rng);
        const IntensityImage img_k = detail::add_noise(pair.image_k, cfg.noise_sigma, rng);
        try {
          results[i] = evaluate_pair(model, state.params, pair, cfg.omega, true, &img_j, &img_k);
        } catch (const EmptyAnnotation&) {
          skip_kind[i] = 1;
        } catch (const WarpOutOfView&) {
          skip_kind[i] = 2;
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
      const long step_index = state.steps_done + 1;
      for (std::size_t i = 0; i < count; ++i) {
        if (!errors[i]) continue;
        try {
          std::rethrow_exception(errors[i]);
        } catch (const NumericalError& e) {
          throw NumericalError("training step " + std::to_string(step_index) + ", pair " +
                               std::to_string(order[start + i]) + ": " + e.what());
        }
      }

      std::vector<double> grad(state.params.size(), 0.0);
      StepLog log{step_index, epoch, 0, {}};
      log.loss.omega = cfg.omega;
      for (std::size_t i = 0; i < count; ++i) {
        if (skip_kind[i] == 1) ++report.skipped.empty_annotation;
        if (skip_kind[i] == 2) ++report.skipped.warp_out_of_view;
        if (!results[i]) continue;
        const auto& r = *results[i];
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += r.grad[k];
        log.loss.sparse_j += r.loss.sparse_j;
        log.loss.sparse_k += r.loss.sparse_k;
        log.loss.consist_jk += r.loss.consist_jk;
        log.loss.consist_kj += r.loss.consist_kj;
        log.loss.total += r.loss.total;
        ++log.pairs_used;
      }
      if (log.pairs_used > 0) {
        const double inv = 1.0 / log.pairs_used;
        for (double& g : grad) g *= inv;
        log.loss.sparse_j *= inv;
        log.loss.sparse_k *= inv;
        log.loss.consist_jk *= inv;
        log.loss.consist_kj *= inv;
        log.loss.total *= inv;
        if (!std::isfinite(log.loss.total))
          throw NumericalError("training step " + std::to_string(step_index) + ": non-finite total loss");
        adam_update(state.params, state.adam, grad, cfg);
        epoch_sum += log.loss.total * log.pairs_used;
        epoch_n += static_cast<std::size_t>(log.pairs_used);
      }
      state.steps_done = step_index;
      report.steps.push_back(log);
    }

    report.train_loss.push_back(epoch_n ? epoch_sum / static_cast<double>(epoch_n) : std::nan(""));
    report.validation_loss.push_back(validate(model, state.params, pairs, split.validation, cfg.omega, cfg.threads));
    state.epochs_done = epoch + 1;
    if (on_epoch) on_epoch(state, report);
  }
  return report;
}

/// Fresh training state for a model.
inline TrainState initial_state(const DepthModel& model, std::uint64_t seed) {
  return {model.init_parameters(seed), {}, 0, 0};
}

// Training-state files, used to resume: magic "EDSTATE\0", u32 version, u32 epochs done,
// i64 steps done, i64 Adam step, a parameter-file block, then the Adam moments as two
// u64-counted f64 arrays. Little-endian throughout.
namespace state_file {
inline constexpr std::array<char, 8> kMagic{'E', 'D', 'S', 'T', 'A', 'T', 'E', '\0'};
inline constexpr std::uint32_t kVersion = 1;
}  // namespace state_file

inline void save_train_state(const std::filesystem::path& path, const DepthModel& model, const TrainState& state) {
  using param_file::detail::put;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(state_file::kMagic.data(), state_file::kMagic.size());
  put<std::uint32_t>(os, state_file::kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(state.epochs_done));
  put<std::int64_t>(os, state.steps_done);
  put<std::int64_t>(os, state.adam.step);
  param_file::write_stream(os, model, state.params);
  for (const auto* moments : {&state.adam.m, &state.adam.v}) {
    put<std::uint64_t>(os, moments->size());
    for (double x : *moments) put<double>(os, x);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

inline TrainState load_train_state(const std::filesystem::path& path, const DepthModel& model) {
  using param_file::detail::get;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != state_file::kMagic) throw ParseError(path.string() + " is not a training-state file");
  if (const auto v = get<std::uint32_t>(is, "version"); v != state_file::kVersion)
    throw VersionError("training-state version " + std::to_string(v));
  TrainState s;
  s.epochs_done = static_cast<int>(get<std::uint32_t>(is, "epochs"));
  s.steps_done = get<std::int64_t>(is, "steps");
  s.adam.step = get<std::int64_t>(is, "adam step");
  auto [header, params] = param_file::read_stream(is);
  if (header.kind != model.kind() || header.config != model.config_words())
    throw ModelConfigError(path.string() + " was saved for a different model configuration");
  s.params = std::move(params);
  for (auto* moments : {&s.adam.m, &s.adam.v}) {
    const auto n = get<std::uint64_t>(is, "moment count");
    if (n != 0 && n != s.params.size()) throw ParseError("moment vector size does not match parameters");
    moments->resize(n);
    for (double& x : *moments) x = get<double>(is, "moments");
  }
  return s;
}

}  // namespace endodepth
