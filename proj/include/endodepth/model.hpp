#pragma once

// Single-frame depth predictors: a small encoder-decoder with additive symmetric skips, and a
// per-pixel log-depth model used to exercise the training graph without any network prior.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "endodepth/autodiff.hpp"
#include "endodepth/errors.hpp"
#include "endodepth/raster.hpp"

namespace endodepth {

struct FrameInput {
  int frame_id = 0;
  const IntensityImage* image = nullptr;
};

enum class ModelKind : std::uint32_t { DepthNet = 1, PixelLogDepth = 2 };

class DepthModel {
 public:
  virtual ~DepthModel() = default;
  virtual ModelKind kind() const = 0;
  virtual std::size_t parameter_count() const = 0;
  /// Records the prediction on params' tape. Output is (1, H, W) and strictly positive.
  virtual Tensor forward(const Tensor& params, const FrameInput& input) const = 0;
  virtual std::vector<double> init_parameters(std::uint64_t seed) const = 0;
  /// Architecture description stored in checkpoint headers.
  virtual std::vector<std::int64_t> config_words() const = 0;
  virtual std::unique_ptr<DepthModel> clone() const = 0;
};

struct DepthNetConfig {
  int levels = 3;
  int base_channels = 8;
  /// Lower bound added after the output softplus.
  double depth_floor = 1e-4;
};

/// Encoder-decoder with symmetric additive skip connections.
///
///   e0 = act(conv(image))                                  full resolution, C channels
///   el = act(conv(act(conv_s2(e{l-1}))))                   l = 1..L, channels 2C
///   d  = eL;  dl = act(conv(up2(d{l+1})) + el)             l = L-1..0
///   depth = softplus(conv(d0)) + floor
///
/// act is softplus, so the whole network is smooth.
class DepthNet final : public DepthModel {
 public:
  struct ConvSpec {
    int in = 0;
    int out = 0;
    int stride = 1;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
  };

  /// Intermediate activations, exposed for wiring tests.
  struct Trace {
    std::vector<Tensor> encoder;  // e0 .. eL
    std::vector<Tensor> decoder;  // d0 .. d{L-1}
    Tensor output;
  };

  explicit DepthNet(DepthNetConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.levels < 1) throw ModelConfigError("DepthNet needs at least 1 level");
    if (cfg_.base_channels < 1) throw ModelConfigError("DepthNet needs at least 1 base channel");
    if (!(cfg_.depth_floor > 0.0)) throw ModelConfigError("depth floor must be positive");
    const int L = cfg_.levels;
    add_conv(1, channels(0), 1);
    for (int l = 1; l <= L; ++l) {
      add_conv(channels(l - 1), channels(l), 2);
      add_conv(channels(l), channels(l), 1);
    }
    for (int l = L - 1; l >= 0; --l) add_conv(channels(l + 1), channels(l), 1);
    add_conv(channels(0), 1, 1);
    skip_enabled_.assign(static_cast<std::size_t>(L), true);
  }

  const DepthNetConfig& config() const noexcept { return cfg_; }
  const std::vector<ConvSpec>& convs() const noexcept { return convs_; }
  int channels(int level) const { return cfg_.base_channels * (level == 0 ? 1 : 2); }
  int required_multiple() const { return 1 << cfg_.levels; }

  /// Zeroes the skip feeding decoder level `level` (ablation).
  void set_skip_enabled(int level, bool enabled) { skip_enabled_.at(static_cast<std::size_t>(level)) = enabled; }

  ModelKind kind() const override { return ModelKind::DepthNet; }
  std::size_t parameter_count() const override { return param_count_; }
  std::vector<std::int64_t> config_words() const override {
    return {cfg_.levels, cfg_.base_channels, std::bit_cast<std::int64_t>(cfg_.depth_floor)};
  }
  std::unique_ptr<DepthModel> clone() const override { return std::make_unique<DepthNet>(*this); }

  Tensor forward(const Tensor& params, const FrameInput& input) const override { return trace(params, input).output; }

  Trace trace(const Tensor& params, const FrameInput& input) const {
    if (!input.image) throw InvalidArgument("DepthNet needs an image");
    if (params.shape().numel() != param_count_)
      throw ModelConfigError("expected " + std::to_string(param_count_) + " parameters, got " +
                             std::to_string(params.shape().numel()));
    const IntensityImage& img = *input.image;
    const int m = required_multiple();
    if (img.width() % m != 0 || img.height() % m != 0)
      throw ShapeError("image " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                       " must be a multiple of " + std::to_string(m) + " in both dimensions");
    Tape& tape = params.tape();
    const int L = cfg_.levels;
    std::size_t next = 0;
    auto conv = [&](const Tensor& x) {
      const ConvSpec& c = convs_[next++];
      const Tensor w = ops::slice(params, c.weight_offset, {c.out, c.in, 9});
      const Tensor b = ops::slice(params, c.bias_offset, {c.out, 1, 1});
      return ops::conv2d(x, w, b, c.stride);
    };

    Trace t;
    const Tensor x = tape.constant({1, img.height(), img.width()}, img.data());
    t.encoder.push_back(ops::softplus(conv(x)));
    for (int l = 1; l <= L; ++l) {
      const Tensor down = ops::softplus(conv(t.encoder.back()));
      t.encoder.push_back(ops::softplus(conv(down)));
    }
    Tensor d = t.encoder.back();
    t.decoder.resize(static_cast<std::size_t>(L));
    for (int l = L - 1; l >= 0; --l) {
      Tensor pre = conv(ops::upsample_nearest2x(d));
      if (skip_enabled_[static_cast<std::size_t>(l)]) pre = ops::add(pre, t.encoder[static_cast<std::size_t>(l)]);
      d = ops::softplus(pre);
      t.decoder[static_cast<std::size_t>(l)] = d;
    }
    t.output = ops::add_constant(ops::softplus(conv(d)), cfg_.depth_floor);
    return t;
  }

  /// Weights ~ U(-a, a) with a = sqrt(3 / fan_in), i.e. variance 1 / fan_in. Biases zero.
  std::vector<double> init_parameters(std::uint64_t seed) const override {
    std::vector<double> p(param_count_, 0.0);
    std::mt19937_64 rng(seed);
    for (const auto& c : convs_) {
      const double a = std::sqrt(3.0 / (9.0 * c.in));
      std::uniform_real_distribution<double> dist(-a, a);
      for (std::size_t i = 0; i < static_cast<std::size_t>(c.out) * c.in * 9; ++i) p[c.weight_offset + i] = dist(rng);
    }
    return p;
  }

 private:
  void add_conv(int in, int out, int stride) {
    ConvSpec c{in, out, stride, param_count_, 0};
    param_count_ += static_cast<std::size_t>(in) * out * 9;
    c.bias_offset = param_count_;
    param_count_ += static_cast<std::size_t>(out);
    convs_.push_back(c);
  }

  DepthNetConfig cfg_;
  std::vector<ConvSpec> convs_;
  std::vector<bool> skip_enabled_;
  std::size_t param_count_ = 0;
};

/// One free log-depth value per pixel; output = exp(parameter). It ignores image content, so
/// anything it learns comes straight from the losses. By default a single map serves every
/// frame. Given frame ids, each listed frame gets its own map instead.
class PixelLogDepthModel final : public DepthModel {
 public:
  PixelLogDepthModel(int width, int height, std::vector<int> frame_ids = {})
      : width_(width), height_(height), frame_ids_(std::move(frame_ids)) {
    if (width_ <= 0 || height_ <= 0) throw ModelConfigError("PixelLogDepthModel needs a positive size");
  }

  bool shared() const noexcept { return frame_ids_.empty(); }

  ModelKind kind() const override { return ModelKind::PixelLogDepth; }
  std::size_t parameter_count() const override { return plane() * std::max<std::size_t>(1, frame_ids_.size()); }
  std::vector<std::int64_t> config_words() const override {
    std::vector<std::int64_t> w{width_, height_, static_cast<std::int64_t>(frame_ids_.size())};
    w.insert(w.end(), frame_ids_.begin(), frame_ids_.end());
    return w;
  }
  std::unique_ptr<DepthModel> clone() const override { return std::make_unique<PixelLogDepthModel>(*this); }

  std::size_t slot(int frame_id) const {
    if (shared()) return 0;
    auto it = std::find(frame_ids_.begin(), frame_ids_.end(), frame_id);
    if (it == frame_ids_.end()) throw ModelConfigError("frame " + std::to_string(frame_id) + " has no parameters");
    return static_cast<std::size_t>(it - frame_ids_.begin());
  }

  Tensor forward(const Tensor& params, const FrameInput& input) const override {
    if (params.shape().numel() != parameter_count())
      throw ModelConfigError("expected " + std::to_string(parameter_count()) + " parameters");
    if (input.image && (input.image->width() != width_ || input.image->height() != height_))
      throw ShapeError("PixelLogDepthModel is " + std::to_string(width_) + "x" + std::to_string(height_) + ", image is " +
                       std::to_string(input.image->width()) + "x" + std::to_string(input.image->height()));
    const Shape map{1, height_, width_};
    return ops::exp(shared() ? ops::slice(params, 0, map) : ops::slice(params, slot(input.frame_id) * plane(), map));
  }

  std::vector<double> init_parameters(std::uint64_t) const override { return std::vector<double>(parameter_count(), 0.0); }

 private:
  std::size_t plane() const { return static_cast<std::size_t>(width_) * height_; }

  int width_;
  int height_;
  std::vector<int> frame_ids_;
};

/// Runs a model outside training and returns the prediction as a raster.
inline DepthMap predict_depth(const DepthModel& model, std::span<const double> params, const FrameInput& input) {
  Tape tape;
  const Tensor p = tape.constant({static_cast<int>(params.size()), 1, 1}, std::vector<double>(params.begin(), params.end()));
  return model.forward(p, input).to_raster();
}

// Parameter files:
//   8 bytes  magic "EDDEPTH\0"
//   u32      format version
//   u32      model kind
//   u32      number of config words, followed by that many i64 words
//   u64      parameter count, followed by that many f64 values
// All integers and floats little-endian.
namespace param_file {

inline constexpr std::array<char, 8> kMagic{'E', 'D', 'D', 'E', 'P', 'T', 'H', '\0'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T value) {
  auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  os.write(reinterpret_cast<const char*>(bits.data()), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  std::array<unsigned char, sizeof(T)> bits{};
  if (!is.read(reinterpret_cast<char*>(bits.data()), sizeof(T))) throw ParseError("truncated parameter file while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  return std::bit_cast<T>(bits);
}

}  // namespace detail

struct Header {
  ModelKind kind = ModelKind::DepthNet;
  std::vector<std::int64_t> config;
};

inline void write_stream(std::ostream& os, const DepthModel& model, std::span<const double> params) {
  if (params.size() != model.parameter_count()) throw ModelConfigError("parameter count does not match model");
  os.write(kMagic.data(), kMagic.size());
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(model.kind()));
  const auto words = model.config_words();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(words.size()));
  for (auto w : words) detail::put<std::int64_t>(os, w);
  detail::put<std::uint64_t>(os, params.size());
  for (double v : params) detail::put<double>(os, v);
}

inline std::pair<Header, std::vector<double>> read_stream(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size())) throw ParseError("truncated parameter file header");
  if (magic != kMagic) throw ParseError("not a parameter file (bad magic)");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kVersion) throw VersionError("parameter file version " + std::to_string(version));
  Header h;
  h.kind = static_cast<ModelKind>(detail::get<std::uint32_t>(is, "model kind"));
  const auto n_words = detail::get<std::uint32_t>(is, "config size");
  if (n_words > 1u << 20) throw ParseError("implausible config block size");
  for (std::uint32_t i = 0; i < n_words; ++i) h.config.push_back(detail::get<std::int64_t>(is, "config"));
  const auto count = detail::get<std::uint64_t>(is, "parameter count");
  if (count > (1ull << 32)) throw ParseError("implausible parameter count");
  std::vector<double> params;
  params.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) params.push_back(detail::get<double>(is, "parameters"));
  return {std::move(h), std::move(params)};
}

}  // namespace param_file

inline void save_parameters(const std::filesystem::path& path, const DepthModel& model, std::span<const double> params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  param_file::write_stream(os, model, params);
  if (!os) throw IoError("failed writing " + path.string());
}

/// Loads parameters for an existing model; the stored architecture must match exactly.
inline std::vector<double> load_parameters(const std::filesystem::path& path, const DepthModel& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto [header, params] = param_file::read_stream(is);
  if (header.kind != model.kind() || header.config != model.config_words())
    throw ModelConfigError(path.string() + " was saved for a different model configuration");
  if (params.size() != model.parameter_count())
    throw ModelConfigError(path.string() + " holds " + std::to_string(params.size()) + " parameters, model needs " +
                           std::to_string(model.parameter_count()));
  return params;
}

/// Reconstructs the model described by a parameter file's header.
inline std::pair<std::unique_ptr<DepthModel>, std::vector<double>> load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto [header, params] = param_file::read_stream(is);
  std::unique_ptr<DepthModel> model;
  const auto& w = header.config;
  if (header.kind == ModelKind::DepthNet) {
    if (w.size() != 3) throw ModelConfigError("bad DepthNet config block");
    model = std::make_unique<DepthNet>(DepthNetConfig{static_cast<int>(w[0]), static_cast<int>(w[1]), std::bit_cast<double>(w[2])});
  } else if (header.kind == ModelKind::PixelLogDepth) {
    if (w.size() < 3 || w.size() != 3 + static_cast<std::size_t>(w[2])) throw ModelConfigError("bad PixelLogDepth config block");
    model = std::make_unique<PixelLogDepthModel>(static_cast<int>(w[0]), static_cast<int>(w[1]),
                                                 std::vector<int>(w.begin() + 3, w.end()));
  } else {
    throw ModelConfigError("unknown model kind " + std::to_string(static_cast<std::uint32_t>(header.kind)));
  }
  if (params.size() != model->parameter_count()) throw ModelConfigError("parameter count does not match stored config");
  return {std::move(model), std::move(params)};
}

}  // namespace endodepth
