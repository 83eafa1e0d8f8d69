#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "endodepth/errors.hpp"

namespace endodepth {

/// Row-major single-channel image. Element (row v, column u) lives at v * width + u.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, T fill = T{})
      : width_(width), height_(height), data_(checked_size(width, height), fill) {}
  Raster(int width, int height, std::vector<T> data) : width_(width), height_(height), data_(std::move(data)) {
    if (data_.size() != checked_size(width, height)) throw ShapeError("raster data size does not match dimensions");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int row, int col) { return data_[static_cast<std::size_t>(row) * width_ + col]; }
  const T& operator()(int row, int col) const { return data_[static_cast<std::size_t>(row) * width_ + col]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool contains(int row, int col) const noexcept { return row >= 0 && row < height_ && col >= 0 && col < width_; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool operator==(const Raster&) const = default;

 private:
  static std::size_t checked_size(int width, int height) {
    if (width < 0 || height < 0) throw ShapeError("negative raster dimensions");
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// Depth in scene units; 0 marks an invalid pixel.
using DepthMap = Raster<double>;
/// Grayscale intensity in [0, 1].
using IntensityImage = Raster<double>;
using BinaryMask = Raster<unsigned char>;

template <typename T>
std::size_t count_nonzero(const Raster<T>& r) {
  return static_cast<std::size_t>(std::count_if(r.values().begin(), r.values().end(), [](const T& x) { return x != T{}; }));
}

}  // namespace endodepth
