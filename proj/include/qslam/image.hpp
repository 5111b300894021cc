#pragma once

#include <vector>

#include <Eigen/Core>

#include "qslam/common.hpp"

namespace qslam {

/// Row-major dense image. (0,0) is the top-left pixel.
template <typename T>
class Image {
 public:
  Image() : width_(0), height_(0) {}
  Image(int width, int height, const T& fill = T{})
      : width_(width), height_(height),
        data_(static_cast<size_t>(width) * height, fill) {
    require(width > 0 && height > 0, ErrorKind::InvalidInput,
            "image dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  size_t size() const { return data_.size(); }

  T& operator()(int x, int y) { return data_[static_cast<size_t>(y) * width_ + x]; }
  const T& operator()(int x, int y) const {
    return data_[static_cast<size_t>(y) * width_ + x];
  }

  T& at(int x, int y) {
    require(contains(x, y), ErrorKind::InvalidInput, "pixel out of bounds");
    return (*this)(x, y);
  }
  const T& at(int x, int y) const {
    require(contains(x, y), ErrorKind::InvalidInput, "pixel out of bounds");
    return (*this)(x, y);
  }

  bool contains(int x, int y) const {
    return x >= 0 && x < width_ && y >= 0 && y < height_;
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

 private:
  int width_;
  int height_;
  std::vector<T> data_;
};

/// Depth in meters; 0 marks an invalid pixel.
using DepthImage = Image<double>;
/// Segment / semantic ids; 0 is background.
using MaskImage = Image<int>;
/// RGB in [0, 1] per channel.
using ColorImage = Image<Eigen::Vector3d>;

}  // namespace qslam
