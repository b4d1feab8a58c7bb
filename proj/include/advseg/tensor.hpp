#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace advseg {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_volume(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Images are stored as H x W x channels, kernels as k x k x Cin x Cout.
/// A rank-0 tensor (empty shape) holds a single scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // 3-D accessors for H x W x C tensors.
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }

  double item() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Per-pixel class ids, row-major H x W.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, int fill = 0)
      : height_(height), width_(width), ids_(height * width, fill) {}
  LabelMap(std::size_t height, std::size_t width, std::vector<int> ids);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return ids_.size(); }

  int operator[](std::size_t i) const { return ids_[i]; }
  int& operator[](std::size_t i) { return ids_[i]; }
  int at(std::size_t y, std::size_t x) const { return ids_[y * width_ + x]; }
  int& at(std::size_t y, std::size_t x) { return ids_[y * width_ + x]; }

  std::span<const int> ids() const { return ids_; }

  Tensor to_tensor() const;
  static LabelMap from_tensor(const Tensor& t);

  friend bool operator==(const LabelMap& a, const LabelMap& b) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<int> ids_;
};

/// Per-pixel probability vectors, stored as an H x W x |C| tensor.
class SoftmaxField {
 public:
  SoftmaxField() = default;
  explicit SoftmaxField(Tensor probs);

  std::size_t height() const { return probs_.dim(0); }
  std::size_t width() const { return probs_.dim(1); }
  std::size_t num_classes() const { return probs_.dim(2); }
  std::size_t num_pixels() const { return height() * width(); }

  const Tensor& tensor() const { return probs_; }
  std::span<const double> pixel(std::size_t z) const {
    return probs_.values().subspan(z * num_classes(), num_classes());
  }

 private:
  Tensor probs_;
};

}  // namespace advseg
