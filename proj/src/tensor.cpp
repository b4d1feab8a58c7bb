#include "advseg/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "advseg/errors.hpp"

namespace advseg {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_volume(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

LabelMap::LabelMap(std::size_t height, std::size_t width, std::vector<int> ids)
    : height_(height), width_(width), ids_(std::move(ids)) {
  if (ids_.size() != height_ * width_) {
    throw ShapeError("label map " + std::to_string(height_) + "x" + std::to_string(width_) +
                     " does not match " + std::to_string(ids_.size()) + " ids");
  }
}

Tensor LabelMap::to_tensor() const {
  std::vector<double> v(ids_.begin(), ids_.end());
  return Tensor({height_, width_}, std::move(v));
}

LabelMap LabelMap::from_tensor(const Tensor& t) {
  if (t.rank() != 2) {
    throw FormatError("label map tensor must be rank 2, got " + shape_string(t.shape()));
  }
  std::vector<int> ids(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    double v = t[i];
    if (!(v >= 0.0) || v != std::floor(v) || v > 1e9) {
      throw FormatError("label map holds non-integer or negative class id");
    }
    ids[i] = static_cast<int>(v);
  }
  return LabelMap(t.dim(0), t.dim(1), std::move(ids));
}

SoftmaxField::SoftmaxField(Tensor probs) : probs_(std::move(probs)) {
  if (probs_.rank() != 3 || probs_.dim(2) < 2) {
    throw ShapeError("softmax field must be H x W x |C| with |C| >= 2, got " +
                     shape_string(probs_.shape()));
  }
  const std::size_t c = probs_.dim(2);
  for (std::size_t z = 0; z < num_pixels(); ++z) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      double p = probs_[z * c + k];
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw ShapeError("softmax field holds a negative or non-finite probability");
      }
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ShapeError("softmax field pixel " + std::to_string(z) + " does not sum to 1");
    }
  }
}

}  // namespace advseg
