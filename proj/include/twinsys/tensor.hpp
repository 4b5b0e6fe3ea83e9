#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "twinsys/common.hpp"

namespace twinsys {

inline std::size_t shape_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major tensor. Rank 1 for feature vectors, rank 3 (c, h, w) for
// images and convolutional activations.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_count(shape_))
      throw Error("tensor data size " + std::to_string(data_.size()) +
                  " does not match shape " + shape_str(shape_));
  }

  static Tensor vec(std::vector<double> data) {
    std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // (c, y, x) access for rank-3 tensors.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (shape_count(shape) != data_.size())
      throw Error("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                  " changes element count");
    return Tensor(std::move(shape), data_);
  }

  bool finite() const { return all_finite(data_); }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace twinsys
