#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "fot/common.hpp"

namespace fot {

// Dense row-major tensor of doubles. Images are stored channels-first
// (C x H x W) with values in [0,1]; feature batches are (B x d).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, double fill);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 3-d (C,H,W) and 2-d (R,C) accessors for the common cases.
  double& at(int c, int y, int x);
  double at(int c, int y, int x) const;
  double& at(int r, int c);
  double at(int r, int c) const;

  Tensor reshaped(std::vector<int> shape) const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  bool all_finite() const;
  double min() const;
  double max() const;
  double sum() const;

  void fill(double v);
  void clamp_(double lo, double hi);

  std::uint64_t checksum() const {
    return fnv1a(data_.data(), data_.size() * sizeof(double));
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

// Bilinear resample of a (C,H,W) tensor to (C,out_h,out_w) using half-pixel
// centers with edge clamping. Interpolation arithmetic is done in double.
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);

// Pads a (C,H,W) tensor to a square (C,S,S), S = max(H,W), original content
// centered, padding value `pad`.
Tensor pad_to_square(const Tensor& chw, double pad = 0.0);

}  // namespace fot
