#include "fot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <sstream>

namespace fot {

void log_warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }
void log_info(const std::string& msg) { std::cerr << msg << "\n"; }

int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& fn) {
  const std::int64_t n = end - begin;
  if (n <= 0) return;
  const int nthreads = std::min<std::int64_t>(hardware_threads(), n);
  if (nthreads <= 1) {
    for (std::int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(nthreads);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (int t = 0; t < nthreads; ++t) {
    workers.emplace_back([&, t] {
      try {
        // strided assignment: index i handled by thread i % nthreads
        for (std::int64_t i = begin + t; i < end; i += nthreads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) fail("negative tensor dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
    fail("tensor data size does not match shape " + shape_str());
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) fail("tensor dim index out of range");
  return shape_[static_cast<std::size_t>(i)];
}

double& Tensor::at(int c, int y, int x) {
  return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
}
double Tensor::at(int c, int y, int x) const {
  return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
}
double& Tensor::at(int r, int c) {
  return data_[static_cast<std::size_t>(r) * shape_[1] + c];
}
double Tensor::at(int r, int c) const {
  return data_[static_cast<std::size_t>(r) * shape_[1] + c];
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != size()) fail("reshape element count mismatch");
  return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << ")";
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::min() const {
  if (data_.empty()) fail("min of empty tensor");
  return *std::min_element(data_.begin(), data_.end());
}
double Tensor::max() const {
  if (data_.empty()) fail("max of empty tensor");
  return *std::max_element(data_.begin(), data_.end());
}
double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::clamp_(double lo, double hi) {
  for (double& v : data_) v = std::min(hi, std::max(lo, v));
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
  if (chw.rank() != 3) fail("resize_bilinear expects a (C,H,W) tensor, got " + chw.shape_str());
  if (out_h <= 0 || out_w <= 0) fail("resize_bilinear: target size must be positive");
  const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (H == out_h && W == out_w) return chw;
  Tensor out({C, out_h, out_w});
  const double sy = static_cast<double>(H) / out_h;
  const double sx = static_cast<double>(W) / out_w;
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
      const int y0 = static_cast<int>(std::floor(fy));
      const int y1 = std::min(y0 + 1, H - 1);
      const double dy = fy - y0;
      for (int ox = 0; ox < out_w; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
        const int x0 = static_cast<int>(std::floor(fx));
        const int x1 = std::min(x0 + 1, W - 1);
        const double dx = fx - x0;
        const double v = chw.at(c, y0, x0) * (1.0 - dy) * (1.0 - dx) +
                         chw.at(c, y0, x1) * (1.0 - dy) * dx +
                         chw.at(c, y1, x0) * dy * (1.0 - dx) +
                         chw.at(c, y1, x1) * dy * dx;
        out.at(c, oy, ox) = v;
      }
    }
  }
  return out;
}

Tensor pad_to_square(const Tensor& chw, double pad) {
  if (chw.rank() != 3) fail("pad_to_square expects a (C,H,W) tensor");
  const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (H == W) return chw;
  const int S = std::max(H, W);
  Tensor out({C, S, S}, pad);
  const int oy = (S - H) / 2;
  const int ox = (S - W) / 2;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(c, y + oy, x + ox) = chw.at(c, y, x);
  return out;
}

}  // namespace fot
