#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "tapkit/common.hpp"

namespace tapkit::ad {

// Dense row-major 2-D array of doubles. Everything in the compute graph is
// a matrix [rows, cols]; higher-rank data (feature grids, frame batches)
// carries its extra dimensions as side metadata.
class Tensor {
 public:
  Tensor() : rows_(0), cols_(0) {}
  Tensor(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols),
        v_(static_cast<std::size_t>(rows) * cols, fill) {
    TAPKIT_CHECK_ARG(rows >= 0 && cols >= 0, "Tensor: negative shape");
  }
  Tensor(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), v_(std::move(data)) {
    TAPKIT_CHECK_ARG(v_.size() == static_cast<std::size_t>(rows) * cols,
                     "Tensor: data size does not match shape");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  double& operator()(int r, int c) {
    return v_[static_cast<std::size_t>(r) * cols_ + c];
  }
  double operator()(int r, int c) const {
    return v_[static_cast<std::size_t>(r) * cols_ + c];
  }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  bool same_shape(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  const std::vector<double>& vec() const { return v_; }
  std::vector<double>& vec() { return v_; }

 private:
  int rows_, cols_;
  std::vector<double> v_;
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(int rows, int cols, double fill = 0.0) {
  return std::make_shared<Tensor>(rows, cols, fill);
}
inline TensorPtr make_tensor(int rows, int cols, std::vector<double> data) {
  return std::make_shared<Tensor>(rows, cols, std::move(data));
}

}  // namespace tapkit::ad
