#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmnar {

// Dense row-major matrix of doubles. Row vectors are 1xN, scalars 1x1.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative shape");
  }

  static Tensor zeros(int r, int c) { return Tensor(r, c); }

  static Tensor full(int r, int c, double v) {
    Tensor t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }

  static Tensor row(std::vector<double> v) {
    Tensor t;
    t.rows = 1;
    t.cols = static_cast<int>(v.size());
    t.data = std::move(v);
    return t;
  }

  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

  double* row_ptr(int i) { return data.data() + static_cast<size_t>(i) * cols; }
  const double* row_ptr(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

  size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
  }
};

}  // namespace mmnar
