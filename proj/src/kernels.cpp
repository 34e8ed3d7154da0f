#include "mmnar/kernels.hpp"

#include <stdexcept>

namespace mmnar::kernels {

namespace {

void check_nn(const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
}

void check_nt(const Tensor& a, const Tensor& b) {
  if (a.cols != b.cols)
    throw std::invalid_argument("matmul_nt: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
}

void check_tn(const Tensor& a, const Tensor& b) {
  if (a.rows != b.rows)
    throw std::invalid_argument("matmul_tn: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
}

// Below this many multiply-adds the parallel loops run single-threaded.
constexpr long kParallelCutoff = 32768;

}  // namespace

void matmul_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  check_nn(a, b);
  const int m = a.rows, k = a.cols, n = b.cols;
  out = Tensor(m, n);
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work >= kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    double* ci = out.row_ptr(i);
    const double* ai = a.row_ptr(i);
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.row_ptr(p);
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  check_nt(a, b);
  const int m = a.rows, k = a.cols, n = b.rows;
  out = Tensor(m, n);
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work >= kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = out.row_ptr(i);
    for (int j = 0; j < n; ++j) {
      const double* bj = b.row_ptr(j);
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  check_tn(a, b);
  const int k = a.rows, m = a.cols, n = b.cols;
  out = Tensor(m, n);
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work >= kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    double* ci = out.row_ptr(i);
    for (int p = 0; p < k; ++p) {
      const double api = a.at(p, i);
      const double* bp = b.row_ptr(p);
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void add_inplace(Tensor& acc, const Tensor& x) {
  if (!acc.same_shape(x))
    throw std::invalid_argument("add_inplace: shape mismatch " + acc.shape_str() + " and " + x.shape_str());
  const size_t n = acc.size();
  double* a = acc.data.data();
  const double* b = x.data.data();
#pragma omp parallel for schedule(static) if (n >= 65536)
  for (long i = 0; i < static_cast<long>(n); ++i) a[i] += b[i];
}

void axpy(double alpha, const Tensor& x, Tensor& acc) {
  if (!acc.same_shape(x))
    throw std::invalid_argument("axpy: shape mismatch " + acc.shape_str() + " and " + x.shape_str());
  const size_t n = acc.size();
  double* a = acc.data.data();
  const double* b = x.data.data();
#pragma omp parallel for schedule(static) if (n >= 65536)
  for (long i = 0; i < static_cast<long>(n); ++i) a[i] += alpha * b[i];
}

void sigmoid_map(const Tensor& x, Tensor& out) {
  out = Tensor(x.rows, x.cols);
  const size_t n = x.size();
#pragma omp parallel for schedule(static) if (n >= 16384)
  for (long i = 0; i < static_cast<long>(n); ++i) {
    const double v = x.data[i];
    out.data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
}

void tanh_map(const Tensor& x, Tensor& out) {
  out = Tensor(x.rows, x.cols);
  const size_t n = x.size();
#pragma omp parallel for schedule(static) if (n >= 16384)
  for (long i = 0; i < static_cast<long>(n); ++i) out.data[i] = std::tanh(x.data[i]);
}

void relu_map(const Tensor& x, Tensor& out) {
  out = Tensor(x.rows, x.cols);
  const size_t n = x.size();
#pragma omp parallel for schedule(static) if (n >= 16384)
  for (long i = 0; i < static_cast<long>(n); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
}

namespace serial {

void matmul_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  check_nn(a, b);
  const int m = a.rows, k = a.cols, n = b.cols;
  out = Tensor(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out.at(i, j) = s;
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  check_nt(a, b);
  const int m = a.rows, k = a.cols, n = b.rows;
  out = Tensor(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(j, p);
      out.at(i, j) = s;
    }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  check_tn(a, b);
  const int k = a.rows, m = a.cols, n = b.cols;
  out = Tensor(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a.at(p, i) * b.at(p, j);
      out.at(i, j) = s;
    }
}

void sigmoid_map(const Tensor& x, Tensor& out) {
  out = Tensor(x.rows, x.cols);
  for (size_t i = 0; i < x.size(); ++i) {
    const double v = x.data[i];
    out.data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
}

void tanh_map(const Tensor& x, Tensor& out) {
  out = Tensor(x.rows, x.cols);
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = std::tanh(x.data[i]);
}

void relu_map(const Tensor& x, Tensor& out) {
  out = Tensor(x.rows, x.cols);
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
}

}  // namespace serial

}  // namespace mmnar::kernels
