#pragma once

#include "mmnar/tensor.hpp"

// Dense numeric kernels. The default entry points run the hot loops with
// OpenMP; kernels::serial holds the plain reference implementations used by
// the parity tests and the benchmark. Every kernel accumulates each output
// element in a fixed order, so parallel and serial results are bit-identical
// regardless of thread count.

namespace mmnar::kernels {

// out = a[m,k] * b[k,n]
void matmul_nn(const Tensor& a, const Tensor& b, Tensor& out);
// out = a[m,k] * b[n,k]^T
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out);
// out = a[k,m]^T * b[k,n]
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out);

// acc += x (shapes must match)
void add_inplace(Tensor& acc, const Tensor& x);
// acc += alpha * x
void axpy(double alpha, const Tensor& x, Tensor& acc);

void sigmoid_map(const Tensor& x, Tensor& out);
void tanh_map(const Tensor& x, Tensor& out);
void relu_map(const Tensor& x, Tensor& out);

namespace serial {
void matmul_nn(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out);
void sigmoid_map(const Tensor& x, Tensor& out);
void tanh_map(const Tensor& x, Tensor& out);
void relu_map(const Tensor& x, Tensor& out);
}  // namespace serial

}  // namespace mmnar::kernels
