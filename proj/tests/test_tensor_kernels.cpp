#include <doctest.h>

#include "mmnar/kernels.hpp"
#include "test_support.hpp"

using namespace mmnar;
using testsupport::random_tensor;

namespace {

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t(2, 3);
  CHECK(t.size() == 6);
  CHECK(t.rows * t.cols == static_cast<int>(t.data.size()));
  t.at(1, 2) = 4.0;
  CHECK(t.data[5] == 4.0);
  CHECK(Tensor::scalar(2.5).is_scalar());
  CHECK(Tensor::row({1, 2, 3}).cols == 3);
  Tensor bad = Tensor::full(2, 2, 1.0);
  bad.at(0, 1) = std::nan("");
  CHECK_FALSE(bad.all_finite());
  CHECK(t.all_finite());
}

TEST_CASE("omp kernels match the serial references bit for bit") {
  // odd sizes on purpose; includes shapes above and below the parallel cutoff
  const int shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 64, 64}, {130, 70, 45}, {256, 96, 31}};
  for (auto [m, k, n] : shapes) {
    const Tensor a = random_tensor(m, k, 1000 + m + k);
    const Tensor b = random_tensor(k, n, 2000 + k + n);
    Tensor c1, c2;
    kernels::matmul_nn(a, b, c1);
    kernels::serial::matmul_nn(a, b, c2);
    CHECK(bit_identical(c1, c2));

    const Tensor bt = random_tensor(n, k, 3000 + n);
    kernels::matmul_nt(a, bt, c1);
    kernels::serial::matmul_nt(a, bt, c2);
    CHECK(bit_identical(c1, c2));

    const Tensor at = random_tensor(k, m, 4000 + k);
    kernels::matmul_tn(at, b, c1);
    kernels::serial::matmul_tn(at, b, c2);
    CHECK(bit_identical(c1, c2));
  }
  const Tensor x = random_tensor(300, 211, 77);
  Tensor y1, y2;
  kernels::sigmoid_map(x, y1);
  kernels::serial::sigmoid_map(x, y2);
  CHECK(bit_identical(y1, y2));
  kernels::tanh_map(x, y1);
  kernels::serial::tanh_map(x, y2);
  CHECK(bit_identical(y1, y2));
  kernels::relu_map(x, y1);
  kernels::serial::relu_map(x, y2);
  CHECK(bit_identical(y1, y2));
}

TEST_CASE("matmul against a hand-computed product") {
  Tensor a(2, 3), b(3, 2);
  a.data = {1, 2, 3, 4, 5, 6};
  b.data = {7, 8, 9, 10, 11, 12};
  Tensor c;
  kernels::matmul_nn(a, b, c);
  CHECK(c.at(0, 0) == 58.0);
  CHECK(c.at(0, 1) == 64.0);
  CHECK(c.at(1, 0) == 139.0);
  CHECK(c.at(1, 1) == 154.0);
}

TEST_CASE("kernel shape errors name both shapes") {
  const Tensor a = random_tensor(2, 3, 1);
  const Tensor b = random_tensor(4, 5, 2);
  Tensor c;
  CHECK_THROWS_WITH_AS(kernels::matmul_nn(a, b, c),
                       doctest::Contains("[2 x 3]"), std::invalid_argument);
}

TEST_CASE("repeated kernel calls are deterministic") {
  const Tensor a = random_tensor(120, 90, 5);
  const Tensor b = random_tensor(90, 64, 6);
  Tensor c1, c2;
  kernels::matmul_nn(a, b, c1);
  kernels::matmul_nn(a, b, c2);
  CHECK(bit_identical(c1, c2));
}
