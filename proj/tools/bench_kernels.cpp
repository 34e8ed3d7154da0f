// Compares the OpenMP kernels against the serial references: correctness
// (results must be bit-identical) and wall time.

#include <chrono>
#include <cstdio>
#include <functional>

#include "mmnar/kernels.hpp"
#include "mmnar/rng.hpp"
#ifdef _OPENMP
#include <omp.h>
#endif

using namespace mmnar;

namespace {

Tensor random_tensor(int r, int c, uint64_t key) {
  StreamRng rng(key, "bench");
  Tensor t(r, c);
  for (double& v : t.data) v = rng.normal();
  return t;
}

double time_ms(const std::function<void()>& fn, int reps) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without openmp\n");
#endif
  std::printf("%-14s %8s %12s %12s %9s %6s\n", "kernel", "size", "serial(ms)", "omp(ms)", "speedup",
              "exact");

  const int sizes[] = {64, 128, 256, 512};
  bool all_exact = true;
  for (int n : sizes) {
    const Tensor a = random_tensor(n, n, 11 + n);
    const Tensor b = random_tensor(n, n, 23 + n);
    const int reps = n <= 128 ? 50 : 8;

    struct Case {
      const char* name;
      void (*omp_fn)(const Tensor&, const Tensor&, Tensor&);
      void (*serial_fn)(const Tensor&, const Tensor&, Tensor&);
    };
    const Case cases[] = {
        {"matmul_nn", kernels::matmul_nn, kernels::serial::matmul_nn},
        {"matmul_nt", kernels::matmul_nt, kernels::serial::matmul_nt},
        {"matmul_tn", kernels::matmul_tn, kernels::serial::matmul_tn},
    };
    for (const Case& c : cases) {
      Tensor out_serial, out_omp;
      const double ts = time_ms([&] { c.serial_fn(a, b, out_serial); }, reps);
      const double to = time_ms([&] { c.omp_fn(a, b, out_omp); }, reps);
      const bool exact = bit_identical(out_serial, out_omp);
      all_exact &= exact;
      std::printf("%-14s %4dx%-4d %12.3f %12.3f %8.2fx %6s\n", c.name, n, n, ts, to, ts / to,
                  exact ? "yes" : "NO");
    }
  }
  {
    const int n = 2048, m = 512;
    const Tensor x = random_tensor(n, m, 99);
    Tensor out_serial, out_omp;
    const double ts = time_ms([&] { kernels::serial::sigmoid_map(x, out_serial); }, 20);
    const double to = time_ms([&] { kernels::sigmoid_map(x, out_omp); }, 20);
    const bool exact = bit_identical(out_serial, out_omp);
    all_exact &= exact;
    std::printf("%-14s %4dx%-4d %12.3f %12.3f %8.2fx %6s\n", "sigmoid", n, m, ts, to, ts / to,
                exact ? "yes" : "NO");
  }
  if (!all_exact) {
    std::printf("FAIL: omp kernels are not bit-identical to the serial references\n");
    return 1;
  }
  return 0;
}
