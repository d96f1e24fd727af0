#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Data-parallel inner loops. Every kernel has a serial reference and an
// OpenMP variant; both accumulate in the same order, so results agree bitwise.
namespace fedcast::kernels {

struct MatmulDims {
  std::size_t m = 0;  // rows of op(A) and C
  std::size_t k = 0;  // inner dimension
  std::size_t n = 0;  // cols of op(B) and C
  bool trans_a = false;
  bool trans_b = false;
};

/// C (+)= op(A) * op(B). A is stored m x k (or k x m when trans_a).
void matmul_serial(std::span<const double> a, std::span<const double> b,
                   std::span<double> c, const MatmulDims& dims,
                   bool accumulate);
void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, const MatmulDims& dims, bool accumulate);

/// out[j] = sum_k weights[k] * inputs[k][j], summed in k order.
void weighted_sum_serial(std::span<const std::span<const double>> inputs,
                         std::span<const double> weights, std::span<double> out);
void weighted_sum(std::span<const std::span<const double>> inputs,
                  std::span<const double> weights, std::span<double> out);

/// Threads the OpenMP variants will use (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace fedcast::kernels
