#include "fedcast/kernels.hpp"

#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fedcast::kernels {
namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelMatmulWork = 1 << 15;
constexpr std::size_t kParallelSumWork = 1 << 14;

inline void matmul_row(std::span<const double> a, std::span<const double> b,
                       std::span<double> c, const MatmulDims& d,
                       bool accumulate, std::size_t i) {
  double* crow = c.data() + i * d.n;
  if (!accumulate) {
    for (std::size_t j = 0; j < d.n; ++j) crow[j] = 0.0;
  }
  for (std::size_t p = 0; p < d.k; ++p) {
    const double aip = d.trans_a ? a[p * d.m + i] : a[i * d.k + p];
    if (aip == 0.0) continue;
    if (d.trans_b) {
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += aip * b[j * d.k + p];
    } else {
      const double* brow = b.data() + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void check_matmul(std::span<const double> a, std::span<const double> b,
                  std::span<double> c, const MatmulDims& d) {
  if (a.size() != d.m * d.k || b.size() != d.k * d.n || c.size() != d.m * d.n) {
    throw std::invalid_argument("matmul buffer sizes do not match dims");
  }
}

void check_sum(std::span<const std::span<const double>> inputs,
               std::span<const double> weights, std::span<double> out) {
  if (inputs.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: one weight per input required");
  }
  for (const auto& in : inputs) {
    if (in.size() != out.size()) {
      throw std::invalid_argument("weighted_sum: input length mismatch");
    }
  }
}

}  // namespace

void matmul_serial(std::span<const double> a, std::span<const double> b,
                   std::span<double> c, const MatmulDims& dims,
                   bool accumulate) {
  check_matmul(a, b, c, dims);
  for (std::size_t i = 0; i < dims.m; ++i) {
    matmul_row(a, b, c, dims, accumulate, i);
  }
}

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, const MatmulDims& dims, bool accumulate) {
  check_matmul(a, b, c, dims);
  const auto rows = static_cast<long long>(dims.m);
  const bool wide = dims.m * dims.k * dims.n >= kParallelMatmulWork;
#pragma omp parallel for schedule(static) if (wide)
  for (long long i = 0; i < rows; ++i) {
    matmul_row(a, b, c, dims, accumulate, static_cast<std::size_t>(i));
  }
}

void weighted_sum_serial(std::span<const std::span<const double>> inputs,
                         std::span<const double> weights,
                         std::span<double> out) {
  check_sum(inputs, weights, out);
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      acc += weights[k] * inputs[k][j];
    }
    out[j] = acc;
  }
}

void weighted_sum(std::span<const std::span<const double>> inputs,
                  std::span<const double> weights, std::span<double> out) {
  check_sum(inputs, weights, out);
  const auto len = static_cast<long long>(out.size());
  const bool wide = out.size() * inputs.size() >= kParallelSumWork;
#pragma omp parallel for schedule(static) if (wide)
  for (long long j = 0; j < len; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      acc += weights[k] * inputs[k][static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(j)] = acc;
  }
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace fedcast::kernels
