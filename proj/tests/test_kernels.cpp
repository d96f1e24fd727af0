#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "fedcast/kernels.hpp"
#include "oracles.hpp"

using namespace fedcast;

TEST_CASE("matmul variants agree with the naive oracle and with each other") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + gen() % 70, k = 1 + gen() % 70, n = 1 + gen() % 70;
    const bool ta = gen() % 2, tb = gen() % 2;
    const auto a = oracle::random_vector(gen, m * k);
    const auto b = oracle::random_vector(gen, k * n);
    const auto expect = oracle::matmul(a, b, m, k, n, ta, tb);
    kernels::MatmulDims dims{m, k, n, ta, tb};
    std::vector<double> cs(m * n, 0.0), cp(m * n, 0.0);
    kernels::matmul_serial(a, b, cs, dims, false);
    kernels::matmul(a, b, cp, dims, false);
    CHECK(cs == cp);
    for (std::size_t i = 0; i < cs.size(); ++i) CHECK(cs[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    // Accumulate mode adds onto the existing contents.
    std::vector<double> acc(m * n, 1.0);
    kernels::matmul(a, b, acc, dims, true);
    for (std::size_t i = 0; i < acc.size(); ++i) CHECK(acc[i] == doctest::Approx(cs[i] + 1.0));
  }
}

TEST_CASE("large matmul takes the parallel path and stays bitwise equal") {
  std::mt19937_64 gen(4);
  const std::size_t m = 300, k = 200, n = 150;
  const auto a = oracle::random_vector(gen, m * k);
  const auto b = oracle::random_vector(gen, k * n);
  std::vector<double> cs(m * n), cp(m * n);
  kernels::matmul_serial(a, b, cs, {m, k, n, false, false}, false);
  kernels::matmul(a, b, cp, {m, k, n, false, false}, false);
  CHECK(cs == cp);
}

TEST_CASE("weighted_sum matches the scalar oracle and is order-stable") {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 1 + gen() % 12, len = 1 + gen() % 5000;
    std::vector<std::vector<double>> rows;
    std::vector<std::span<const double>> spans;
    for (std::size_t i = 0; i < k; ++i) rows.push_back(oracle::random_vector(gen, len, -5, 5));
    for (const auto& r : rows) spans.emplace_back(r);
    auto w = oracle::random_vector(gen, k, 0.0, 1.0);
    std::vector<double> s(len), p(len);
    kernels::weighted_sum_serial(spans, w, s);
    kernels::weighted_sum(spans, w, p);
    CHECK(s == p);
    for (std::size_t j = 0; j < len; j += 97) {
      long double acc = 0.0L;
      for (std::size_t i = 0; i < k; ++i) acc += static_cast<long double>(w[i]) * rows[i][j];
      CHECK(s[j] == doctest::Approx(static_cast<double>(acc)).epsilon(1e-12));
    }
  }
}

TEST_CASE("thread count can be set") {
  const int before = kernels::max_threads();
  kernels::set_threads(1);
  CHECK(kernels::max_threads() == 1);
  kernels::set_threads(before);
  CHECK(kernels::max_threads() == before);
}
