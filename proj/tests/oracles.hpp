#pragma once

// Straightforward reference computations the library is checked against.
// Written for clarity, not speed, and kept independent of library code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

// C = op(A) * op(B), row-major, A is m x k (k x m if ta), B is k x n (n x k if tb).
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n, bool ta = false,
                                  bool tb = false) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0.0L;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        acc += static_cast<long double>(av) * bv;
      }
      c[i * n + j] = static_cast<double>(acc);
    }
  }
  return c;
}

// sum_k w_k x_k / sum_k w_k for one coordinate.
inline double weighted_mean(const std::vector<double>& xs, const std::vector<double>& ws) {
  long double num = 0.0L, den = 0.0L;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    num += static_cast<long double>(ws[i]) * xs[i];
    den += ws[i];
  }
  return static_cast<double>(num / den);
}

// Mean of series[max(0, i-w+1) .. i].
inline std::vector<double> trailing_mean(const std::vector<double>& s, std::size_t w) {
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t lo = i + 1 >= w ? i + 1 - w : 0;
    long double acc = 0.0L;
    for (std::size_t j = lo; j <= i; ++j) acc += s[j];
    out[i] = static_cast<double>(acc / static_cast<long double>(i - lo + 1));
  }
  return out;
}

// Anchors first, first+stride, ... with anchor - h >= 0 and anchor + f <= n - 1.
inline std::vector<std::size_t> window_anchors(std::size_t n, std::size_t h, std::size_t f,
                                               std::size_t stride, std::size_t first) {
  std::vector<std::size_t> out;
  for (std::size_t a = first; a + f < n; a += stride) {
    if (a >= h) out.push_back(a);
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  long double acc = 0.0L;
  for (double x : v) acc += x;
  return static_cast<double>(acc / static_cast<long double>(v.size()));
}

inline double r2(const std::vector<double>& y, const std::vector<double>& yhat) {
  const double m = mean(y);
  long double res = 0.0L, tot = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    tot += (y[i] - m) * (y[i] - m);
  }
  return static_cast<double>(1.0L - res / tot);
}

inline double mse(const std::vector<double>& y, const std::vector<double>& yhat) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) acc += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return static_cast<double>(acc / static_cast<long double>(y.size()));
}

// Pearson correlation via the raw-moment formula (a different route from
// the centred two-pass form).
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  const long double cov = sxy - sx * sy / n;
  const long double vx = sxx - sx * sx / n;
  const long double vy = syy - sy * sy / n;
  return static_cast<double>(cov / std::sqrt(vx * vy));
}

inline double kde_at(const std::vector<double>& values, double x, double h) {
  long double acc = 0.0L;
  for (double v : values) {
    const long double z = (x - v) / h;
    acc += std::exp(-0.5L * z * z) / (h * std::sqrt(2.0L * std::numbers::pi_v<long double>));
  }
  return static_cast<double>(acc / static_cast<long double>(values.size()));
}

inline std::vector<double> random_vector(std::mt19937_64& gen, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(gen);
  return v;
}

inline double rel_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / denom;
}

}  // namespace oracle
