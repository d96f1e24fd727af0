#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcast/trace.hpp"

namespace fedcast {

class AnalysisError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Coefficient of determination 1 - SS_res / SS_tot.
double r2_score(std::span<const double> truth, std::span<const double> predicted);
double mse(std::span<const double> truth, std::span<const double> predicted);
double pearson(std::span<const double> x, std::span<const double> y);

/// Pearson correlation of feature[n] with throughput[n + horizon].
double horizon_correlation(const ClientTrace& trace, const std::string& feature,
                           std::size_t horizon);

struct CorrelationTable {
  std::vector<std::string> features;
  std::vector<std::size_t> horizons;
  std::vector<std::vector<double>> rho;  // [feature][horizon]

  void write_csv(std::ostream& out) const;
};

CorrelationTable correlation_table(const ClientTrace& trace,
                                   const std::vector<std::string>& features,
                                   const std::vector<std::size_t>& horizons);

/// Gaussian kernel density estimate evaluated on `grid`.
std::vector<double> gaussian_kde(std::span<const double> values, std::span<const double> grid,
                                 double bandwidth = 1.0);

/// Evenly spaced points from lo to hi inclusive.
std::vector<double> linspace(double lo, double hi, std::size_t count);
/// Min-max normalization to [0, 1]; constant input maps to zeros.
std::vector<double> minmax_normalize(std::span<const double> values);

}  // namespace fedcast
