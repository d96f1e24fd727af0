#include "fedcast/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "fedcast/format.hpp"

namespace fedcast {
namespace {

void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min_len) {
  if (a.size() != b.size()) throw AnalysisError("series lengths differ");
  if (a.size() < min_len) {
    throw AnalysisError("need at least " + std::to_string(min_len) + " points");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw AnalysisError("non-finite value");
  }
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double r2_score(std::span<const double> truth, std::span<const double> predicted) {
  check_pair(truth, predicted, 2);
  const double m = mean_of(truth);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
    ss_tot += (truth[i] - m) * (truth[i] - m);
  }
  if (ss_tot == 0.0) throw AnalysisError("r2_score: ground truth is constant");
  return 1.0 - ss_res / ss_tot;
}

double mse(std::span<const double> truth, std::span<const double> predicted) {
  check_pair(truth, predicted, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    acc += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
  }
  return acc / static_cast<double>(truth.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 2);
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw AnalysisError("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double horizon_correlation(const ClientTrace& trace, const std::string& feature,
                           std::size_t horizon) {
  if (trace.size() <= horizon + 2) {
    throw AnalysisError("horizon_correlation: trace too short for horizon " +
                        std::to_string(horizon));
  }
  const std::size_t n = trace.size() - horizon;
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = field_value(trace.records[i], feature);
    y[i] = trace.records[i + horizon].throughput;
  }
  return pearson(x, y);
}

CorrelationTable correlation_table(const ClientTrace& trace,
                                   const std::vector<std::string>& features,
                                   const std::vector<std::size_t>& horizons) {
  CorrelationTable t{features, horizons, {}};
  for (const auto& f : features) {
    std::vector<double> row;
    for (std::size_t h : horizons) {
      try {
        row.push_back(horizon_correlation(trace, f, h));
      } catch (const AnalysisError&) {
        row.push_back(std::nan(""));
      }
    }
    t.rho.push_back(std::move(row));
  }
  return t;
}

void CorrelationTable::write_csv(std::ostream& out) const {
  out << "feature";
  for (std::size_t h : horizons) out << ",F=" << h;
  out << '\n';
  for (std::size_t i = 0; i < features.size(); ++i) {
    out << features[i];
    for (double r : rho[i]) out << ',' << format_number(r);
    out << '\n';
  }
}

std::vector<double> gaussian_kde(std::span<const double> values, std::span<const double> grid,
                                 double bandwidth) {
  if (values.empty()) throw AnalysisError("gaussian_kde: no values");
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw AnalysisError("gaussian_kde: bandwidth must be positive");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw AnalysisError("gaussian_kde: non-finite value");
  }
  const double norm = 1.0 / (static_cast<double>(values.size()) * bandwidth *
                             std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out;
  out.reserve(grid.size());
  for (double x : grid) {
    if (!std::isfinite(x)) throw AnalysisError("gaussian_kde: non-finite grid point");
    double acc = 0.0;
    for (double v : values) {
      const double z = (x - v) / bandwidth;
      acc += std::exp(-0.5 * z * z);
    }
    out.push_back(norm * acc);
  }
  return out;
}

std::vector<double> linspace(double lo, double hi, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = count == 1 ? lo
                        : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  return out;
}

std::vector<double> minmax_normalize(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo, b = *hi;
  for (double& v : out) v = b > a ? (v - a) / (b - a) : 0.0;
  return out;
}

}  // namespace fedcast
