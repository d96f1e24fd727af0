#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcast/tensor.hpp"
#include "fedcast/trace.hpp"

namespace fedcast {

enum class ScalerKind { kMinMax, kStandard };
enum class ScalingScope { kPerClient, kPerDataset };

struct PreprocessConfig {
  std::size_t filter_window = 3;  // seconds at 1 Hz
  ScalerKind scaler_kind = ScalerKind::kMinMax;
  ScalingScope scaling_scope = ScalingScope::kPerClient;
  /// Network features fed to the models, besides the throughput history.
  std::vector<std::string> features = {"rsrp", "sinr", "speed"};
};

struct WindowConfig {
  std::size_t history = 15;     // H
  std::size_t horizon = 1;      // F
  std::size_t eval_stride = 0;  // 0 means F
  std::size_t train_stride = 1;

  std::size_t effective_eval_stride() const {
    return eval_stride == 0 ? horizon : eval_stride;
  }
};

struct WindowSample {
  Tensor features;                  // |features| x (H+1); column j is time n-H+j
  std::vector<double> thpt_history;  // tau(n-H .. n)
  std::vector<double> target;        // tau(n+1 .. n+F)
  std::size_t anchor = 0;            // n
};

struct ScalerState {
  struct Column {
    std::string field;
    double a = 0.0;  // min (minmax) or mean (standard)
    double b = 1.0;  // max (minmax) or stddev (standard)
    bool constant = false;
  };
  ScalerKind kind = ScalerKind::kMinMax;
  std::vector<Column> columns;

  const Column& column(const std::string& field) const;
  double transform(const std::string& field, double v) const;
  double inverse(const std::string& field, double v) const;
};

class PreprocessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trailing mean over the last W samples (shorter windows at the head).
std::vector<double> moving_average(std::span<const double> series, std::size_t window);

/// Applies moving_average to every continuous field; radio type passes through.
ClientTrace filter_trace(const ClientTrace& trace, std::size_t window);

/// Fits one column per field over the union of the given traces.
ScalerState fit_scaler(std::span<const ClientTrace> traces, ScalerKind kind,
                       const std::vector<std::string>& fields);
ScalerState fit_scaler(std::span<const ClientTrace> traces, const PreprocessConfig& cfg);
ClientTrace apply_scaler(const ClientTrace& trace, const ScalerState& scaler);

/// Windows with anchors first_anchor, first_anchor + stride, ... (default
/// first anchor H). Every sample reads only indices [n-H, n+F].
std::vector<WindowSample> build_windows(const ClientTrace& trace, const WindowConfig& wc,
                                        const std::vector<std::string>& features,
                                        std::size_t stride,
                                        std::optional<std::size_t> first_anchor = {});
std::vector<WindowSample> build_windows(const ClientTrace& trace, const WindowConfig& wc,
                                        const std::vector<std::string>& features);

struct TrainTestSplit {
  std::vector<WindowSample> train;
  std::vector<WindowSample> test;
};

/// Chronological: the first floor(ratio * N) samples train, the rest test.
TrainTestSplit split_train_test(std::vector<WindowSample> samples, double ratio);

void dump_windows(std::ostream& out, std::span<const WindowSample> samples);

/// One client's data after filtering, scaling and windowing.
struct PreparedClient {
  ClientTrace filtered;  // unscaled, filtered
  ClientTrace scaled;
  ScalerState scaler;
  std::vector<WindowSample> train;  // train_stride
  std::vector<WindowSample> test;   // eval stride, targets disjoint from train
  std::size_t fit_rows = 0;         // rows [0, fit_rows) fitted the scaler
};

/// Filters, windows and splits each trace. Scalers are fitted on training
/// rows only, per client or pooled per dataset_tag depending on scope.
std::vector<PreparedClient> prepare_clients(std::span<const ClientTrace> traces,
                                            const PreprocessConfig& pcfg,
                                            const WindowConfig& wc,
                                            double train_ratio = 0.8);

}  // namespace fedcast
