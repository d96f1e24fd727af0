#pragma once

#include <cstddef>
#include <iosfwd>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcast/models.hpp"
#include "fedcast/preprocess.hpp"

namespace fedcast {

class StreamError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StreamConfig {
  std::vector<double> ladder_kbps = {300, 500, 1000, 2000, 3000, 6000};
  double segment_len = 1.0;
  std::size_t chunks_per_segment = 5;
  double playback_threshold = 2.0;  // startup buffer and post-skip latency target
  double max_latency = 5.0;
  std::size_t join_prefetch_max = 3;   // segments a joining client may request
  std::size_t join_lead_segments = 2;  // encoded backlog when the client joins
  std::size_t start_after = 2;         // segments downloaded before playback
  double rtt_overhead = 0.08;          // seconds per chunk request
  std::size_t mpc_horizon = 5;         // chunks
  double session_len = 110.0;

  double chunk_len() const { return segment_len / static_cast<double>(chunks_per_segment); }
  void validate() const;
};

struct QoECoefficients {
  double mu1 = 0.2;  // quality
  double mu2 = 6.0;  // stall
  double mu3 = 1.0;  // switch
  double mu4 = 0.8;  // latency
  double mu5 = 1.2;  // skip
  double omega = 4.0;
  double r_min_kbps = 300.0;

  void validate() const;
};

/// ln(r / R_min); throws StreamError when r < R_min.
double perceptible_quality(double rate_kbps, double r_min_kbps);
/// 1/(1+e^(omega-l)) - 1/(1+e^omega).
double latency_penalty(double latency, double omega);

/// Throughput forecaster used by the bitrate controller.
class Predictor {
 public:
  virtual ~Predictor() = default;
  /// Mbps for seconds now, now+1, ..., now+horizon-1 where now is
  /// observed.size(); `observed` holds the throughput of seconds [0, now).
  virtual std::vector<double> predict(std::span<const double> observed,
                                      std::size_t horizon) = 0;
  virtual std::string name() const = 0;
};

class HarmonicMeanPredictor : public Predictor {
 public:
  explicit HarmonicMeanPredictor(std::size_t window = 5, double initial_mbps = 0.3)
      : window_(window), initial_(initial_mbps) {}
  std::vector<double> predict(std::span<const double> observed, std::size_t horizon) override;
  std::string name() const override { return "harmonic"; }

 private:
  std::size_t window_;
  double initial_;
};

class OraclePredictor : public Predictor {
 public:
  explicit OraclePredictor(std::vector<double> trace) : trace_(std::move(trace)) {}
  std::vector<double> predict(std::span<const double> observed, std::size_t horizon) override;
  std::string name() const override { return "oracle"; }

 private:
  std::vector<double> trace_;
};

class ConstantPredictor : public Predictor {
 public:
  explicit ConstantPredictor(double mbps) : value_(mbps) {}
  std::vector<double> predict(std::span<const double> observed, std::size_t horizon) override;
  std::string name() const override { return "constant"; }

 private:
  double value_;
};

/// Forecasts with a trained model. Second s of the session is row
/// `offset + s` of `scaled`; the window for second `now` is anchored at the
/// last observed row. Falls back to the harmonic mean until H+1 rows exist.
class ModelPredictor : public Predictor {
 public:
  ModelPredictor(ModelSpec spec, ParamSet params, ClientTrace scaled, ScalerState scaler,
                 std::vector<std::string> features, std::size_t offset);
  std::vector<double> predict(std::span<const double> observed, std::size_t horizon) override;
  std::string name() const override { return "model"; }

 private:
  ModelSpec spec_;
  ParamSet params_;
  ClientTrace scaled_;
  ScalerState scaler_;
  std::vector<std::string> features_;
  std::size_t offset_;
  HarmonicMeanPredictor fallback_;
  std::map<std::size_t, std::vector<double>> cache_;
};

/// Controller view of the session at a decision point.
struct SessionState {
  double time = 0.0;          // wall clock
  double position = 0.0;      // playback position (media seconds)
  double downloaded_end = 0.0;  // media seconds downloaded contiguously from position
  std::size_t next_chunk = 0;
  bool started = false;
  std::size_t startup_chunks = 0;  // chunks downloaded toward startup
  double lead = 2.0;               // encoder frontier minus wall clock

  double buffer() const { return started ? downloaded_end - position : 0.0; }
  double latency() const { return time + lead - position; }
};

/// Exhaustive MPC over mpc_horizon chunks; returns a ladder index. Each
/// candidate sequence is scored with its last rung held for a further
/// mpc_horizon chunks. Before playback starts it returns the lowest rung.
/// `predicted[i]` is the throughput (Mbps) of second floor(state.time) + i,
/// the last value holding beyond the end.
std::size_t mpc_select_bitrate(const SessionState& state, std::span<const double> predicted,
                               const StreamConfig& cfg, const QoECoefficients& coeffs,
                               std::size_t prev_rung);

struct SegmentRecord {
  std::size_t segment = 0;
  std::vector<double> chunk_rates_kbps;
  double stall = 0.0;
  double latency = 0.0;  // at the completion of its last downloaded chunk
  double skip = 0.0;

  double rate_kbps() const;
};

struct QoEBreakdown {
  double quality = 0.0;
  double stall = 0.0;
  double switches = 0.0;
  double latency = 0.0;
  double skip = 0.0;
  double qoe = 0.0;
  std::size_t segments = 0;
  double normalized = 0.0;  // qoe / segments
};

QoEBreakdown compute_qoe(std::span<const SegmentRecord> records, const QoECoefficients& coeffs);

struct StreamEvent {
  double time = 0.0;
  std::string kind;
  std::size_t chunk = 0;
  double rate_kbps = 0.0;
  double buffer = 0.0;
  double latency = 0.0;
};

struct SessionResult {
  QoEBreakdown qoe;
  std::vector<SegmentRecord> segments;
  std::vector<StreamEvent> events;
  double startup_time = 0.0;
  double played = 0.0;
  double stall = 0.0;
  double skipped = 0.0;
  double elapsed = 0.0;  // session_len
};

/// `trace` is throughput in Mbps at 1 Hz; rate at time t is trace[floor(t)].
SessionResult simulate_session(std::span<const double> trace, Predictor& predictor,
                               const StreamConfig& cfg, const QoECoefficients& coeffs);

/// Wall time at which `megabits` finish downloading when the transfer
/// starts at `start`; +inf when the trace runs dry first.
double download_finish(std::span<const double> trace, double start, double megabits);

void write_event_log(std::ostream& out, std::span<const StreamEvent> events);

}  // namespace fedcast
