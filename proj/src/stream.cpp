#include "fedcast/stream.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "fedcast/format.hpp"

namespace fedcast {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = 1e-9;
constexpr double kMinPredictedMbps = 1e-6;

// Integrates a piecewise-constant rate from `start` until `megabits` are
// through. rate(sec) < 0 signals the end of the series.
template <class RateFn>
double integrate_finish(RateFn rate, double start, double megabits) {
  if (megabits <= 0.0) return start;
  double t = start;
  double remaining = megabits;
  while (true) {
    const double sec = std::floor(t);
    const double r = rate(sec);
    if (r < 0.0) return kInf;
    const double boundary = sec + 1.0;
    const double cap = r * (boundary - t);
    if (cap >= remaining) return t + remaining / r;
    remaining -= cap;
    t = boundary;
  }
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

void StreamConfig::validate() const {
  if (ladder_kbps.empty()) throw StreamError("ladder is empty");
  for (std::size_t i = 0; i < ladder_kbps.size(); ++i) {
    if (!(ladder_kbps[i] > 0.0)) throw StreamError("ladder rates must be positive");
    if (i > 0 && !(ladder_kbps[i] > ladder_kbps[i - 1])) {
      throw StreamError("ladder must be strictly increasing");
    }
  }
  if (!(segment_len > 0.0)) throw StreamError("segment_len must be positive");
  if (chunks_per_segment == 0) throw StreamError("chunks_per_segment must be >= 1");
  if (!(playback_threshold >= chunk_len())) {
    throw StreamError("playback_threshold must be at least one chunk");
  }
  if (!(max_latency > playback_threshold)) {
    throw StreamError("max_latency must exceed playback_threshold");
  }
  if (start_after == 0) throw StreamError("start_after must be >= 1");
  if (join_lead_segments < start_after || join_lead_segments > join_prefetch_max) {
    throw StreamError("join_lead_segments must lie in [start_after, join_prefetch_max]");
  }
  if (!(rtt_overhead >= 0.0)) throw StreamError("rtt_overhead must be >= 0");
  if (mpc_horizon == 0 || mpc_horizon > 8) throw StreamError("mpc_horizon must lie in [1, 8]");
  if (!(session_len > 0.0)) throw StreamError("session_len must be positive");
}

void QoECoefficients::validate() const {
  for (double m : {mu1, mu2, mu3, mu4, mu5}) {
    if (!(m >= 0.0)) throw StreamError("QoE coefficients must be >= 0");
  }
  if (!(r_min_kbps > 0.0)) throw StreamError("R_min must be positive");
  if (!std::isfinite(omega)) throw StreamError("omega must be finite");
}

double perceptible_quality(double rate_kbps, double r_min_kbps) {
  if (!(r_min_kbps > 0.0)) throw StreamError("R_min must be positive");
  if (!(rate_kbps >= r_min_kbps)) throw StreamError("rate below R_min");
  return std::log(rate_kbps / r_min_kbps);
}

double latency_penalty(double latency, double omega) {
  if (!(latency >= 0.0)) throw StreamError("latency must be >= 0");
  return 1.0 / (1.0 + std::exp(omega - latency)) - 1.0 / (1.0 + std::exp(omega));
}

std::vector<double> HarmonicMeanPredictor::predict(std::span<const double> observed,
                                                   std::size_t horizon) {
  double value = initial_;
  if (!observed.empty()) {
    const std::size_t n = std::min(window_, observed.size());
    double inv = 0.0;
    bool zero = false;
    for (std::size_t i = observed.size() - n; i < observed.size(); ++i) {
      if (observed[i] <= 0.0) {
        zero = true;
        break;
      }
      inv += 1.0 / observed[i];
    }
    value = zero ? 0.0 : static_cast<double>(n) / inv;
  }
  return std::vector<double>(horizon, value);
}

std::vector<double> OraclePredictor::predict(std::span<const double> observed,
                                             std::size_t horizon) {
  std::vector<double> out;
  for (std::size_t i = 0; i < horizon; ++i) {
    const std::size_t idx = observed.size() + i;
    out.push_back(idx < trace_.size() ? std::max(0.0, trace_[idx]) : 0.0);
  }
  return out;
}

std::vector<double> ConstantPredictor::predict(std::span<const double>, std::size_t horizon) {
  return std::vector<double>(horizon, std::max(0.0, value_));
}

ModelPredictor::ModelPredictor(ModelSpec spec, ParamSet params, ClientTrace scaled,
                               ScalerState scaler, std::vector<std::string> features,
                               std::size_t offset)
    : spec_(std::move(spec)),
      params_(std::move(params)),
      scaled_(std::move(scaled)),
      scaler_(std::move(scaler)),
      features_(std::move(features)),
      offset_(offset) {
  spec_.validate();
  if (features_.size() != spec_.input_features) {
    throw StreamError("model predictor: feature list does not match the model");
  }
}

std::vector<double> ModelPredictor::predict(std::span<const double> observed,
                                            std::size_t horizon) {
  const std::size_t row = offset_ + observed.size();
  const std::size_t h = spec_.history;
  if (row < h + 1 || row > scaled_.size()) return fallback_.predict(observed, horizon);
  const std::size_t anchor = row - 1;

  auto it = cache_.find(anchor);
  if (it == cache_.end()) {
    WindowSample w;
    w.anchor = anchor;
    w.features = Tensor({features_.size(), h + 1});
    for (std::size_t j = 0; j <= h; ++j) {
      const auto& rec = scaled_.records[anchor - h + j];
      for (std::size_t c = 0; c < features_.size(); ++c) {
        w.features.at(c, j) = field_value(rec, features_[c]);
      }
      w.thpt_history.push_back(rec.throughput);
    }
    w.target.assign(spec_.horizon, 0.0);
    const Tensor out = fedcast::predict(spec_, params_, std::span<const WindowSample>(&w, 1));
    std::vector<double> mbps;
    for (std::size_t k = 0; k < spec_.horizon; ++k) {
      const double v = scaler_.inverse("throughput", out[k]);
      mbps.push_back(std::isfinite(v) ? std::max(0.0, v) : 0.0);
    }
    it = cache_.emplace(anchor, std::move(mbps)).first;
  }
  std::vector<double> res(horizon);
  for (std::size_t i = 0; i < horizon; ++i) {
    res[i] = it->second[std::min(i, it->second.size() - 1)];
  }
  return res;
}

double download_finish(std::span<const double> trace, double start, double megabits) {
  return integrate_finish(
      [&](double sec) {
        if (sec < 0.0 || sec >= static_cast<double>(trace.size())) return -1.0;
        return std::max(0.0, trace[static_cast<std::size_t>(sec)]);
      },
      start, megabits);
}

namespace {

struct MpcSim {
  double time = 0.0;
  double position = 0.0;
  double downloaded_end = 0.0;
  std::size_t next_chunk = 0;
  bool started = false;
  std::size_t startup_chunks = 0;
};

struct MpcSearch {
  const StreamConfig& cfg;
  const QoECoefficients& coeffs;
  std::span<const double> predicted;
  double base_second;
  double lead;
  double start_buffer;
  bool started_at_decision;
  std::vector<double> quality;  // Q per rung

  // Walks the predicted seconds, then finishes at the held last value.
  double chunk_finish(double start, double megabits) const {
    auto rate_at = [&](std::size_t i) { return std::max(kMinPredictedMbps, predicted[i]); };
    const double hold_from = base_second + static_cast<double>(predicted.size() - 1);
    double t = start;
    double remaining = megabits;
    while (t < hold_from) {
      const double sec = std::floor(t);
      const double i = std::max(0.0, sec - base_second);
      const double r = rate_at(static_cast<std::size_t>(i));
      const double cap = r * (sec + 1.0 - t);
      if (cap >= remaining) return t + remaining / r;
      remaining -= cap;
      t = sec + 1.0;
    }
    return t + remaining / rate_at(predicted.size() - 1);
  }

  // Moves the simulated clock to t1; returns stall time.
  static double advance(MpcSim& s, double t1) {
    if (t1 <= s.time) return 0.0;
    const double dt = t1 - s.time;
    s.time = t1;
    if (!s.started) return 0.0;
    const double play = std::min(s.downloaded_end - s.position, dt);
    s.position += play;
    return dt - play;
  }

  double step(MpcSim& s, std::size_t rung, std::size_t prev) const {
    const double d = cfg.chunk_len();
    const auto lead_chunks = static_cast<double>(cfg.join_lead_segments * cfg.chunks_per_segment);
    const double avail = (static_cast<double>(s.next_chunk) + 1.0 - lead_chunks) * d;
    double stall = advance(s, std::max(s.time, avail));
    const double megabits = cfg.ladder_kbps[rung] * d / 1000.0;
    const double done = chunk_finish(s.time + cfg.rtt_overhead, megabits);
    stall += advance(s, done);
    ++s.next_chunk;
    s.downloaded_end = static_cast<double>(s.next_chunk) * d;
    if (!s.started && ++s.startup_chunks >= cfg.start_after * cfg.chunks_per_segment) {
      s.started = true;
    }
    double skip = 0.0;
    double latency = s.time + lead - s.position;
    if (s.started && latency > cfg.max_latency) {
      const double target = std::ceil((s.time + lead - cfg.playback_threshold) / d - kEps) * d;
      skip = target - s.position;
      s.position = target;
      if (target > s.downloaded_end) {
        s.next_chunk = static_cast<std::size_t>(std::llround(target / d));
        s.downloaded_end = target;
      }
      latency = s.time + lead - s.position;
    }
    const auto cps = static_cast<double>(cfg.chunks_per_segment);
    return coeffs.mu1 * quality[rung] / cps -
           coeffs.mu3 * std::abs(quality[rung] - quality[prev]) / cps -
           coeffs.mu2 * stall - coeffs.mu4 * latency_penalty(std::max(0.0, latency), coeffs.omega) / cps -
           coeffs.mu5 * skip;
  }

  void search(const MpcSim& s, std::size_t depth, std::size_t prev, double acc,
              std::size_t first, double& best, std::size_t& best_first) const {
    if (depth == cfg.mpc_horizon) {
      // Tail: the last rung is held for another horizon so that a switch is
      // weighed against the quality it keeps earning after the lookahead.
      MpcSim tail = s;
      for (std::size_t i = 0; i < cfg.mpc_horizon; ++i) acc += step(tail, prev, prev);
      // Buffer drained by the end of the tail is charged as deferred stall.
      if (started_at_decision) {
        acc -= coeffs.mu2 * std::max(0.0, start_buffer - (tail.downloaded_end - tail.position));
      }
      if (acc > best) {
        best = acc;
        best_first = first;
      }
      return;
    }
    for (std::size_t r = 0; r < cfg.ladder_kbps.size(); ++r) {
      MpcSim next = s;
      const double reward = step(next, r, prev);
      search(next, depth + 1, r, acc + reward, depth == 0 ? r : first, best, best_first);
    }
  }
};

}  // namespace

std::size_t mpc_select_bitrate(const SessionState& state, std::span<const double> predicted,
                               const StreamConfig& cfg, const QoECoefficients& coeffs,
                               std::size_t prev_rung) {
  if (cfg.ladder_kbps.empty()) throw StreamError("mpc: empty ladder");
  if (cfg.mpc_horizon == 0) throw StreamError("mpc: horizon must be >= 1");
  if (predicted.empty()) throw StreamError("mpc: empty prediction");
  if (prev_rung >= cfg.ladder_kbps.size()) throw StreamError("mpc: previous rung out of range");
  for (double v : predicted) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw StreamError("mpc: invalid predicted throughput");
  }
  // Startup delay turns into live latency that only a skip can undo, so the
  // startup segments are fetched at the lowest rung.
  if (!state.started) return 0;
  MpcSearch search{cfg,
                   coeffs,
                   predicted,
                   std::floor(state.time),
                   state.lead,
                   state.buffer(),
                   state.started,
                   {}};
  for (double r : cfg.ladder_kbps) search.quality.push_back(std::log(r / coeffs.r_min_kbps));

  MpcSim s{state.time, state.position, state.downloaded_end, state.next_chunk, state.started,
           state.startup_chunks};
  double best = -kInf;
  std::size_t best_first = 0;
  search.search(s, 0, prev_rung, 0.0, 0, best, best_first);
  return best_first;
}

double SegmentRecord::rate_kbps() const {
  if (chunk_rates_kbps.empty()) throw StreamError("segment has no downloaded chunks");
  return mean_of(chunk_rates_kbps);
}

QoEBreakdown compute_qoe(std::span<const SegmentRecord> records, const QoECoefficients& coeffs) {
  coeffs.validate();
  if (records.empty()) throw StreamError("compute_qoe: empty session");
  QoEBreakdown q;
  double prev_quality = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double qi = perceptible_quality(records[i].rate_kbps(), coeffs.r_min_kbps);
    q.quality += qi;
    if (i > 0) q.switches += std::abs(qi - prev_quality);
    prev_quality = qi;
    if (!(records[i].stall >= 0.0) || !(records[i].skip >= 0.0)) {
      throw StreamError("compute_qoe: negative stall or skip");
    }
    q.stall += records[i].stall;
    q.latency += latency_penalty(records[i].latency, coeffs.omega);
    q.skip += records[i].skip;
  }
  q.qoe = coeffs.mu1 * q.quality - coeffs.mu2 * q.stall - coeffs.mu3 * q.switches -
          coeffs.mu4 * q.latency - coeffs.mu5 * q.skip;
  q.segments = records.size();
  q.normalized = q.qoe / static_cast<double>(q.segments);
  return q;
}

SessionResult simulate_session(std::span<const double> trace, Predictor& predictor,
                               const StreamConfig& cfg, const QoECoefficients& coeffs) {
  cfg.validate();
  coeffs.validate();
  if (static_cast<double>(trace.size()) < cfg.session_len) {
    throw StreamError("trace of " + std::to_string(trace.size()) +
                      " s is shorter than the session (" + format_number(cfg.session_len) +
                      " s)");
  }
  for (double v : trace) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw StreamError("trace has invalid throughput");
  }

  const double d = cfg.chunk_len();
  const std::size_t cps = cfg.chunks_per_segment;
  const auto lead_chunks = static_cast<double>(cfg.join_lead_segments * cps);
  const double end = cfg.session_len;
  const std::size_t pred_seconds =
      static_cast<std::size_t>(std::ceil(static_cast<double>(cfg.mpc_horizon) * d)) + 1;

  SessionState s;
  s.lead = static_cast<double>(cfg.join_lead_segments) * cfg.segment_len;
  SessionResult res;
  res.elapsed = end;
  std::map<std::size_t, SegmentRecord> records;
  double pending_stall = 0.0, pending_skip = 0.0;
  bool stalling = false;
  std::size_t prev_rung = 0;

  auto log = [&](const char* kind, std::size_t chunk, double rate) {
    res.events.push_back({s.time, kind, chunk, rate, s.buffer(), s.latency()});
  };
  auto avail = [&](std::size_t k) { return (static_cast<double>(k) + 1.0 - lead_chunks) * d; };

  // Jump playback so the latency drops back to the playback threshold.
  auto skip_to_live = [&]() {
    const double target = std::ceil((s.time + s.lead - cfg.playback_threshold) / d - kEps) * d;
    if (target <= s.position) return;
    const double jumped = target - s.position;
    pending_skip += jumped;
    res.skipped += jumped;
    s.position = target;
    const auto chunk = static_cast<std::size_t>(std::llround(target / d));
    if (chunk > s.next_chunk) {
      s.next_chunk = chunk;
      s.downloaded_end = static_cast<double>(chunk) * d;
    }
    log("skip", s.next_chunk, 0.0);
  };

  // Moves the clock to t1 playing or stalling; true when a skip interrupted it.
  auto advance = [&](double t1) -> bool {
    while (s.time < t1) {
      if (!s.started) {
        s.time = t1;
        return false;
      }
      const double buffered = s.downloaded_end - s.position;
      if (buffered > 0.0) {
        if (buffered >= t1 - s.time) {
          res.played += t1 - s.time;
          s.position += t1 - s.time;
          s.time = t1;
        } else {
          res.played += buffered;
          s.time += buffered;
          s.position = s.downloaded_end;
        }
        continue;
      }
      if (!stalling) {
        stalling = true;
        log("stall_begin", s.next_chunk, 0.0);
      }
      const double to_cap = std::max(0.0, cfg.max_latency - s.latency());
      if (s.time + to_cap < t1) {
        res.stall += to_cap;
        pending_stall += to_cap;
        s.time += to_cap;
        skip_to_live();
        return true;
      }
      res.stall += t1 - s.time;
      pending_stall += t1 - s.time;
      s.time = t1;
    }
    return false;
  };

  while (s.time < end) {
    const std::size_t k = s.next_chunk;
    const double available = avail(k);
    if (s.time < available) {
      if (advance(std::min(available, end))) continue;
      if (s.time >= end) break;
    }

    const auto now = static_cast<std::size_t>(std::floor(s.time));
    auto predicted = predictor.predict(trace.first(std::min(now, trace.size())), pred_seconds);
    if (predicted.empty()) throw StreamError("predictor returned no values");
    for (double& v : predicted) {
      if (!std::isfinite(v)) throw StreamError("predictor returned a non-finite value");
      v = std::max(0.0, v);
    }
    const std::size_t rung = mpc_select_bitrate(s, predicted, cfg, coeffs, prev_rung);
    const double rate = cfg.ladder_kbps[rung];
    log("rate_select", k, rate);
    log("download_start", k, rate);

    const double done = download_finish(trace, s.time + cfg.rtt_overhead, rate * d / 1000.0);
    if (advance(std::min(done, end))) continue;  // the skip abandoned this chunk
    if (done > end) break;

    s.time = done;
    s.next_chunk = k + 1;
    s.downloaded_end = static_cast<double>(s.next_chunk) * d;
    prev_rung = rung;
    SegmentRecord& rec = records[k / cps];
    rec.segment = k / cps;
    rec.chunk_rates_kbps.push_back(rate);
    rec.stall += pending_stall;
    rec.skip += pending_skip;
    pending_stall = pending_skip = 0.0;
    if (stalling) {
      stalling = false;
      log("stall_end", k, rate);
    }
    if (!s.started && ++s.startup_chunks >= cfg.start_after * cps) {
      s.started = true;
      res.startup_time = s.time;
      log("play_start", k, rate);
      if (s.latency() > cfg.max_latency) skip_to_live();
    }
    rec.latency = std::max(0.0, s.latency());
    log("download_done", k, rate);
  }
  if (!s.started) res.startup_time = end;
  if (records.empty()) throw StreamError("no chunk finished downloading during the session");

  for (auto& [idx, rec] : records) res.segments.push_back(rec);
  res.segments.back().stall += pending_stall;
  res.segments.back().skip += pending_skip;
  res.qoe = compute_qoe(res.segments, coeffs);
  return res;
}

void write_event_log(std::ostream& out, std::span<const StreamEvent> events) {
  out << "time,event,chunk,rate,buffer,latency\n";
  for (const auto& e : events) {
    out << format_number(e.time) << ',' << e.kind << ',' << e.chunk << ','
        << format_number(e.rate_kbps) << ',' << format_number(e.buffer) << ','
        << format_number(e.latency) << '\n';
  }
}

}  // namespace fedcast
