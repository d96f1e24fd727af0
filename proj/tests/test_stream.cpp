#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "fedcast/stream.hpp"
#include "oracles.hpp"

using namespace fedcast;

namespace {

// Piecewise-constant throughput with random levels and step lengths.
std::vector<double> step_trace(std::mt19937_64& gen, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> level(lo, hi);
  std::uniform_int_distribution<int> len(3, 20);
  std::vector<double> out;
  while (out.size() < n) {
    const double v = level(gen);
    for (int i = len(gen); i > 0 && out.size() < n; --i) out.push_back(v);
  }
  return out;
}

// Independent evaluation of the session score from segment records.
double qoe_oracle(const std::vector<SegmentRecord>& recs, const QoECoefficients& c) {
  double total = 0.0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const double r = oracle::mean(recs[i].chunk_rates_kbps);
    const double q = std::log(r / c.r_min_kbps);
    double sw = 0.0;
    if (i + 1 < recs.size()) {
      sw = std::abs(std::log(oracle::mean(recs[i + 1].chunk_rates_kbps) / c.r_min_kbps) - q);
    }
    const double psi = 1.0 / (1.0 + std::exp(c.omega - recs[i].latency)) - 1.0 / (1.0 + std::exp(c.omega));
    total += c.mu1 * q - c.mu2 * recs[i].stall - c.mu3 * sw - c.mu4 * psi - c.mu5 * recs[i].skip;
  }
  return total;
}

void check_session_identities(const SessionResult& r, const StreamConfig& cfg, const QoECoefficients& c) {
  const auto& q = r.qoe;
  CHECK(std::abs(q.qoe - (c.mu1 * q.quality - c.mu2 * q.stall - c.mu3 * q.switches - c.mu4 * q.latency -
                          c.mu5 * q.skip)) < 1e-9);
  CHECK(std::abs(q.qoe - qoe_oracle(r.segments, c)) < 1e-9 * std::max(1.0, std::abs(q.qoe)));
  CHECK(q.segments == r.segments.size());
  if (q.segments > 0) CHECK(q.normalized == doctest::Approx(q.qoe / q.segments).epsilon(1e-12));
  // Wall clock after startup is either playing or stalled.
  CHECK(std::abs(r.played + r.stall - (cfg.session_len - r.startup_time)) < 1e-9);
  double seg_stall = 0.0, seg_skip = 0.0;
  for (const auto& s : r.segments) {
    seg_stall += s.stall;
    seg_skip += s.skip;
    CHECK(s.chunk_rates_kbps.size() <= cfg.chunks_per_segment);
    for (double rate : s.chunk_rates_kbps) {
      CHECK(std::find(cfg.ladder_kbps.begin(), cfg.ladder_kbps.end(), rate) != cfg.ladder_kbps.end());
    }
    CHECK(s.latency >= 0.0);
  }
  CHECK(seg_stall == doctest::Approx(r.stall).epsilon(1e-9));
  CHECK(seg_skip == doctest::Approx(r.skipped).epsilon(1e-9));
  CHECK(r.played >= 0.0);
  CHECK(r.stall >= -1e-12);
  // Skipped media is whole chunks.
  const double chunks = r.skipped / cfg.chunk_len();
  CHECK(std::abs(chunks - std::round(chunks)) < 1e-6);
  for (std::size_t i = 1; i < r.events.size(); ++i) CHECK(r.events[i].time >= r.events[i - 1].time);
}

}  // namespace

TEST_CASE("perceptible quality is ln(r / R_min)") {
  CHECK(perceptible_quality(300, 300) == 0.0);
  CHECK(perceptible_quality(600, 300) == doctest::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(perceptible_quality(6000, 300) == doctest::Approx(std::log(20.0)).epsilon(1e-14));
  CHECK_THROWS_AS(perceptible_quality(299.9, 300), StreamError);
  double prev = -1.0;
  for (double r = 300; r < 10000; r += 37) {
    const double q = perceptible_quality(r, 300);
    CHECK(q > prev);
    prev = q;
  }
}

TEST_CASE("latency penalty is a shifted logistic") {
  for (double omega : {0.5, 4.0, 9.0}) {
    CHECK(latency_penalty(0.0, omega) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(latency_penalty(omega, omega) == doctest::Approx(0.5 - 1.0 / (1.0 + std::exp(omega))).epsilon(1e-14));
    CHECK(latency_penalty(1e6, omega) == doctest::Approx(1.0 - 1.0 / (1.0 + std::exp(omega))).epsilon(1e-14));
    double prev = -1.0;
    for (double l = 0.0; l < 30.0; l += 0.25) {
      const double v = latency_penalty(l, omega);
      CHECK(v > prev);
      CHECK(v < 1.0 - 1.0 / (1.0 + std::exp(omega)) + 1e-15);
      prev = v;
    }
  }
  CHECK_THROWS_AS(latency_penalty(-0.1, 4.0), StreamError);
}

TEST_CASE("session score on hand-built records") {
  QoECoefficients c;
  SegmentRecord base;
  base.chunk_rates_kbps = std::vector<double>(5, 300.0);
  CHECK(compute_qoe(std::vector{base}, c).qoe == 0.0);

  SegmentRecord one = base;
  one.chunk_rates_kbps = std::vector<double>(5, 1200.0);
  CHECK(compute_qoe(std::vector{one}, c).qoe == doctest::Approx(0.2 * std::log(4.0)).epsilon(1e-14));

  // Three segments at 600, 600, 1200 kbps; 0.5 s stall in the second;
  // latency 3 s on the last; 0.4 s skipped on the last.
  std::vector<SegmentRecord> recs(3, base);
  recs[0].chunk_rates_kbps = std::vector<double>(5, 600.0);
  recs[1].chunk_rates_kbps = std::vector<double>(5, 600.0);
  recs[1].stall = 0.5;
  recs[2].chunk_rates_kbps = std::vector<double>(5, 1200.0);
  recs[2].latency = 3.0;
  recs[2].skip = 0.4;
  const double ln2 = std::log(2.0), ln4 = std::log(4.0);
  const double psi3 = 1.0 / (1.0 + std::exp(1.0)) - 1.0 / (1.0 + std::exp(4.0));
  const double hand = 0.2 * (ln2 + ln2 + ln4) - 6.0 * 0.5 - 1.0 * ln2 - 0.8 * psi3 - 1.2 * 0.4;
  const auto q = compute_qoe(recs, c);
  CHECK(q.qoe == doctest::Approx(hand).epsilon(1e-13));
  CHECK(q.switches == doctest::Approx(ln2).epsilon(1e-14));
  CHECK(q.stall == 0.5);
  CHECK(q.skip == doctest::Approx(0.4));
  CHECK(q.normalized == doctest::Approx(hand / 3.0).epsilon(1e-13));

  SegmentRecord mixed = base;
  mixed.chunk_rates_kbps = {300, 500, 1000, 2000, 3000};
  CHECK(mixed.rate_kbps() == doctest::Approx(1360.0));
  CHECK_THROWS_AS(compute_qoe({}, c), StreamError);
}

TEST_CASE("download completion walks the per-second trace") {
  const std::vector<double> tr = {2.0, 4.0, 0.0, 1.0};
  CHECK(download_finish(tr, 0.0, 1.0) == doctest::Approx(0.5));
  CHECK(download_finish(tr, 0.5, 3.0) == doctest::Approx(1.5));   // 1 Mb in [0.5,1), 2 Mb at 4 Mbps
  CHECK(download_finish(tr, 0.5, 6.0) == doctest::Approx(4.0));   // the zero second passes idle
  CHECK(download_finish(tr, 1.9, 0.0) == doctest::Approx(1.9));
  CHECK(std::isinf(download_finish(tr, 3.0, 1.5)));
  CHECK(std::isinf(download_finish(tr, 10.0, 0.1)));
}

TEST_CASE("predictors") {
  HarmonicMeanPredictor h(3, 0.3);
  CHECK(h.predict({}, 2) == std::vector<double>{0.3, 0.3});
  const std::vector<double> obs = {100.0, 1.0, 2.0, 4.0};
  const double hm = 3.0 / (1.0 / 1.0 + 1.0 / 2.0 + 1.0 / 4.0);
  for (double v : h.predict(obs, 4)) CHECK(v == doctest::Approx(hm));
  const std::vector<double> dead = {1.0, 0.0, 2.0};
  CHECK(h.predict(dead, 1)[0] == 0.0);

  OraclePredictor o({5.0, 6.0, 7.0});
  const std::vector<double> two = {1.0, 1.0};
  CHECK(o.predict(two, 3) == std::vector<double>{7.0, 0.0, 0.0});
  ConstantPredictor k(2.5);
  CHECK(k.predict(two, 2) == std::vector<double>{2.5, 2.5});
}

TEST_CASE("mpc on a one-chunk horizon matches hand arithmetic") {
  StreamConfig cfg;
  cfg.mpc_horizon = 1;
  QoECoefficients c;
  SessionState s;
  // One second behind the live edge, so the next chunk is already encoded
  // and latency stays at 3 s unless playback stalls.
  s.time = 10.0;
  s.position = 9.0;
  s.downloaded_end = 11.0;
  s.started = true;
  s.lead = 2.0;
  s.next_chunk = 55;
  const std::vector<double> five(3, 5.0);
  // Staying costs nothing. A step away earns quality for the chunk and its
  // one-chunk tail, 2 * mu1 / 5 per unit of Q, but costs mu3 / 5 per unit
  // in switches; 6000 kbps would also drain the buffer.
  CHECK(mpc_select_bitrate(s, five, cfg, c, 2) == 2);
  CHECK(mpc_select_bitrate(s, five, cfg, c, 4) == 4);
  const std::vector<double> huge(3, 1e4);
  CHECK(mpc_select_bitrate(s, huge, cfg, c, 0) == 0);
  CHECK(mpc_select_bitrate(s, huge, cfg, c, 5) == 5);
  // 6000 kbps at 5 Mbps: 0.08 + 0.24 s for 0.2 s of media.
  const std::vector<double> tiny(3, 0.05);
  CHECK(mpc_select_bitrate(s, tiny, cfg, c, 5) == 0);
}

TEST_CASE("mpc goes to the ends of the ladder when capacity is extreme") {
  // Choices in between need not be monotone in the prediction: a greedy
  // first chunk is free whenever the held tail refills the buffer to the
  // live edge.
  StreamConfig cfg;
  QoECoefficients c;
  SessionState s;
  s.time = 20.0;
  s.position = 20.0;
  s.downloaded_end = 21.6;
  s.next_chunk = 108;
  s.started = true;
  s.lead = 2.0;
  for (std::size_t prev = 0; prev < cfg.ladder_kbps.size(); ++prev) {
    CAPTURE(prev);
    for (double mbps : {0.01, 0.05, 0.1}) {
      CHECK(mpc_select_bitrate(s, std::vector<double>(4, mbps), cfg, c, prev) == 0);
    }
    for (double mbps : {20.0, 100.0, 1e4}) {
      CHECK(mpc_select_bitrate(s, std::vector<double>(4, mbps), cfg, c, prev) == cfg.ladder_kbps.size() - 1);
    }
  }
  SessionState joining = s;
  joining.started = false;
  joining.position = 0.0;
  CHECK(mpc_select_bitrate(joining, std::vector<double>(4, 1e4), cfg, c, 3) == 0);
}

TEST_CASE("capacity matching a rung exactly never draws a higher rung after startup") {
  QoECoefficients c;
  for (double rtt : {0.0, 0.08}) {
    StreamConfig cfg;
    cfg.rtt_overhead = rtt;
    for (std::size_t j = 0; j < cfg.ladder_kbps.size(); ++j) {
      CAPTURE(rtt);
      CAPTURE(j);
      const std::vector<double> tr(130, cfg.ladder_kbps[j] / 1000.0);
      OraclePredictor p(tr);
      const auto r = simulate_session(tr, p, cfg, c);
      check_session_identities(r, cfg, c);
      for (const auto& e : r.events) {
        if (e.kind == "rate_select" && e.time >= r.startup_time) CHECK(e.rate_kbps <= cfg.ladder_kbps[j]);
      }
    }
  }
}

TEST_CASE("infinite capacity: no stall and the top rung") {
  StreamConfig cfg;
  QoECoefficients c;
  const std::vector<double> tr(130, 1e6);
  OraclePredictor p(tr);
  const auto r = simulate_session(tr, p, cfg, c);
  check_session_identities(r, cfg, c);
  CHECK(r.stall == 0.0);
  CHECK(r.skipped == 0.0);
  REQUIRE(r.segments.size() > 10);
  for (std::size_t i = r.segments.size() / 2; i < r.segments.size(); ++i) {
    CHECK(r.segments[i].rate_kbps() == cfg.ladder_kbps.back());
  }
}

TEST_CASE("without round trips infinite capacity holds latency at the playback threshold") {
  StreamConfig cfg;
  cfg.rtt_overhead = 0.0;
  QoECoefficients c;
  const std::vector<double> tr(130, 1e6);
  OraclePredictor p(tr);
  const auto r = simulate_session(tr, p, cfg, c);
  check_session_identities(r, cfg, c);
  CHECK(r.stall == 0.0);
  for (const auto& s : r.segments) CHECK(s.latency <= cfg.playback_threshold + 1e-6);
  CHECK(r.segments.back().rate_kbps() == cfg.ladder_kbps.back());
}

TEST_CASE("zero-capacity tail accrues the hand-computed stall") {
  // The encoder leads by two segments, so chunks 0..9 exist at t = 0 and
  // chunk k appears at (k - 9) * 0.2 s. Capacity is effectively unlimited
  // for t < 10 and zero afterwards, so chunks 0..58 arrive, playback (from
  // t ~ 0) drains 11.8 s of media at t = 11.8 and stalls until t = 20.
  // Latency climbs from 2 s and hits the 5 s cap at 14.8 and 17.8; each
  // skip jumps 3 s to restore the 2 s target.
  StreamConfig cfg;
  cfg.rtt_overhead = 0.0;
  cfg.session_len = 20.0;
  QoECoefficients c;
  std::vector<double> tr(20, 1e6);
  std::fill(tr.begin() + 10, tr.end(), 0.0);
  for (int which = 0; which < 2; ++which) {
    OraclePredictor oracle(tr);
    HarmonicMeanPredictor harmonic;
    Predictor& p = which == 0 ? static_cast<Predictor&>(oracle) : harmonic;
    const auto r = simulate_session(tr, p, cfg, c);
    check_session_identities(r, cfg, c);
    CHECK(r.startup_time < 1e-5);
    CHECK(r.stall == doctest::Approx(8.2).epsilon(1e-5));
    CHECK(r.played == doctest::Approx(11.8).epsilon(1e-5));
    CHECK(r.skipped == doctest::Approx(6.0).epsilon(1e-9));
    std::vector<double> skips;
    for (const auto& e : r.events) {
      if (e.kind == "skip") skips.push_back(e.time);
    }
    REQUIRE(skips.size() == 2);
    CHECK(skips[0] == doctest::Approx(14.8).epsilon(1e-5));
    CHECK(skips[1] == doctest::Approx(17.8).epsilon(1e-5));
  }
}

TEST_CASE("session identities hold on random traces for every predictor") {
  std::mt19937_64 gen(77);
  StreamConfig cfg;
  QoECoefficients c;
  for (int trial = 0; trial < 12; ++trial) {
    const auto tr = step_trace(gen, 130, trial % 3 == 0 ? 0.0 : 0.5, 12.0);
    OraclePredictor o(tr);
    HarmonicMeanPredictor h;
    ConstantPredictor k(0.5);
    for (Predictor* p : std::initializer_list<Predictor*>{&o, &h, &k}) {
      CAPTURE(p->name());
      check_session_identities(simulate_session(tr, *p, cfg, c), cfg, c);
    }
  }
}

TEST_CASE("constant capacity caps the sustained rung") {
  StreamConfig cfg;
  QoECoefficients c;
  for (double mbps : {0.8, 1.5, 2.6, 4.0, 9.0}) {
    CAPTURE(mbps);
    const std::vector<double> tr(130, mbps);
    OraclePredictor p(tr);
    const auto r = simulate_session(tr, p, cfg, c);
    check_session_identities(r, cfg, c);
    // A chunk at rate R takes rtt + R * chunk_len / capacity seconds.
    for (std::size_t i = r.segments.size() / 3; i < r.segments.size(); ++i) {
      for (double rate : r.segments[i].chunk_rates_kbps) {
        CHECK(cfg.rtt_overhead + rate / 1000.0 * cfg.chunk_len() / mbps <= cfg.chunk_len() + 1e-12);
      }
    }
    double late_stall = 0.0;
    for (std::size_t i = r.segments.size() / 3; i < r.segments.size(); ++i) late_stall += r.segments[i].stall;
    CHECK(late_stall == 0.0);
  }
}

TEST_CASE("sessions are deterministic and the event log is well formed") {
  std::mt19937_64 gen(5);
  const auto tr = step_trace(gen, 120, 0.3, 8.0);
  StreamConfig cfg;
  QoECoefficients c;
  HarmonicMeanPredictor h1, h2;
  const auto a = simulate_session(tr, h1, cfg, c);
  const auto b = simulate_session(tr, h2, cfg, c);
  std::ostringstream la, lb;
  write_event_log(la, a.events);
  write_event_log(lb, b.events);
  CHECK(la.str() == lb.str());
  CHECK(la.str().rfind("time,event,chunk,rate,buffer,latency\n", 0) == 0);
  bool saw_start = false;
  for (const auto& e : a.events) saw_start |= e.kind == "play_start";
  CHECK(saw_start);
}

TEST_CASE("configuration validation") {
  StreamConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto bad = [](auto mutate) {
    StreamConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), StreamError);
  };
  bad([](StreamConfig& c) { c.ladder_kbps.clear(); });
  bad([](StreamConfig& c) { c.ladder_kbps = {500, 300}; });
  bad([](StreamConfig& c) { c.join_lead_segments = 4; });
  bad([](StreamConfig& c) { c.join_lead_segments = 1; });
  bad([](StreamConfig& c) { c.mpc_horizon = 9; });
  bad([](StreamConfig& c) { c.max_latency = 2.0; });
  bad([](StreamConfig& c) { c.chunks_per_segment = 0; });
  QoECoefficients q;
  q.mu3 = -1.0;
  CHECK_THROWS_AS(q.validate(), StreamError);
}
