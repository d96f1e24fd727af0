#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "fedcast/preprocess.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fedcast;

namespace {

ClientTrace series_trace(const std::vector<double>& tput) {
  ClientTrace t;
  t.client_id = "s";
  for (std::size_t i = 0; i < tput.size(); ++i) {
    TraceRecord r;
    r.timestamp = static_cast<double>(i);
    r.throughput = tput[i];
    r.rsrp = -100.0 + 0.5 * tput[i];
    r.sinr = static_cast<double>(i % 11);
    r.speed = 2.0 * static_cast<double>(i);
    t.records.push_back(r);
  }
  return t;
}

std::vector<std::size_t> anchors_of(const std::vector<WindowSample>& s) {
  std::vector<std::size_t> out;
  for (const auto& w : s) out.push_back(w.anchor);
  return out;
}

}  // namespace

TEST_CASE("moving average on hand examples") {
  CHECK(moving_average(std::vector<double>{5, 5, 5, 5}, 3) == std::vector<double>{5, 5, 5, 5});
  const auto r = moving_average(std::vector<double>{1, 2, 3}, 3);
  CHECK(r[0] == 1.0);
  CHECK(r[1] == 1.5);
  CHECK(r[2] == 2.0);
  CHECK(moving_average(std::vector<double>{4, 8}, 1) == std::vector<double>{4, 8});
  CHECK_THROWS(moving_average(std::vector<double>{1}, 0));
  CHECK_THROWS(moving_average(std::vector<double>{}, 3));
}

TEST_CASE("moving average matches the per-index mean and commutes with scaling") {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + gen() % 80, w = 1 + gen() % 9;
    const auto x = oracle::random_vector(gen, n, -50, 50);
    const auto got = moving_average(x, w);
    const auto expect = oracle::trailing_mean(x, w);
    REQUIRE(got.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    std::vector<double> cx = x;
    for (double& v : cx) v *= 3.5;
    const auto scaled = moving_average(cx, w);
    for (std::size_t i = 0; i < n; ++i) CHECK(scaled[i] == doctest::Approx(3.5 * got[i]).epsilon(1e-12));
  }
}

TEST_CASE("filtering smooths continuous fields and keeps radio type") {
  auto t = fixture::wave_trace("f", 30, 20.0, 7.0, 4);
  t.records[4].radio_type = RadioType::kNrSa;
  const auto f = filter_trace(t, 3);
  const auto expect = oracle::trailing_mean(t.throughput(), 3);
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(f.records[i].throughput == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(f.records[i].radio_type == t.records[i].radio_type);
    CHECK(f.records[i].timestamp == t.records[i].timestamp);
  }
}

TEST_CASE("min-max and standard scalers") {
  const auto t = series_trace({2, 4, 6});
  const ClientTrace one[] = {t};
  const auto mm = fit_scaler(one, ScalerKind::kMinMax, {"throughput"});
  CHECK(mm.transform("throughput", 2) == 0.0);
  CHECK(mm.transform("throughput", 4) == 0.5);
  CHECK(mm.transform("throughput", 6) == 1.0);
  CHECK(mm.inverse("throughput", 0.25) == doctest::Approx(3.0));

  // Constant feature: flagged and passed through.
  auto flat = series_trace({3, 3, 3});
  const ClientTrace flat1[] = {flat};
  const auto c = fit_scaler(flat1, ScalerKind::kMinMax, {"throughput"});
  CHECK(c.column("throughput").constant);
  CHECK(c.transform("throughput", 3.0) == 3.0);
  CHECK(c.inverse("throughput", 7.0) == 7.0);

  std::mt19937_64 gen(3);
  const auto rnd = series_trace(oracle::random_vector(gen, 200, 0, 90));
  const ClientTrace r1[] = {rnd};
  const auto st = fit_scaler(r1, ScalerKind::kStandard, {"throughput", "rsrp"});
  const auto scaled = apply_scaler(rnd, st);
  for (const char* f : {"throughput", "rsrp"}) {
    std::vector<double> v;
    for (const auto& rec : scaled.records) v.push_back(field_value(rec, f));
    const double m = oracle::mean(v);
    double sq = 0.0;
    for (double x : v) sq += (x - m) * (x - m);
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(std::sqrt(sq / v.size()) - 1.0) < 1e-9);
  }
  for (std::size_t i = 0; i < rnd.size(); ++i) {
    CHECK(st.inverse("throughput", scaled.records[i].throughput) ==
          doctest::Approx(rnd.records[i].throughput).epsilon(1e-12));
    CHECK(scaled.records[i].speed == rnd.records[i].speed);
  }
  CHECK_THROWS_AS(st.column("sinr"), PreprocessError);
}

TEST_CASE("applying a scaler to a trace without its fields fails") {
  auto t = series_trace({1, 2, 3});
  for (auto& r : t.records) r.extras["cqi"] = 1.0;
  const ClientTrace one[] = {t};
  const auto s = fit_scaler(one, ScalerKind::kMinMax, {"cqi"});
  CHECK_THROWS_AS(apply_scaler(series_trace({1, 2}), s), PreprocessError);
}

TEST_CASE("window hand examples") {
  const auto t = series_trace({10, 11, 12, 13, 14});
  WindowConfig wc;
  wc.history = 2;
  wc.horizon = 1;
  const auto w = build_windows(t, wc, {"rsrp"}, 1);
  CHECK(anchors_of(w) == std::vector<std::size_t>{2, 3});
  CHECK(w[0].thpt_history == std::vector<double>{10, 11, 12});
  CHECK(w[0].target == std::vector<double>{13});
  CHECK(w[0].features.shape() == Shape{1, 3});
  CHECK(w[0].features.at(0, 2) == -100.0 + 6.0);

  wc.history = 3;
  CHECK(build_windows(series_trace({1, 2, 3, 4, 5}), wc, {}, 1).size() == 1);
  wc.history = 4;
  CHECK_THROWS_AS(build_windows(series_trace({1, 2, 3, 4, 5}), wc, {}, 1), PreprocessError);

  WindowConfig big;
  big.history = 15;
  big.horizon = 1;
  CHECK(build_windows(series_trace(std::vector<double>(120, 1.0)), big, {}, big.horizon).size() == 104);
}

TEST_CASE("windows match the index-arithmetic oracle") {
  std::mt19937_64 gen(6);
  const std::vector<std::string> feats = {"rsrp", "sinr", "speed"};
  for (int trial = 0; trial < 100; ++trial) {
    WindowConfig wc;
    wc.history = 1 + gen() % 12;
    wc.horizon = 1 + gen() % 6;
    const std::size_t stride = 1 + gen() % 5;
    const std::size_t n = wc.history + wc.horizon + 1 + gen() % 60;
    const auto t = series_trace(oracle::random_vector(gen, n, 0, 100));
    const auto w = build_windows(t, wc, feats, stride);
    const auto expect = oracle::window_anchors(n, wc.history, wc.horizon, stride, wc.history);
    CHECK(w.size() == (n - wc.history - wc.horizon - 1) / stride + 1);
    REQUIRE(anchors_of(w) == expect);
    for (const auto& s : w) {
      const std::size_t a = s.anchor;
      for (std::size_t j = 0; j <= wc.history; ++j) {
        const auto& rec = t.records[a - wc.history + j];
        CHECK(s.thpt_history[j] == rec.throughput);
        CHECK(s.features.at(0, j) == rec.rsrp);
        CHECK(s.features.at(1, j) == rec.sinr);
        CHECK(s.features.at(2, j) == rec.speed);
      }
      for (std::size_t k = 0; k < wc.horizon; ++k) CHECK(s.target[k] == t.records[a + 1 + k].throughput);
    }
  }
}

TEST_CASE("chronological split") {
  const auto t = series_trace(std::vector<double>(40, 1.0));
  WindowConfig wc;
  wc.history = 2;
  auto all = build_windows(t, wc, {}, 1);
  all.resize(10);
  auto s = split_train_test(all, 0.8);
  CHECK(s.train.size() == 8);
  CHECK(s.test.size() == 2);
  CHECK(s.train.back().anchor < s.test.front().anchor);

  auto five = build_windows(t, wc, {}, 1);
  five.resize(5);
  const auto s5 = split_train_test(five, 0.8);
  CHECK(s5.train.size() == 4);
  CHECK(s5.test.size() == 1);

  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + gen() % 200;
    const auto tt = series_trace(std::vector<double>(n + 3, 1.0));
    const auto w = build_windows(tt, wc, {}, 1);
    const auto sp = split_train_test(w, 0.8);
    CHECK(sp.train.size() == static_cast<std::size_t>(std::floor(0.8 * w.size() + 1e-9)));
    auto joined = anchors_of(sp.train);
    const auto te = anchors_of(sp.test);
    joined.insert(joined.end(), te.begin(), te.end());
    CHECK(joined == anchors_of(w));
  }
  CHECK_THROWS_AS(split_train_test(std::vector<WindowSample>(1), 0.8), PreprocessError);
  CHECK_THROWS_AS(split_train_test(std::vector<WindowSample>(10), 1.0), PreprocessError);
}

TEST_CASE("prepared clients never let test rows reach the scaler or the training targets") {
  std::vector<ClientTrace> traces = {fixture::wave_trace("a", 150, 20.0, 11.0, 1),
                                     fixture::wave_trace("b", 170, 60.0, 17.0, 2)};
  WindowConfig wc;
  wc.history = 6;
  wc.horizon = 2;
  PreprocessConfig pc;
  const auto prep = prepare_clients(traces, pc, wc, 0.8);
  REQUIRE(prep.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& p = prep[i];
    CHECK(p.fit_rows == p.train.back().anchor + wc.horizon + 1);
    CHECK(p.test.front().anchor == p.train.back().anchor + wc.horizon);
    CHECK(p.test.front().anchor + 1 >= p.fit_rows);
    for (std::size_t k = 1; k < p.test.size(); ++k) CHECK(p.test[k].anchor == p.test[k - 1].anchor + wc.horizon);
    for (std::size_t k = 1; k < p.train.size(); ++k) CHECK(p.train[k].anchor == p.train[k - 1].anchor + 1);
    // Scaled training rows lie in [0, 1].
    for (std::size_t r = 0; r < p.fit_rows; ++r) {
      CHECK(p.scaled.records[r].throughput >= -1e-12);
      CHECK(p.scaled.records[r].throughput <= 1.0 + 1e-12);
    }
  }

  // Perturbing rows past the fitting range leaves the scaler untouched.
  auto changed = traces;
  for (std::size_t r = prep[0].fit_rows; r < changed[0].size(); ++r) changed[0].records[r].throughput *= 50.0;
  const auto prep2 = prepare_clients(changed, pc, wc, 0.8);
  CHECK(prep2[0].scaler.column("throughput").a == prep[0].scaler.column("throughput").a);
  CHECK(prep2[0].scaler.column("throughput").b == prep[0].scaler.column("throughput").b);
}

TEST_CASE("dataset scope pools clients that share a tag") {
  std::vector<ClientTrace> traces = {fixture::wave_trace("a", 120, 10.0, 9.0, 1),
                                     fixture::wave_trace("b", 120, 80.0, 9.0, 2),
                                     fixture::wave_trace("c", 120, 40.0, 9.0, 3)};
  traces[2].dataset_tag = "other";
  WindowConfig wc;
  wc.history = 4;
  PreprocessConfig pc;
  pc.scaling_scope = ScalingScope::kPerDataset;
  const auto prep = prepare_clients(traces, pc, wc, 0.8);
  const auto& ca = prep[0].scaler.column("throughput");
  const auto& cb = prep[1].scaler.column("throughput");
  const auto& cc = prep[2].scaler.column("throughput");
  CHECK(ca.a == cb.a);
  CHECK(ca.b == cb.b);
  CHECK(ca.a == doctest::Approx(std::min(prep[0].filtered.records[0].throughput, ca.a)));
  CHECK_FALSE(cc.b == ca.b);
  pc.scaling_scope = ScalingScope::kPerClient;
  const auto own = prepare_clients(traces, pc, wc, 0.8);
  CHECK_FALSE(own[0].scaler.column("throughput").b == own[1].scaler.column("throughput").b);
}

TEST_CASE("window dump lists feature, history and target rows per sample") {
  const auto t = series_trace({1, 2, 3, 4, 5, 6});
  WindowConfig wc;
  wc.history = 2;
  const auto w = build_windows(t, wc, {"speed"}, 1);
  std::ostringstream out;
  dump_windows(out, w);
  const std::string s = out.str();
  CHECK(std::count(s.begin(), s.end(), '\n') == 3 * static_cast<long>(w.size()) + 1);
  CHECK(s.find("2,thpt_history,0,1 2 3\n") != std::string::npos);
  CHECK(s.find("2,target,0,4\n") != std::string::npos);
}
