#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fedcast/models.hpp"
#include "fixtures.hpp"

using namespace fedcast;
namespace ad = fedcast::ad;

namespace {

const Arch kArchs[] = {Arch::kCnn, Arch::kLstm, Arch::kLstmCnn, Arch::kTransformer};

using fixture::toy_spec;
using fixture::check_model;

}  // namespace

TEST_CASE("all four architectures pass gradient checks at toy size") {
  for (Arch a : kArchs) {
    CAPTURE(to_string(a));
    const auto r = check_model(toy_spec(a), 17);
    CHECK(r.checked > 50);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("every architecture owns batch-norm state with the documented init") {
  for (Arch a : kArchs) {
    CAPTURE(to_string(a));
    const ModelSpec spec = toy_spec(a);
    const ParamSet p = init_model(spec, 5);
    std::size_t bn = 0;
    for (const auto& e : p.entries()) {
      if (!e.is_batchnorm) continue;
      ++bn;
      const double expect = e.name.ends_with(".gamma") || e.name.ends_with(".running_var") ? 1.0 : 0.0;
      for (double v : e.value.values()) CHECK(v == expect);
      CHECK(e.trainable == (e.name.ends_with(".gamma") || e.name.ends_with(".beta")));
    }
    CHECK(bn == 4 * spec.batchnorm_sites());
    CHECK(init_model(spec, 5) == p);
    CHECK_FALSE(init_model(spec, 6) == p);

    ModelSpec none = spec;
    none.batchnorm.assign(spec.batchnorm_sites(), false);
    for (const auto& e : init_model(none, 5).entries()) CHECK_FALSE(e.is_batchnorm);
  }
}

TEST_CASE("predictions have shape [B, F] and eval mode is per-sample") {
  std::mt19937_64 gen(8);
  for (Arch a : kArchs) {
    CAPTURE(to_string(a));
    const ModelSpec spec = toy_spec(a);
    ParamSet p = init_model(spec, 2);
    const auto samples = fixture::random_samples(gen, 6, 3, spec.history, spec.horizon);
    // Populate running statistics with a training pass.
    forward(spec, p, samples, true);
    const Tensor all = predict(spec, p, samples);
    CHECK(all.shape() == Shape{6, 2});
    CHECK(all.all_finite());
    CHECK(predict(spec, p, samples) == all);
    const Tensor one = predict(spec, p, std::span(samples).subspan(3, 1));
    CHECK(one.at(0, 0) == doctest::Approx(all.at(3, 0)).epsilon(1e-12));
    CHECK(one.at(0, 1) == doctest::Approx(all.at(3, 1)).epsilon(1e-12));
  }
}

TEST_CASE("training mode updates running statistics, eval mode does not") {
  std::mt19937_64 gen(9);
  const ModelSpec spec = toy_spec(Arch::kLstm);
  ParamSet p = init_model(spec, 3);
  const ParamSet before = p;
  const auto samples = fixture::random_samples(gen, 4, 3, spec.history, spec.horizon);
  predict(spec, p, samples);
  CHECK(p == before);
  forward(spec, p, samples, true);
  bool changed = false;
  for (std::size_t i = 0; i < p.entries().size(); ++i) {
    const auto& e = p.entries()[i];
    if (!e.trainable) changed |= !(e.value == before.entries()[i].value);
    else CHECK(e.value == before.entries()[i].value);
  }
  CHECK(changed);
}

TEST_CASE("make_batch lays out features then throughput history") {
  std::mt19937_64 gen(10);
  ModelSpec spec = toy_spec(Arch::kCnn);
  const auto samples = fixture::random_samples(gen, 3, 3, spec.history, spec.horizon);
  const Batch b = make_batch(spec, samples);
  CHECK(b.inputs.shape() == Shape{3, 6, 4});
  CHECK(b.targets.shape() == Shape{3, 2});
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t j = 0; j < 6; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(b.inputs[(s * 6 + j) * 4 + c] == samples[s].features.at(c, j));
      }
      CHECK(b.inputs[(s * 6 + j) * 4 + 3] == samples[s].thpt_history[j]);
    }
    CHECK(b.targets.at(s, 1) == samples[s].target[1]);
  }
  spec.input_features = 2;
  CHECK_THROWS(make_batch(spec, samples));
}

TEST_CASE("sinusoidal encoding matches the closed form") {
  const Tensor pe = sinusoidal_encoding(7, 6);
  for (std::size_t pos = 0; pos < 7; ++pos) {
    for (std::size_t i = 0; i < 6; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / 6.0);
      const double expect = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
      CHECK(pe.at(pos, i) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("proximal term contributes zero gradient at the anchor") {
  std::mt19937_64 gen(12);
  const ModelSpec spec = toy_spec(Arch::kLstm);
  ParamSet p = init_model(spec, 4);
  const auto samples = fixture::random_samples(gen, 4, 3, spec.history, spec.horizon);
  const Batch batch = make_batch(spec, samples);

  auto grads = [&](double mu, const ParamSet* anchor) {
    ParamSet copy = p;
    ad::Tape tape;
    const GraphParams gp = GraphParams::bind(tape, copy);
    TrainConfig cfg;
    cfg.prox_mu = mu;
    const ad::Var loss = training_objective(spec, gp, batch, cfg, anchor, tape);
    tape.backward(loss);
    std::vector<Tensor> out;
    for (const auto& e : copy.entries()) {
      if (e.trainable) out.push_back(gp.var(e.name).grad());
    }
    return out;
  };
  const auto plain = grads(0.0, nullptr);
  const auto at_anchor = grads(1.0, &p);
  REQUIRE(plain.size() == at_anchor.size());
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(plain[i] == at_anchor[i]);

  // Away from the anchor the term pulls each non-BN weight by mu (w - anchor).
  ParamSet shifted = p;
  for (auto& e : shifted.entries()) {
    if (!e.is_batchnorm) for (double& v : e.value.values()) v -= 0.1;
  }
  const auto pulled = grads(2.0, &shifted);
  std::size_t i = 0;
  for (const auto& e : p.entries()) {
    if (!e.trainable) continue;
    const double expect = e.is_batchnorm ? 0.0 : 0.2;
    for (std::size_t j = 0; j < e.value.size(); ++j) {
      CHECK(pulled[i][j] - plain[i][j] == doctest::Approx(expect).epsilon(1e-9));
    }
    ++i;
  }
}

TEST_CASE("local training is deterministic and reduces the loss") {
  const auto trace = fixture::wave_trace("a", 300, 20.0, 25.0, 1);
  const ClientTrace traces[] = {trace};
  WindowConfig wc;
  wc.history = 8;
  wc.horizon = 1;
  const auto prepared = prepare_clients(traces, PreprocessConfig{}, wc, 0.8);
  REQUIRE(prepared.size() == 1);
  ModelSpec spec;
  spec.arch = Arch::kLstm;
  spec.history = 8;
  spec.hidden = 8;
  spec.head_hidden = 8;
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.local_epochs = 1;
  const ParamSet init = init_model(spec, 1);
  const auto a = local_train(spec, init, prepared[0].train, cfg, nullptr, 99);
  const auto b = local_train(spec, init, prepared[0].train, cfg, nullptr, 99);
  CHECK(a.params == b.params);
  CHECK(a.final_loss == b.final_loss);
  cfg.local_epochs = 8;
  const auto c = local_train(spec, init, prepared[0].train, cfg, nullptr, 99);
  CHECK(c.final_loss < a.final_loss);
  CHECK(std::isfinite(c.final_loss));
}

TEST_CASE("divergent training raises instead of returning non-finite weights") {
  const auto trace = fixture::wave_trace("a", 120, 20.0, 25.0, 2);
  const ClientTrace traces[] = {trace};
  WindowConfig wc;
  wc.history = 4;
  const auto prepared = prepare_clients(traces, PreprocessConfig{}, wc, 0.8);
  ModelSpec spec;
  spec.arch = Arch::kCnn;
  spec.history = 4;
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::kSgd;
  cfg.learning_rate = 1e150;
  CHECK_THROWS_AS(local_train(spec, init_model(spec, 1), prepared[0].train, cfg, nullptr, 1),
                  DivergenceError);
}

TEST_CASE("spec header round trip and validation") {
  for (Arch a : kArchs) {
    ModelSpec s = toy_spec(a);
    s.batchnorm.assign(s.batchnorm_sites(), true);
    s.batchnorm.back() = false;
    const ModelSpec back = ModelSpec::from_header(s.to_header());
    CHECK(back.to_header() == s.to_header());
    CHECK(init_model(back, 3) == init_model(s, 3));
  }
  ModelSpec t = toy_spec(Arch::kTransformer);
  t.num_heads = 3;
  CHECK_THROWS_AS(t.validate(), ModelError);
  ModelSpec l = toy_spec(Arch::kLstmCnn);
  l.layers = 2;
  CHECK_THROWS_AS(l.validate(), ModelError);
  ModelSpec b = toy_spec(Arch::kCnn);
  b.batchnorm = {true};
  CHECK_THROWS_AS(b.validate(), ModelError);
  CHECK_THROWS_AS(parse_arch("gru"), ModelError);
  CHECK(parse_arch(to_string(Arch::kLstmCnn)) == Arch::kLstmCnn);
}

TEST_CASE("predict_trace tiles the test horizon with eval stride F") {
  const auto trace = fixture::wave_trace("a", 200, 30.0, 20.0, 3);
  const ClientTrace traces[] = {trace};
  WindowConfig wc;
  wc.history = 6;
  wc.horizon = 3;
  const auto prepared = prepare_clients(traces, PreprocessConfig{}, wc, 0.8);
  ModelSpec spec;
  spec.arch = Arch::kCnn;
  spec.history = 6;
  spec.horizon = 3;
  const auto series = predict_trace(spec, init_model(spec, 1), prepared[0].test);
  REQUIRE(series.index.size() == 3 * prepared[0].test.size());
  for (std::size_t i = 1; i < series.index.size(); ++i) CHECK(series.index[i] == series.index[i - 1] + 1);
  for (std::size_t i = 0; i < series.truth.size(); ++i) {
    CHECK(series.truth[i] == prepared[0].scaled.records[series.index[i]].throughput);
  }
}
