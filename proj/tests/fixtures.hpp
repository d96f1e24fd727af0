#pragma once

// Small deterministic inputs shared by several test binaries.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedcast/autodiff.hpp"
#include "fedcast/models.hpp"
#include "fedcast/preprocess.hpp"
#include "fedcast/trace.hpp"

namespace fixture {

inline std::vector<fedcast::WindowSample> random_samples(std::mt19937_64& gen, std::size_t count,
                                                         std::size_t features, std::size_t history,
                                                         std::size_t horizon) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::vector<fedcast::WindowSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    fedcast::WindowSample s;
    s.features = fedcast::Tensor({features, history + 1});
    for (double& v : s.features.values()) v = d(gen);
    s.thpt_history.resize(history + 1);
    for (double& v : s.thpt_history) v = d(gen);
    s.target.resize(horizon);
    for (double& v : s.target) v = d(gen);
    s.anchor = history + i;
    out.push_back(std::move(s));
  }
  return out;
}

// Smooth sinusoid plus noise with correlated radio fields.
inline fedcast::ClientTrace wave_trace(const std::string& id, std::size_t n, double offset,
                                       double period, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> noise(0.0, 0.05 * offset);
  fedcast::ClientTrace t;
  t.client_id = id;
  t.dataset_tag = "toy";
  for (std::size_t i = 0; i < n; ++i) {
    fedcast::TraceRecord r;
    r.timestamp = static_cast<double>(i);
    r.throughput = offset * (1.0 + 0.4 * std::sin(2.0 * 3.14159265358979 * i / period)) + noise(gen);
    r.rsrp = -100.0 + 10.0 * std::log10(1.0 + r.throughput);
    r.sinr = 5.0 + 3.0 * std::log10(1.0 + r.throughput);
    r.speed = 1.0 + 0.1 * static_cast<double>(i % 7);
    r.latitude = 40.0;
    r.longitude = -74.0;
    r.radio_type = fedcast::RadioType::kLte;
    t.records.push_back(r);
  }
  return t;
}

// Toy size used by the gradient checks.
inline fedcast::ModelSpec toy_spec(fedcast::Arch a) {
  using namespace fedcast;
  ModelSpec s;
  s.arch = a;
  s.input_features = 3;
  s.history = 5;
  s.horizon = 2;
  s.hidden = 8;
  s.conv_channels = 3;
  s.num_heads = 2;
  s.ff_hidden = 8;
  s.head_hidden = 6;
  s.layers = a == Arch::kLstmCnn ? 1 : 2;
  return s;
}

// Central-difference check of the training objective w.r.t. every trainable
// parameter, with batch statistics in the batch-norm layers.
inline fedcast::ad::GradCheckResult check_model(const fedcast::ModelSpec& spec, std::uint64_t seed) {
  using namespace fedcast;
  namespace ad = fedcast::ad;
  std::mt19937_64 gen(seed);
  ParamSet params = init_model(spec, seed);
  // Move batch-norm affine parameters off their identity init so the check
  // exercises every path.
  for (auto& e : params.entries()) {
    if (e.is_batchnorm && e.trainable) {
      for (double& v : e.value.values()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(gen);
    }
  }
  const auto samples = random_samples(gen, 2, spec.input_features, spec.history, spec.horizon);
  const Batch batch = make_batch(spec, samples);

  std::vector<std::string> names;
  std::vector<Tensor> values;
  for (const auto& e : params.entries()) {
    if (e.trainable) {
      names.push_back(e.name);
      values.push_back(e.value);
    }
  }
  auto f = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
    ParamSet scratch = params;
    GraphParams gp;
    for (std::size_t i = 0; i < names.size(); ++i) gp.vars.emplace(names[i], vars[i]);
    for (auto& e : scratch.entries()) {
      if (!e.trainable) gp.running.emplace(e.name, &e.value);
    }
    const ad::Var pred = build_forward(spec, gp, batch.inputs, true, tape);
    return ad::mse(pred, batch.targets);
  };
  return ad::grad_check(f, values);
}


}  // namespace fixture
