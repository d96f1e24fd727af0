#include "fedcast/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "architectures.hpp"
#include "fedcast/format.hpp"
#include "fedcast/keyvalue.hpp"
#include "fedcast/rng.hpp"

namespace fedcast {

Arch parse_arch(const std::string& text) {
  std::string t;
  for (char c : text) {
    if (c != '_' && c != '-' && c != '+') t.push_back(static_cast<char>(std::toupper(c)));
  }
  if (t == "CNN") return Arch::kCnn;
  if (t == "LSTM") return Arch::kLstm;
  if (t == "LSTMCNN") return Arch::kLstmCnn;
  if (t == "TRANSFORMER") return Arch::kTransformer;
  throw ModelError("unknown architecture '" + text + "'");
}

std::string to_string(Arch a) {
  switch (a) {
    case Arch::kCnn: return "CNN";
    case Arch::kLstm: return "LSTM";
    case Arch::kLstmCnn: return "LSTM_CNN";
    case Arch::kTransformer: return "TRANSFORMER";
  }
  return "?";
}

double default_learning_rate(Arch a) {
  switch (a) {
    case Arch::kCnn: return 0.001;
    case Arch::kLstm: return 0.0003;
    case Arch::kLstmCnn: return 0.003;
    case Arch::kTransformer: return 0.001;
  }
  return 0.001;
}

std::size_t default_local_epochs(Arch a) {
  return a == Arch::kLstm || a == Arch::kTransformer ? 3 : 2;
}

// ---- ModelSpec --------------------------------------------------------------

std::size_t ModelSpec::batchnorm_sites() const {
  switch (arch) {
    case Arch::kCnn: return 2;
    case Arch::kLstm:
    case Arch::kLstmCnn: return 1;
    case Arch::kTransformer: return layers;
  }
  return 0;
}

bool ModelSpec::batchnorm_at(std::size_t site) const {
  return batchnorm.empty() ? true : batchnorm.at(site);
}

void ModelSpec::validate() const {
  if (history < 1 || horizon < 1) throw ModelError("history and horizon must be >= 1");
  if (hidden < 1 || layers < 1) throw ModelError("hidden and layers must be >= 1");
  if (!batchnorm.empty() && batchnorm.size() != batchnorm_sites()) {
    throw ModelError(to_string(arch) + " has " + std::to_string(batchnorm_sites()) +
                     " batch-norm sites but " + std::to_string(batchnorm.size()) +
                     " flags were given");
  }
  if ((arch == Arch::kCnn || arch == Arch::kLstmCnn) && conv_channels < 1) {
    throw ModelError("conv_channels must be >= 1");
  }
  if (arch == Arch::kLstmCnn && layers != 1) {
    throw ModelError("LSTM_CNN supports a single recurrent layer");
  }
  if (arch == Arch::kTransformer) {
    if (num_heads < 1 || hidden % num_heads != 0) {
      throw ModelError("transformer width must be divisible by num_heads");
    }
    if (ff_hidden < 1) throw ModelError("ff_hidden must be >= 1");
  }
  if (arch == Arch::kLstm && head_hidden < 1) throw ModelError("head_hidden must be >= 1");
}

std::map<std::string, std::string> ModelSpec::to_header() const {
  std::string bn;
  for (std::size_t i = 0; i < batchnorm.size(); ++i) bn += (i ? "," : "") + std::string(batchnorm[i] ? "1" : "0");
  return {{"arch", to_string(arch)},
          {"input_features", std::to_string(input_features)},
          {"history", std::to_string(history)},
          {"horizon", std::to_string(horizon)},
          {"hidden", std::to_string(hidden)},
          {"layers", std::to_string(layers)},
          {"conv_channels", std::to_string(conv_channels)},
          {"num_heads", std::to_string(num_heads)},
          {"ff_hidden", std::to_string(ff_hidden)},
          {"head_hidden", std::to_string(head_hidden)},
          {"batchnorm", bn},
          {"positional_encoding", positional_encoding ? "1" : "0"},
          {"leaky_slope", format_number(leaky_slope)}};
}

ModelSpec ModelSpec::from_header(const std::map<std::string, std::string>& h) {
  auto get = [&](const char* key) {
    const auto it = h.find(key);
    if (it == h.end()) throw ModelError(std::string("checkpoint header lacks '") + key + "'");
    return it->second;
  };
  auto count = [&](const char* key) { return static_cast<std::size_t>(std::stoul(get(key))); };
  ModelSpec s;
  s.arch = parse_arch(get("arch"));
  s.input_features = count("input_features");
  s.history = count("history");
  s.horizon = count("horizon");
  s.hidden = count("hidden");
  s.layers = count("layers");
  s.conv_channels = count("conv_channels");
  s.num_heads = count("num_heads");
  s.ff_hidden = count("ff_hidden");
  s.head_hidden = count("head_hidden");
  for (const auto& flag : split_list(get("batchnorm"))) s.batchnorm.push_back(flag == "1");
  s.positional_encoding = get("positional_encoding") == "1";
  s.leaky_slope = parse_number(get("leaky_slope")).value_or(0.01);
  s.validate();
  return s;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ModelError("learning_rate must be > 0");
  if (batch_size < 1) throw ModelError("batch_size must be >= 1");
  if (!(prox_mu >= 0.0)) throw ModelError("prox_mu must be >= 0");
}

// ---- initialization ---------------------------------------------------------

ParamSet init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamSet params;
  for (const auto& d : param_layout(spec)) {
    Tensor t(d.shape);
    switch (d.init) {
      case InitKind::kWeight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(d.fan_in, 1)));
        for (auto& v : t.values()) v = rng.uniform(-bound, bound);
        break;
      }
      case InitKind::kZero: break;
      case InitKind::kOne: t.fill(1.0); break;
      case InitKind::kLstmBias: {
        // Gate order i, f, g, o; forget gate starts open.
        const std::size_t hidden = t.size() / 4;
        for (std::size_t i = hidden; i < 2 * hidden; ++i) t[i] = 1.0;
        break;
      }
    }
    params.add(d.name, std::move(t), d.is_batchnorm, d.trainable);
  }
  return params;
}

// ---- batches and forward ------------------------------------------------------

Batch make_batch(const ModelSpec& spec, std::span<const WindowSample> samples) {
  if (samples.empty()) throw ModelError("empty batch");
  const std::size_t b = samples.size(), t = spec.steps(), c = spec.channels();
  Batch batch{Tensor({b, t, c}), Tensor({b, spec.horizon})};
  for (std::size_t n = 0; n < b; ++n) {
    const auto& s = samples[n];
    if (s.features.rank() != 2 || s.features.dim(0) != spec.input_features ||
        s.features.dim(1) != t || s.thpt_history.size() != t) {
      throw ModelError("window sample shape does not match the model spec");
    }
    for (std::size_t step = 0; step < t; ++step) {
      for (std::size_t k = 0; k < spec.input_features; ++k) {
        batch.inputs[(n * t + step) * c + k] = s.features.at(k, step);
      }
      batch.inputs[(n * t + step) * c + c - 1] = s.thpt_history[step];
    }
    if (!s.target.empty()) {
      if (s.target.size() != spec.horizon) throw ModelError("target length differs from F");
      std::copy(s.target.begin(), s.target.end(),
                batch.targets.data().begin() + n * spec.horizon);
    }
  }
  return batch;
}

GraphParams GraphParams::bind(ad::Tape& tape, ParamSet& params) {
  GraphParams g;
  for (auto& e : params.entries()) {
    if (e.trainable) {
      g.vars.emplace(e.name, tape.leaf(e.value));
    } else {
      g.running.emplace(e.name, &e.value);
    }
  }
  return g;
}

const ad::Var& GraphParams::var(const std::string& name) const {
  const auto it = vars.find(name);
  if (it == vars.end()) throw ModelError("graph has no parameter '" + name + "'");
  return it->second;
}

Tensor* GraphParams::state(const std::string& name) const {
  const auto it = running.find(name);
  if (it == running.end()) throw ModelError("graph has no running statistic '" + name + "'");
  return it->second;
}

Tensor forward(const ModelSpec& spec, ParamSet& params, std::span<const WindowSample> samples,
               bool training) {
  const Batch batch = make_batch(spec, samples);
  ad::Tape tape;
  const auto g = GraphParams::bind(tape, params);
  return build_forward(spec, g, batch.inputs, training, tape).value();
}

Tensor predict(const ModelSpec& spec, const ParamSet& params,
               std::span<const WindowSample> samples) {
  ParamSet copy = params;  // eval mode never writes, but binding wants mutable state
  return forward(spec, copy, samples, false);
}

ad::Var training_objective(const ModelSpec& spec, const GraphParams& params,
                           const Batch& batch, const TrainConfig& cfg,
                           const ParamSet* anchor, ad::Tape& tape) {
  ad::Var loss = ad::mse(build_forward(spec, params, batch.inputs, true, tape), batch.targets);
  if (cfg.prox_mu > 0.0) {
    if (anchor == nullptr) throw ModelError("proximal term needs an anchor ParamSet");
    std::vector<ad::Var> terms;
    for (const auto& e : anchor->entries()) {
      if (!e.trainable || (e.is_batchnorm && !cfg.prox_include_batchnorm)) continue;
      terms.push_back(ad::squared_distance(params.var(e.name), e.value));
    }
    if (!terms.empty()) {
      ad::Var total = terms.front();
      for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
      loss = ad::add(loss, ad::scale(total, 0.5 * cfg.prox_mu));
    }
  }
  return loss;
}

// ---- local training -----------------------------------------------------------

LocalTrainResult local_train(const ModelSpec& spec, ParamSet params,
                             std::span<const WindowSample> train, const TrainConfig& cfg,
                             const ParamSet* anchor, std::uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw ModelError("local_train: no training samples");
  if (cfg.prox_mu > 0.0 && (anchor == nullptr || !anchor->same_structure(params))) {
    throw ModelError("local_train: proximal term needs a structurally identical anchor");
  }

  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<Moments> moments(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    moments[i].m.assign(params.entries()[i].value.size(), 0.0);
    moments[i].v.assign(params.entries()[i].value.size(), 0.0);
  }

  Rng rng(seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<WindowSample> batch_samples;
  std::size_t step = 0;
  double last_epoch_loss = 0.0;

  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.index(i)]);
    }
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch_samples.clear();
      for (std::size_t k = start; k < end; ++k) batch_samples.push_back(train[order[k]]);
      const Batch batch = make_batch(spec, batch_samples);

      ad::Tape tape;
      const auto graph = GraphParams::bind(tape, params);
      const ad::Var objective = training_objective(spec, graph, batch, cfg, anchor, tape);
      const double value = objective.value()[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("local training diverged at epoch " + std::to_string(epoch) +
                              " (objective " + format_number(value) + ")");
      }
      tape.backward(objective);
      ++step;

      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& e = params.entries()[p];
        if (!e.trainable) continue;
        const Tensor& g = graph.var(e.name).grad();
        auto& w = e.value;
        if (cfg.optimizer == OptimizerKind::kSgd) {
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.learning_rate * g[i];
          continue;
        }
        auto& m = moments[p].m;
        auto& v = moments[p].v;
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
          v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
          w[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
        }
      }
      loss_sum += value * static_cast<double>(end - start);
    }
    last_epoch_loss = loss_sum / static_cast<double>(order.size());
  }
  return {std::move(params), last_epoch_loss};
}

// ---- inference ----------------------------------------------------------------

PredictedSeries predict_trace(const ModelSpec& spec, const ParamSet& params,
                              std::span<const WindowSample> windows, std::size_t batch_size) {
  if (windows.empty()) throw ModelError("predict_trace: no windows");
  std::map<std::size_t, std::pair<double, double>> by_index;
  ParamSet eval = params;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const auto chunk = windows.subspan(start, std::min(batch_size, windows.size() - start));
    const Tensor out = forward(spec, eval, chunk, false);
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      for (std::size_t k = 0; k < spec.horizon; ++k) {
        const double truth = k < chunk[n].target.size() ? chunk[n].target[k] : 0.0;
        by_index[chunk[n].anchor + 1 + k] = {out[n * spec.horizon + k], truth};
      }
    }
  }
  PredictedSeries series;
  for (const auto& [idx, pair] : by_index) {
    series.index.push_back(idx);
    series.predicted.push_back(pair.first);
    series.truth.push_back(pair.second);
  }
  return series;
}

}  // namespace fedcast
