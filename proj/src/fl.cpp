#include "fedcast/fl.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <ostream>

#include "fedcast/analysis.hpp"
#include "fedcast/format.hpp"
#include "fedcast/kernels.hpp"

namespace fedcast {

StrategyKind parse_strategy(const std::string& text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "fedavg") return StrategyKind::kFedAvg;
  if (t == "fedprox") return StrategyKind::kFedProx;
  if (t == "fedbn") return StrategyKind::kFedBn;
  throw FederationError("unknown strategy '" + text + "'");
}

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::kFedAvg: return "fedavg";
    case StrategyKind::kFedProx: return "fedprox";
    case StrategyKind::kFedBn: return "fedbn";
  }
  return "?";
}

void RoundConfig::validate() const {
  if (!(participation_fraction > 0.0 && participation_fraction <= 1.0)) {
    throw FederationError("participation_fraction must lie in (0, 1]");
  }
  if (strategy.kind == StrategyKind::kFedProx && !(strategy.mu > 0.0)) {
    throw FederationError("fedprox requires mu > 0");
  }
  if (strategy.kind != StrategyKind::kFedProx && strategy.mu != 0.0) {
    throw FederationError("mu is only meaningful for fedprox");
  }
}

ClientHandle make_client(std::string client_id, const PreparedClient& prepared) {
  ClientHandle c;
  c.client_id = std::move(client_id);
  c.train = prepared.train;
  c.test = prepared.test;
  c.scaler = prepared.scaler;
  return c;
}

std::vector<std::size_t> sample_clients(std::size_t count, double fraction, Rng& rng) {
  if (count == 0) throw FederationError("sample_clients: no clients");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw FederationError("sample_clients: fraction must lie in (0, 1]");
  }
  // Guard against 0.85 * 20 landing a hair above 17.
  auto m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(count) - 1e-9));
  m = std::clamp<std::size_t>(m, 1, count);
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.index(count - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

void check_updates(std::span<const ClientUpdate> updates, double& total) {
  if (updates.empty()) throw StructureError("aggregate: no updates");
  total = 0.0;
  for (const auto& u : updates) {
    if (u.params == nullptr) throw StructureError("aggregate: null update");
    if (!(u.sample_count >= 0.0) || !std::isfinite(u.sample_count)) {
      throw StructureError("aggregate: invalid sample count");
    }
    if (!u.params->same_structure(*updates.front().params)) {
      throw StructureError("aggregate: parameter sets differ in structure");
    }
    total += u.sample_count;
  }
  if (!(total > 0.0)) throw StructureError("aggregate: total sample count is zero");
}

// Weighted mean of the entries selected by `keep`.
ParamSet weighted_mean(std::span<const ClientUpdate> updates, double total,
                       const std::function<bool(const ParamEntry&)>& keep) {
  std::vector<double> weights;
  weights.reserve(updates.size());
  for (const auto& u : updates) weights.push_back(u.sample_count / total);

  ParamSet out;
  const auto& first = updates.front().params->entries();
  std::vector<std::span<const double>> inputs(updates.size());
  for (std::size_t e = 0; e < first.size(); ++e) {
    if (!keep(first[e])) continue;
    for (std::size_t k = 0; k < updates.size(); ++k) {
      inputs[k] = updates[k].params->entries()[e].value.data();
    }
    Tensor acc(first[e].value.shape(), 0.0);
    kernels::weighted_sum(inputs, weights, acc.data());
    out.add(first[e].name, std::move(acc), first[e].is_batchnorm, first[e].trainable);
  }
  return out;
}

}  // namespace

ParamSet aggregate_fedavg(std::span<const ClientUpdate> updates) {
  double total = 0.0;
  check_updates(updates, total);
  return weighted_mean(updates, total, [](const ParamEntry&) { return true; });
}

FedBnAggregate aggregate_fedbn(std::span<const ClientUpdate> updates) {
  double total = 0.0;
  check_updates(updates, total);
  FedBnAggregate out;
  out.shared = weighted_mean(updates, total, [](const ParamEntry& e) { return !e.is_batchnorm; });
  for (const auto& u : updates) {
    ParamSet p = *u.params;
    overwrite_entries(p, out.shared);
    out.per_client.push_back(std::move(p));
  }
  return out;
}

void overwrite_entries(ParamSet& target, const ParamSet& block) {
  for (const auto& e : block.entries()) {
    auto& dst = target.at(e.name);
    if (dst.value.shape() != e.value.shape()) {
      throw StructureError("overwrite_entries: shape mismatch for " + e.name);
    }
    dst.value = e.value;
  }
}

ClientRoundMetrics evaluate_client(const ModelSpec& spec, const ClientHandle& client) {
  ClientRoundMetrics m;
  m.client_id = client.client_id;
  if (client.test.empty()) {
    m.r2 = m.mse = std::nan("");
    return m;
  }
  const PredictedSeries s = predict_trace(spec, client.local, client.test);
  std::vector<double> truth(s.truth.size()), pred(s.predicted.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    truth[i] = client.scaler.inverse("throughput", s.truth[i]);
    pred[i] = client.scaler.inverse("throughput", s.predicted[i]);
  }
  bool finite = std::all_of(pred.begin(), pred.end(), [](double v) { return std::isfinite(v); });
  if (!finite) {
    m.r2 = m.mse = std::nan("");
    return m;
  }
  m.mse = mse(truth, pred);
  try {
    m.r2 = r2_score(truth, pred);
  } catch (const AnalysisError&) {
    m.r2 = std::nan("");
  }
  return m;
}

RoundOutcome run_round(std::span<ClientHandle> clients, const ParamSet& global,
                       const FederationContext& ctx, std::size_t round_index) {
  ctx.round.validate();
  ctx.train.validate();
  if (clients.empty()) throw FederationError("run_round: no clients");
  for (const auto& c : clients) {
    if (c.sample_count() == 0) {
      throw FederationError("client " + c.client_id + " has no training samples");
    }
    if (!c.local.same_structure(global)) {
      throw StructureError("client " + c.client_id + " parameters differ from the global model");
    }
  }

  const bool fedbn = ctx.round.strategy.kind == StrategyKind::kFedBn;
  Rng sampler(derive_seed(ctx.round.seed, "sample", round_index));
  const auto participants = sample_clients(clients.size(), ctx.round.participation_fraction,
                                           sampler);

  TrainConfig tc = ctx.train;
  tc.prox_mu = ctx.round.strategy.kind == StrategyKind::kFedProx ? ctx.round.strategy.mu : 0.0;

  // Broadcast: FedBN keeps the client's own BN entries.
  std::vector<ParamSet> start(participants.size());
  for (std::size_t i = 0; i < participants.size(); ++i) {
    const ClientHandle& c = clients[participants[i]];
    if (fedbn) {
      start[i] = c.local;
      for (auto& e : start[i].entries()) {
        if (!e.is_batchnorm) e.value = global.at(e.name).value;
      }
    } else {
      start[i] = global;
    }
  }

  std::vector<std::optional<ParamSet>> results(participants.size());
  std::vector<std::exception_ptr> failures(participants.size());
  const auto n_part = static_cast<std::ptrdiff_t>(participants.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n_part; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const std::size_t k = participants[ui];
    try {
      const std::uint64_t seed =
          derive_seed(ctx.round.seed, "local_train", round_index * clients.size() + k);
      auto r = local_train(ctx.spec, start[ui], clients[k].train, tc,
                           tc.prox_mu > 0.0 ? &start[ui] : nullptr, seed);
      results[ui] = std::move(r.params);
    } catch (const DivergenceError&) {
      results[ui].reset();
    } catch (...) {
      failures[ui] = std::current_exception();
    }
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  RoundOutcome out;
  out.report.round = round_index;
  std::vector<ClientUpdate> updates;
  std::vector<std::size_t> owners;
  std::vector<bool> diverged(clients.size(), false), took_part(clients.size(), false);
  for (std::size_t i = 0; i < participants.size(); ++i) {
    const std::size_t k = participants[i];
    took_part[k] = true;
    out.report.participants.push_back(clients[k].client_id);
    if (!results[i]) {
      diverged[k] = true;
      continue;
    }
    updates.push_back({&*results[i], static_cast<double>(clients[k].sample_count())});
    owners.push_back(k);
  }

  if (updates.empty()) {
    out.global = global;
  } else if (fedbn) {
    FedBnAggregate agg = aggregate_fedbn(updates);
    out.global = global;
    overwrite_entries(out.global, agg.shared);
    for (std::size_t i = 0; i < owners.size(); ++i) {
      clients[owners[i]].local = std::move(agg.per_client[i]);
    }
  } else {
    out.global = aggregate_fedavg(updates);
    if (!ctx.round.aggregate_running_stats) {
      for (auto& e : out.global.entries()) {
        if (e.is_batchnorm && !e.trainable) e.value = global.at(e.name).value;
      }
    }
  }

  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (fedbn) {
      // Non-participants and diverged clients keep their own BN block.
      if (took_part[k] && !diverged[k]) continue;
      for (auto& e : clients[k].local.entries()) {
        if (!e.is_batchnorm) e.value = out.global.at(e.name).value;
      }
    } else {
      clients[k].local = out.global;
    }
  }

  for (std::size_t i = 0; i < owners.size(); ++i) {
    out.trained.emplace_back(owners[i], std::move(*results[i]));
  }

  std::vector<double> r2s;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    ClientRoundMetrics m = evaluate_client(ctx.spec, clients[k]);
    m.participated = took_part[k];
    m.diverged = diverged[k];
    if (std::isfinite(m.r2)) r2s.push_back(m.r2);
    out.report.clients.push_back(std::move(m));
  }
  if (r2s.empty()) {
    out.report.mean_r2 = out.report.var_r2 = std::nan("");
  } else {
    double s = 0.0;
    for (double v : r2s) s += v;
    const double mean = s / static_cast<double>(r2s.size());
    double ss = 0.0;
    for (double v : r2s) ss += (v - mean) * (v - mean);
    out.report.mean_r2 = mean;
    out.report.var_r2 = ss / static_cast<double>(r2s.size());
  }
  return out;
}

ExperimentResult run_experiment(std::span<ClientHandle> clients, const FederationContext& ctx,
                                const ReportSink& sink) {
  if (clients.empty()) throw FederationError("run_experiment: no clients");
  ctx.spec.validate();
  ctx.round.validate();
  ctx.train.validate();
  ExperimentResult res;
  res.global = init_model(ctx.spec, derive_seed(ctx.round.seed, "init"));
  for (auto& c : clients) c.local = res.global;
  for (std::size_t r = 0; r < ctx.round.total_rounds; ++r) {
    RoundOutcome o = run_round(clients, res.global, ctx, r);
    res.global = std::move(o.global);
    if (sink) sink(o.report);
    res.reports.push_back(std::move(o.report));
  }
  return res;
}

void write_round_csv_header(std::ostream& out) {
  out << "round,client_id,r2,mse,participated\n";
}

void write_round_csv(std::ostream& out, const RoundReport& report) {
  for (const auto& c : report.clients) {
    out << report.round << ',' << c.client_id << ',' << format_number(c.r2) << ','
        << format_number(c.mse) << ',' << (c.participated ? 1 : 0) << '\n';
  }
}

}  // namespace fedcast
