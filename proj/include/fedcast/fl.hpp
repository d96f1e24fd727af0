#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcast/models.hpp"
#include "fedcast/params.hpp"
#include "fedcast/preprocess.hpp"
#include "fedcast/rng.hpp"

namespace fedcast {

enum class StrategyKind { kFedAvg, kFedProx, kFedBn };

struct Strategy {
  StrategyKind kind = StrategyKind::kFedAvg;
  double mu = 0.0;  // FedProx only

  static Strategy fedavg() { return {StrategyKind::kFedAvg, 0.0}; }
  static Strategy fedprox(double mu) { return {StrategyKind::kFedProx, mu}; }
  static Strategy fedbn() { return {StrategyKind::kFedBn, 0.0}; }
};

StrategyKind parse_strategy(const std::string& text);
std::string to_string(StrategyKind k);

class FederationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RoundConfig {
  std::size_t total_rounds = 100;
  double participation_fraction = 0.85;
  Strategy strategy;
  std::uint64_t seed = 0;
  /// Average BN running statistics under FedAvg/FedProx.
  bool aggregate_running_stats = true;

  void validate() const;
};

struct ClientHandle {
  std::string client_id;
  std::vector<WindowSample> train;
  std::vector<WindowSample> test;
  ParamSet local;
  /// Maps scaled throughput back to Mbps for evaluation.
  ScalerState scaler;

  std::size_t sample_count() const { return train.size(); }
};

ClientHandle make_client(std::string client_id, const PreparedClient& prepared);

/// ceil(fraction * count) distinct indices, sorted ascending.
std::vector<std::size_t> sample_clients(std::size_t count, double fraction, Rng& rng);

struct ClientUpdate {
  const ParamSet* params = nullptr;
  double sample_count = 0.0;
};

/// Sample-count-weighted mean of every entry, batch norm included.
ParamSet aggregate_fedavg(std::span<const ClientUpdate> updates);

struct FedBnAggregate {
  ParamSet shared;                  // non-BN entries only
  std::vector<ParamSet> per_client;  // shared block + the client's own BN entries
};
FedBnAggregate aggregate_fedbn(std::span<const ClientUpdate> updates);

/// Copies every entry of `block` into `target` by name.
void overwrite_entries(ParamSet& target, const ParamSet& block);

struct ClientRoundMetrics {
  std::string client_id;
  double r2 = 0.0;   // NaN when the test truth is constant
  double mse = 0.0;
  bool participated = false;
  bool diverged = false;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::string> participants;
  std::vector<ClientRoundMetrics> clients;
  double mean_r2 = 0.0;
  double var_r2 = 0.0;  // population variance over clients with finite R2
};

struct RoundOutcome {
  ParamSet global;
  RoundReport report;
  /// Locally trained parameters of each non-diverged participant, keyed by
  /// client index, before aggregation.
  std::vector<std::pair<std::size_t, ParamSet>> trained;
};

struct FederationContext {
  ModelSpec spec;
  TrainConfig train;
  RoundConfig round;
};

/// One synchronous round. Updates each client's `local` parameters with the
/// strategy's broadcast and evaluates every client on its test split.
RoundOutcome run_round(std::span<ClientHandle> clients, const ParamSet& global,
                       const FederationContext& ctx, std::size_t round_index);

/// Unscaled test-set metrics of one client under its local parameters.
ClientRoundMetrics evaluate_client(const ModelSpec& spec, const ClientHandle& client);

using ReportSink = std::function<void(const RoundReport&)>;

struct ExperimentResult {
  std::vector<RoundReport> reports;
  ParamSet global;
};

/// Initializes the global model from the master seed, broadcasts it and runs
/// ctx.round.total_rounds rounds.
ExperimentResult run_experiment(std::span<ClientHandle> clients, const FederationContext& ctx,
                                const ReportSink& sink = {});

void write_round_csv_header(std::ostream& out);
void write_round_csv(std::ostream& out, const RoundReport& report);

}  // namespace fedcast
