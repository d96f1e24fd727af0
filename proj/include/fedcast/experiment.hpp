#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcast/fl.hpp"
#include "fedcast/keyvalue.hpp"
#include "fedcast/models.hpp"
#include "fedcast/preprocess.hpp"
#include "fedcast/stream.hpp"
#include "fedcast/synthetic.hpp"

namespace fedcast {

/// Carries every problem found while validating a configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class DataKind { kSynthetic, kFiles };

struct SyntheticGenerator {
  std::size_t clients = 8;
  std::size_t length = 400;
  double offset_min = 10.0;
  double offset_max = 100.0;
  double amplitude_ratio = 0.3;
  double noise_ratio = 0.08;

  SyntheticSpec spec() const {
    return SyntheticSpec::heterogeneous(clients, length, offset_min, offset_max,
                                        amplitude_ratio, noise_ratio);
  }
};

struct AnalyzeConfig {
  std::vector<std::size_t> horizons = {1, 3, 5};
  std::size_t kde_points = 101;
  double kde_bandwidth = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;

  DataKind data = DataKind::kSynthetic;
  std::vector<std::filesystem::path> files;
  std::optional<std::filesystem::path> mapping;
  double sample_period = 1.0;
  std::size_t max_gap = 3;
  SyntheticGenerator synthetic;

  PreprocessConfig preprocess;
  double train_ratio = 0.8;
  WindowConfig window;
  ModelSpec model;
  TrainConfig train;
  RoundConfig round;
  AnalyzeConfig analyze;
  StreamConfig stream;
  QoECoefficients qoe;
  std::size_t stream_clients = 0;  // 0 streams every client
};

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
};

/// Relative data paths resolve against `base_dir`. Throws ConfigError listing
/// every offending field.
ExperimentConfig parse_config(const KeyValueDoc& doc, const std::filesystem::path& base_dir,
                              const ConfigOverrides& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             const ConfigOverrides& overrides = {});

/// Resolved configuration as key-value text; parses back to the same
/// configuration. The output directory is left out so replays can target
/// any directory.
std::string echo_config(const ExperimentConfig& cfg);

/// Synthetic or file-backed traces on a regular grid.
std::vector<ClientTrace> load_sources(const ExperimentConfig& cfg);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

struct FederateOutput {
  ExperimentResult result;
  std::vector<ClientHandle> clients;
};

/// rounds.csv, summary.json and checkpoints/ under cfg.out_dir.
FederateOutput run_federate(const ExperimentConfig& cfg);
/// correlation.csv and kde.csv under cfg.out_dir.
void run_analyze(const ExperimentConfig& cfg);
/// qoe.json and events/ under cfg.out_dir, using checkpoints from federate.
void run_stream(const ExperimentConfig& cfg);

/// `fedcast <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--workers <n>]`.
/// Returns 0 on success, 1 on validation failure, 2 on runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace fedcast
