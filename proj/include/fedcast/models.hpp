#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcast/autodiff.hpp"
#include "fedcast/params.hpp"
#include "fedcast/preprocess.hpp"

namespace fedcast {

enum class Arch { kCnn, kLstm, kLstmCnn, kTransformer };

Arch parse_arch(const std::string& text);
std::string to_string(Arch a);

struct ModelSpec {
  Arch arch = Arch::kLstm;
  std::size_t input_features = 3;  // |features|; throughput history is appended
  std::size_t history = 15;        // H; sequences have H+1 steps
  std::size_t horizon = 1;         // F
  std::size_t hidden = 16;         // LSTM state / transformer model width
  std::size_t layers = 1;          // LSTM layers or encoder blocks
  std::size_t conv_channels = 4;
  std::size_t num_heads = 2;
  std::size_t ff_hidden = 32;
  std::size_t head_hidden = 16;
  /// One flag per batch-norm site; empty means every site is enabled.
  /// Sites: CNN 2 (one per conv block), LSTM 1 (pre-head), LSTM+CNN 1
  /// (after the conv block), Transformer one per encoder block.
  std::vector<bool> batchnorm;
  bool positional_encoding = true;
  double leaky_slope = 0.01;

  std::size_t channels() const { return input_features + 1; }
  std::size_t steps() const { return history + 1; }
  std::size_t batchnorm_sites() const;
  bool batchnorm_at(std::size_t site) const;

  /// Throws ModelError on an unsupported combination.
  void validate() const;
  std::map<std::string, std::string> to_header() const;
  static ModelSpec from_header(const std::map<std::string, std::string>& header);
};

/// Sinusoidal positional encoding [steps, width]: sin on even columns,
/// cos on odd ones, frequencies 10000^(-2i/width).
Tensor sinusoidal_encoding(std::size_t steps, std::size_t width);

/// Per-architecture learning-rate and local-epoch defaults.
double default_learning_rate(Arch a);
std::size_t default_local_epochs(Arch a);

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 2;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double prox_mu = 0.0;
  bool prox_include_batchnorm = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ParamSet init_model(const ModelSpec& spec, std::uint64_t seed);

/// Model input [B, H+1, |features|+1] (throughput history as the last
/// channel) and targets [B, F].
struct Batch {
  Tensor inputs;
  Tensor targets;
};
Batch make_batch(const ModelSpec& spec, std::span<const WindowSample> samples);

/// Parameters of one graph: trainable tensors as tape variables plus the
/// batch-norm running statistics the graph reads or updates.
struct GraphParams {
  std::map<std::string, ad::Var> vars;
  std::map<std::string, Tensor*> running;

  /// Creates a leaf per trainable entry (in entry order) and points running
  /// statistics at the entries of `params`.
  static GraphParams bind(ad::Tape& tape, ParamSet& params);
  const ad::Var& var(const std::string& name) const;
  Tensor* state(const std::string& name) const;
};

/// Records the forward pass; returns predictions [B, F].
ad::Var build_forward(const ModelSpec& spec, const GraphParams& params,
                      const Tensor& inputs, bool training, ad::Tape& tape);

/// Training-mode forward updates the running statistics held in `params`.
Tensor forward(const ModelSpec& spec, ParamSet& params,
               std::span<const WindowSample> samples, bool training);
/// Eval-mode forward.
Tensor predict(const ModelSpec& spec, const ParamSet& params,
               std::span<const WindowSample> samples);

/// L = mse(pred, target) + mu/2 * ||w - anchor||^2 over the anchored
/// parameters (non-BN trainable unless cfg.prox_include_batchnorm).
ad::Var training_objective(const ModelSpec& spec, const GraphParams& params,
                           const Batch& batch, const TrainConfig& cfg,
                           const ParamSet* anchor, ad::Tape& tape);

struct LocalTrainResult {
  ParamSet params;
  double final_loss = 0.0;  // mean objective over the last epoch
};

LocalTrainResult local_train(const ModelSpec& spec, ParamSet params,
                             std::span<const WindowSample> train, const TrainConfig& cfg,
                             const ParamSet* anchor, std::uint64_t seed);

/// Forecasts stitched onto trace indices. With eval stride F the blocks tile
/// the test horizon without overlap.
struct PredictedSeries {
  std::vector<std::size_t> index;
  std::vector<double> predicted;
  std::vector<double> truth;
};
PredictedSeries predict_trace(const ModelSpec& spec, const ParamSet& params,
                              std::span<const WindowSample> windows,
                              std::size_t batch_size = 256);

}  // namespace fedcast
