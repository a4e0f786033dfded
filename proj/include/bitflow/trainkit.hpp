#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bitflow/bnquant.hpp"
#include "bitflow/netgraph.hpp"
#include "bitflow/tensor.hpp"

namespace bitflow::train {

// ---------------------------------------------------------------------------
// Surrogate operators
// ---------------------------------------------------------------------------

struct SurrogateResult {
  double value;
  int grad_mask;  // 0 or 1
};

/// Forward sign (sign(0) = +1); gradient passes iff -1 <= x <= 1.
SurrogateResult ste_sign(double x);

/// Forward clamp to [-127, 127]; gradient passes iff -127 <= x <= 127.
SurrogateResult clip_i8_surrogate(double x);

enum class SurrogateOp {
  kSignClamp,  // A(x) = max(-1, min(1, x)), the function whose slope STE uses
  kClipI8,
};

struct GradCheckReport {
  double max_abs_error = 0.0;
  int checked = 0;
  int skipped = 0;  // points too close to a kink
};

/// Central differences of the surrogate's forward function against its mask.
GradCheckReport grad_check(SurrogateOp op, std::span<const double> points, double step = 1e-4);

// ---------------------------------------------------------------------------
// Toy task
// ---------------------------------------------------------------------------

struct Dataset {
  int height = 0;
  int width = 0;
  int channels = 0;
  Eigen::MatrixXd images;   // one sample per row, NHWC-flattened, integer valued
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  /// Samples `rows` as an NHWC tensor.
  RealTensor batch(std::span<const int> rows) const;
};

struct ModelConfig {
  int blocks = 3;
  int channels = 16;
  int filter = 5;
  double gamma_init = 32.0;
  double readout_scale = 1.0 / 64.0;
  /// Readout pools over a pool_grid x pool_grid partition of the image.
  int pool_grid = 2;
};

struct ToyTaskConfig {
  std::uint64_t seed = 0xB17F10;
  int train_size = 1500;
  int val_size = 600;
  int height = 12;
  int width = 12;
  int channels = 16;
  int classes = 10;
  double amplitude = 60.0;
  double noise = 10.0;
  ModelConfig model;
};

/// Class k draws every (pixel, channel) sign independently: it agrees with a
/// fixed per-channel code with probability 0.5 + 0.5 * k / (classes - 1).
/// Values are sign * code * amplitude * U(0.6, 1.2) per sample, plus Gaussian
/// noise, rounded to integers in [-127, 127]. Aligned kernels respond with
/// sums well past 127 on the upper classes.
struct ToyTask {
  ToyTaskConfig config;
  Dataset train;
  Dataset val;
};

ToyTask make_toy_task(const ToyTaskConfig& config);

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

enum class Stage { kWarmup, kClipped };

struct OptimizerConfig {
  double learning_rate = 0.5;
  double momentum = 0.9;
  int batch_size = 50;
};

struct BlockState {
  /// Latent weights, out_channels x (filter * filter * in_channels), columns
  /// ordered (fy, fx, c) to match the packed kernel layout.
  Eigen::MatrixXd weights;
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  Eigen::VectorXd running_mean;
  Eigen::VectorXd running_var;
  /// Set once the layer is quantized: eval-mode BN with these fixed values.
  std::optional<BNParams> frozen_bn;

  Eigen::MatrixXd weights_velocity;
  Eigen::VectorXd gamma_velocity;
  Eigen::VectorXd beta_velocity;

  /// BN in (gamma, beta, mu, sigma) form with sigma = sqrt(running_var + eps),
  /// or the frozen values.
  BNParams bn_params() const;
};

struct EpochRecord {
  int epoch;
  std::string split;
  double loss;
  double accuracy;
};

struct TrainState {
  ModelConfig model;
  OptimizerConfig optimizer;
  int in_channels = 0;
  int classes = 0;
  std::vector<BlockState> blocks;
  Eigen::MatrixXd readout;  // classes x (pool_grid^2 * channels)
  Eigen::VectorXd readout_bias;
  Eigen::MatrixXd readout_velocity;
  Eigen::VectorXd readout_bias_velocity;
  Stage stage = Stage::kWarmup;
  int epoch = 0;
  std::uint64_t shuffle_seed = 0;
  std::vector<EpochRecord> history;
  /// Filled by bn_quantize_retrain, one table per block.
  std::vector<QBNParams> exported;

  bool clip_enabled() const { return stage == Stage::kClipped; }
};

TrainState init_state(const ToyTask& task, OptimizerConfig optimizer = {});

/// Warm-up stage: no range constraints.
TrainState train_stage1(const ToyTask& task, int epochs, OptimizerConfig optimizer = {});

/// Clipped stage: every conv output clamped to [-127, 127].
TrainState train_stage2(TrainState state, const ToyTask& task, int epochs);

/// Runs epochs with an explicit clip flag. The learning rate follows a cosine
/// decay from optimizer.learning_rate * lr_scale over `epochs`.
void run_epochs(TrainState& state, const ToyTask& task, int epochs, bool clip, double lr_scale = 1.0);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;  // percent
  std::vector<int> predictions;
  /// Largest |conv output| seen before clipping.
  double peak_conv = 0.0;
  /// Fraction of conv outputs with |value| > 127.
  double saturation_rate = 0.0;
};

/// Float forward with running BN statistics.
Evaluation evaluate(const TrainState& state, const Dataset& data, bool clip);

struct QuantizeOptions {
  int retrain_epochs = 2;
  /// Retraining learning rate relative to the optimizer's.
  double lr_scale = 0.1;
};

/// Freezes and quantizes BN layers one at a time, retraining the rest after
/// each step. Fills state.exported.
TrainState bn_quantize_retrain(TrainState state, const ToyTask& task, QuantizeOptions options = {});

/// Forward pass that emulates the deployed 8-bit integer pipeline using
/// state.exported; returns the final 8-bit features for each sample.
std::vector<I8FeatureMap> deployed_features(const TrainState& state, const Dataset& data);
Evaluation evaluate_deployed(const TrainState& state, const Dataset& data);

/// Readout: average pool per grid cell, scale, dense layer; returns the class index.
int predict_class(const TrainState& state, const I8FeatureMap& features);

/// Model with ResNet blocks carrying state.exported tables.
Model export_model(const TrainState& state);
/// Model with float BN layers (running statistics), for `convert`.
Model export_float_model(const TrainState& state);

/// epoch,split,loss,accuracy
void write_curves_csv(const TrainState& state, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Gradients (exposed for finite-difference checks)
// ---------------------------------------------------------------------------

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> gamma;
  std::vector<Eigen::VectorXd> beta;
  Eigen::MatrixXd readout;
  Eigen::VectorXd readout_bias;
};

/// Mean cross-entropy over `rows` with batch-statistics BN (frozen blocks use
/// their fixed parameters). Fills `grads` when non-null.
double loss_and_gradients(const TrainState& state, const Dataset& data, std::span<const int> rows, bool clip,
                          Gradients* grads);

}  // namespace bitflow::train
