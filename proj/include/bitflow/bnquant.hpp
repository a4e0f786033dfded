#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "bitflow/bitcore.hpp"
#include "bitflow/tensor.hpp"

namespace bitflow {

/// Per-channel Batch-Norm parameters: y = gamma * (x - mu) / sigma + beta.
struct BNParams {
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;

  static BNParams identity(int channels);

  int channels() const { return static_cast<int>(gamma.size()); }
  /// Throws unless all four vectors share a length, are finite and sigma > 0.
  void validate() const;
};

double bn_float(double x, const BNParams& p, int channel);

enum class ThresholdDirection : std::uint8_t {
  kGreaterEqual = 0,  // +1 iff x >= tau
  kLessEqual = 1,     // +1 iff x <= tau
};

/// Integer thresholds that replace sign(BN(x)) for 8-bit x.
struct ThresholdParams {
  std::vector<std::int16_t> tau;  // each in [-128, 128]
  std::vector<ThresholdDirection> direction;

  int channels() const { return static_cast<int>(tau.size()); }
  void validate() const;

  /// Channels whose decision is the same for every x in [-127, 127].
  std::vector<int> constant_channels() const;

  bool operator==(const ThresholdParams&) const = default;
};

inline bool threshold_bit(int x, std::int16_t tau, ThresholdDirection dir) {
  return dir == ThresholdDirection::kGreaterEqual ? x >= tau : x <= tau;
}

struct ThresholdReport {
  std::vector<int> gamma_zero_channels;
  std::vector<int> constant_channels;  // includes gamma == 0 channels
};

/// tau = mu - beta * sigma / gamma, rounded up (GE) or down (LE) to an integer
/// and clamped to [-128, 128]. gamma == 0 channels become constant +1 (beta >= 0)
/// or constant -1 and are listed in `report`.
ThresholdParams compute_threshold(const BNParams& p, ThresholdReport* report = nullptr);

BitPlaneTensor apply_threshold(const I8FeatureMap& x, const ThresholdParams& t);

/// Fixed-point split of a signed 16-bit word: 1 sign bit, range_bits integer
/// bits, 15 - range_bits fractional bits.
struct QFormat {
  int range_bits = 0;

  int frac_bits() const { return 15 - range_bits; }
  double resolution() const;
  bool operator==(const QFormat&) const = default;
};

/// Range bits for one variable: clip(ceil(log2(max|v|)), 0, 15).
int range_bits_for(const Eigen::VectorXd& values);

/// Shared layer format: the widest range over all variables.
QFormat qformat_fit(std::span<const Eigen::VectorXd> variables);

/// Round half away from zero.
std::int64_t round_half_away(double v);

/// Quantized BN tables for one layer.
struct QBNParams {
  QFormat format;                     // shared by gamma, beta, mu, sigma
  std::vector<std::int16_t> gamma_q;  // value = int * 2^-frac_bits
  std::vector<std::int16_t> beta_q;
  std::vector<std::int16_t> mu_q;
  std::vector<std::int16_t> sigma_q;

  // Deployment pair y = m * x + c, in its own shared Q-format.
  QFormat mc_format;
  std::vector<std::int16_t> m_q;
  std::vector<std::int16_t> c_q;

  int channels() const { return static_cast<int>(gamma_q.size()); }
  void validate() const;

  double m(int channel) const;
  double c(int channel) const;
  /// The four BN variables dequantized.
  BNParams dequantized() const;

  bool operator==(const QBNParams&) const = default;
};

struct QuantizedBN {
  QBNParams tables;
  /// Float parameters with quantization noise injected (w_q), for retraining.
  BNParams noisy;
};

QuantizedBN quantize_bn(const BNParams& p);

/// Rebuilds the folded multiplier/bias pair from the quantized BN variables.
void fold_deployment_pair(QBNParams& q);

/// round(m * x + c) computed in fixed point, saturated to [-127, 127].
std::int8_t bn_q_value(int x, std::int16_t m_q, std::int16_t c_q, int mc_frac_bits);

I8FeatureMap bn_q_forward(const I8FeatureMap& x, const QBNParams& q);

/// Per-channel bound on |bn_q_forward(x) - clamp(bn_float(x))| for input x.
double bn_q_error_bound(const BNParams& original, const QBNParams& q, int channel, int x);

/// Table serialization: frac_bits, mc_frac_bits, then per channel
/// (gamma, beta, mu, sigma, m, c) as little-endian int16.
void write_qbn(std::vector<std::uint8_t>& out, const QBNParams& q);
/// Reads `channels` channels starting at `pos`, advancing it.
QBNParams read_qbn(std::span<const std::uint8_t> in, std::size_t& pos, int channels);

}  // namespace bitflow
