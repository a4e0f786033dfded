#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "bitflow/bitcore.hpp"
#include "bitflow/bnquant.hpp"
#include "bitflow/tensor.hpp"

namespace bitflow::cli::detail {

using Rng = std::mt19937_64;

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
}

inline SignTensor random_signs(const Shape4& s, Rng& rng) {
  SignTensor t(s);
  std::bernoulli_distribution coin(0.5);
  for (auto& v : t.values()) v = coin(rng) ? 1 : -1;
  return t;
}

inline I8FeatureMap random_i8(const Shape4& s, Rng& rng) {
  I8FeatureMap t(s);
  std::uniform_int_distribution<int> dist(kI8Min, kI8Max);
  for (auto& v : t.values()) v = static_cast<std::int8_t>(dist(rng));
  return t;
}

inline ThresholdParams random_thresholds(int channels, Rng& rng) {
  ThresholdParams t;
  for (int c = 0; c < channels; ++c) {
    t.tau.push_back(static_cast<std::int16_t>(uniform_int(rng, -128, 128)));
    t.direction.push_back(uniform_int(rng, 0, 1) ? ThresholdDirection::kLessEqual
                                                 : ThresholdDirection::kGreaterEqual);
  }
  return t;
}

/// Random BN layer covering both gamma signs, tiny and huge scales, gamma == 0
/// and thresholds that land exactly on integers.
inline BNParams random_bn(int channels, Rng& rng) {
  BNParams p;
  p.gamma.resize(channels);
  p.beta.resize(channels);
  p.mu.resize(channels);
  p.sigma.resize(channels);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int c = 0; c < channels; ++c) {
    const int kind = uniform_int(rng, 0, 9);
    const double sign = u(rng) < 0 ? -1.0 : 1.0;
    p.gamma[c] = kind == 0 ? 0.0 : sign * log_uniform(rng, 1e-3, 1e3);
    p.sigma[c] = log_uniform(rng, 1e-2, 1e2);
    p.mu[c] = 200.0 * u(rng);
    p.beta[c] = 50.0 * u(rng);
    if (kind == 1) {
      // Integer mean and zero shift: the threshold is exactly mu.
      p.mu[c] = uniform_int(rng, -130, 130);
      p.beta[c] = 0.0;
    }
  }
  return p;
}

}  // namespace bitflow::cli::detail
