#include <cmath>
#include <random>

#include <doctest.h>

#include "bitflow/bnquant.hpp"

using namespace bitflow;

namespace {

BNParams one_channel(double gamma, double beta, double mu, double sigma) {
  BNParams p;
  p.gamma = Eigen::VectorXd::Constant(1, gamma);
  p.beta = Eigen::VectorXd::Constant(1, beta);
  p.mu = Eigen::VectorXd::Constant(1, mu);
  p.sigma = Eigen::VectorXd::Constant(1, sigma);
  return p;
}

BNParams random_layer(std::mt19937_64& rng, int channels) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> e(-3.0, 3.0);
  BNParams p;
  p.gamma.resize(channels);
  p.beta.resize(channels);
  p.mu.resize(channels);
  p.sigma.resize(channels);
  for (int c = 0; c < channels; ++c) {
    p.gamma[c] = (u(rng) < 0 ? -1 : 1) * std::pow(10.0, e(rng));
    p.beta[c] = 40.0 * u(rng);
    p.mu[c] = 150.0 * u(rng);
    p.sigma[c] = std::pow(10.0, e(rng) / 1.5);
  }
  return p;
}

// Exhaustive check of every 8-bit input for every channel.
void check_threshold_matches_sign(const BNParams& p) {
  const ThresholdParams t = compute_threshold(p);
  for (int c = 0; c < p.channels(); ++c)
    for (int x = kI8Min; x <= kI8Max; ++x) {
      INFO("channel " << c << " x " << x << " tau " << t.tau[c]);
      REQUIRE(threshold_bit(x, t.tau[c], t.direction[c]) == (bn_float(x, p, c) >= 0.0));
    }
}

}  // namespace

TEST_CASE("identity BN gives tau 0 with the >= direction") {
  const ThresholdParams t = compute_threshold(BNParams::identity(4));
  for (int c = 0; c < 4; ++c) {
    CHECK(t.tau[c] == 0);
    CHECK(t.direction[c] == ThresholdDirection::kGreaterEqual);
  }
}

TEST_CASE("negative gamma flips the comparison") {
  // y = -2 (x - 10) / 4 + 1 >= 0  <=>  x <= 12
  const BNParams p = one_channel(-2.0, 1.0, 10.0, 4.0);
  const ThresholdParams t = compute_threshold(p);
  CHECK(t.direction[0] == ThresholdDirection::kLessEqual);
  CHECK(t.tau[0] == 12);
  check_threshold_matches_sign(p);
}

TEST_CASE("thresholds that fall exactly on an integer keep the >= boundary") {
  // tau = 5 - 2 * 3 / 3 = 3 exactly; bn(3) == 0 must map to +1.
  const BNParams p = one_channel(3.0, 2.0, 5.0, 3.0);
  CHECK(compute_threshold(p).tau[0] == 3);
  check_threshold_matches_sign(p);
  check_threshold_matches_sign(one_channel(-3.0, 2.0, 5.0, 3.0));
}

TEST_CASE("threshold reduction is exact on random layers") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 300; ++i) check_threshold_matches_sign(random_layer(rng, 8));
}

TEST_CASE("gamma == 0 channels become constant and are reported") {
  BNParams p = BNParams::identity(3);
  p.gamma[1] = 0.0;
  p.beta[1] = -0.5;
  p.gamma[2] = 0.0;
  p.beta[2] = 0.0;
  ThresholdReport report;
  const ThresholdParams t = compute_threshold(p, &report);
  CHECK(report.gamma_zero_channels == std::vector<int>{1, 2});
  for (int x = kI8Min; x <= kI8Max; ++x) {
    CHECK_FALSE(threshold_bit(x, t.tau[1], t.direction[1]));
    CHECK(threshold_bit(x, t.tau[2], t.direction[2]));
  }
  CHECK(t.constant_channels() == std::vector<int>{1, 2});
}

TEST_CASE("thresholds beyond the 8-bit range clamp to +-128 and are constant") {
  const ThresholdParams t = compute_threshold(one_channel(1.0, -500.0, 0.0, 1.0));
  CHECK(t.tau[0] == 128);
  CHECK(t.constant_channels() == std::vector<int>{0});
  const ThresholdParams u = compute_threshold(one_channel(1.0, 500.0, 0.0, 1.0));
  CHECK(u.tau[0] == -128);
}

TEST_CASE("apply_threshold packs the decisions") {
  ThresholdParams t;
  t.tau = {0, 5};
  t.direction = {ThresholdDirection::kGreaterEqual, ThresholdDirection::kLessEqual};
  I8FeatureMap x({1, 1, 3, 2});
  x.values() = {-1, 4, 0, 5, 1, 6};
  const BitPlaneTensor b = apply_threshold(x, t);
  CHECK_FALSE(b.bit(0, 0, 0, 0));
  CHECK(b.bit(0, 0, 0, 1));
  CHECK(b.bit(0, 0, 1, 0));
  CHECK(b.bit(0, 0, 1, 1));
  CHECK(b.bit(0, 0, 2, 0));
  CHECK_FALSE(b.bit(0, 0, 2, 1));
}

TEST_CASE("range bits clip at both ends of the 16-bit word") {
  CHECK(range_bits_for(Eigen::VectorXd::Constant(1, 0.4)) == 0);
  CHECK(range_bits_for(Eigen::VectorXd::Constant(1, 1.0)) == 0);
  CHECK(range_bits_for(Eigen::VectorXd::Constant(1, 1.5)) == 1);
  CHECK(range_bits_for(Eigen::VectorXd::Constant(1, -100.0)) == 7);
  CHECK(range_bits_for(Eigen::VectorXd::Constant(1, 40000.0)) == 15);
  CHECK(range_bits_for(Eigen::VectorXd::Zero(3)) == 0);
  const Eigen::VectorXd vars[] = {Eigen::VectorXd::Constant(1, 0.4), Eigen::VectorXd::Constant(1, 40000.0)};
  CHECK(qformat_fit(std::span(vars, 1)).frac_bits() == 15);
  CHECK(qformat_fit(std::span(vars, 2)).frac_bits() == 0);
  CHECK_THROWS_AS(qformat_fit({}), Error);
}

TEST_CASE("rounding goes half away from zero") {
  CHECK(round_half_away(2.5) == 3);
  CHECK(round_half_away(-2.5) == -3);
  CHECK(round_half_away(2.4999) == 2);
  CHECK(round_half_away(-0.5) == -1);
  CHECK(round_half_away(0.0) == 0);
}

TEST_CASE("quantized BN variables stay within half an LSB") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    BNParams p = random_layer(rng, 6);
    for (int c = 0; c < 6; ++c) {
      p.sigma[c] = std::max(p.sigma[c], 0.5);
      p.gamma[c] = std::clamp(p.gamma[c], -50.0, 50.0);
    }
    const QuantizedBN q = quantize_bn(p);
    const double half = std::ldexp(1.0, -q.tables.format.frac_bits() - 1);
    const BNParams d = q.tables.dequantized();
    CHECK((d.gamma - p.gamma).cwiseAbs().maxCoeff() <= half);
    CHECK((d.beta - p.beta).cwiseAbs().maxCoeff() <= half);
    CHECK((d.mu - p.mu).cwiseAbs().maxCoeff() <= half);
    CHECK((d.sigma - p.sigma).cwiseAbs().maxCoeff() <= half);
    CHECK(d.gamma == q.noisy.gamma);
    CHECK(d.sigma == q.noisy.sigma);
    for (const auto* v : {&q.tables.gamma_q, &q.tables.beta_q, &q.tables.mu_q, &q.tables.sigma_q, &q.tables.m_q,
                          &q.tables.c_q}) {
      for (auto x : *v) CHECK(x >= -32767);
    }
  }
}

TEST_CASE("a value that rounds past the word widens the format") {
  // ceil(log2(1.99999)) = 1 gives 14 fractional bits, but 1.99999 * 2^14
  // rounds to 32768, one past the symmetric limit.
  const QuantizedBN q = quantize_bn(one_channel(1.99999, 0.0, 0.0, 1.0));
  CHECK(q.tables.format.range_bits == 2);
  CHECK(q.tables.gamma_q[0] == 16384);
}

TEST_CASE("sigma below one LSB is raised to one LSB") {
  const QuantizedBN q = quantize_bn(one_channel(1.0, 0.0, 20000.0, 1e-6));
  CHECK(q.tables.format.frac_bits() == 0);
  CHECK(q.tables.sigma_q[0] == 1);
}

TEST_CASE("fixed-point BN tracks clamped float BN within the stated bound") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    BNParams p = random_layer(rng, 4);
    for (int c = 0; c < 4; ++c) {
      p.sigma[c] = std::max(p.sigma[c], 0.5);
      p.gamma[c] = std::clamp(p.gamma[c], -50.0, 50.0);
    }
    const QBNParams q = quantize_bn(p).tables;
    for (int c = 0; c < 4; ++c)
      for (int x = kI8Min; x <= kI8Max; ++x) {
        const double want = std::clamp(bn_float(x, p, c), -127.0, 127.0);
        const int got = bn_q_value(x, q.m_q[c], q.c_q[c], q.mc_format.frac_bits());
        REQUIRE(std::abs(got - want) <= bn_q_error_bound(p, q, c, x));
        REQUIRE(got >= -127);
      }
  }
}

TEST_CASE("bn_q_forward applies per-channel tables") {
  BNParams p = BNParams::identity(2);
  p.gamma[1] = -1.0;
  const QBNParams q = quantize_bn(p).tables;
  I8FeatureMap x({1, 1, 2, 2});
  x.values() = {5, 5, -127, -127};
  const I8FeatureMap y = bn_q_forward(x, q);
  CHECK(y.values() == std::vector<std::int8_t>{5, -5, -127, 127});
}

TEST_CASE("QBN tables survive serialization bit-exactly") {
  std::mt19937_64 rng(2);
  BNParams p = random_layer(rng, 5);
  for (int c = 0; c < 5; ++c) p.sigma[c] = std::max(p.sigma[c], 0.5);
  p.gamma = p.gamma.cwiseMax(-50.0).cwiseMin(50.0);
  const QBNParams q = quantize_bn(p).tables;
  std::vector<std::uint8_t> bytes;
  write_qbn(bytes, q);
  CHECK(bytes.size() == 2 + 5 * 6 * 2);
  std::size_t pos = 0;
  CHECK(read_qbn(bytes, pos, 5) == q);
  CHECK(pos == bytes.size());
  pos = 0;
  bytes.pop_back();
  CHECK_THROWS_AS(read_qbn(bytes, pos, 5), Error);
}

TEST_CASE("invalid BN parameters are rejected") {
  CHECK_THROWS_AS(compute_threshold(one_channel(1.0, 0.0, 0.0, 0.0)), Error);
  CHECK_THROWS_AS(compute_threshold(one_channel(1.0, std::nan(""), 0.0, 1.0)), Error);
  BNParams p = BNParams::identity(2);
  p.mu.resize(1);
  CHECK_THROWS_AS(quantize_bn(p), Error);
}
