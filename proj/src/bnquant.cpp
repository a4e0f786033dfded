#include "bitflow/bnquant.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "byte_io.hpp"

namespace bitflow {

namespace {

constexpr std::int64_t kI16Limit = 32767;  // symmetric: -32768 is never exported

int clamp_tau(double t) { return static_cast<int>(std::clamp(t, -128.0, 128.0)); }

struct RoundedVariable {
  std::vector<std::int16_t> ints;
  Eigen::VectorXd values;  // ints * 2^-frac_bits
};

// Returns false when some value does not fit the 16-bit word.
bool round_to_format(const Eigen::VectorXd& w, const QFormat& fmt, RoundedVariable& out) {
  const double scale = std::ldexp(1.0, fmt.frac_bits());
  out.ints.resize(w.size());
  out.values.resize(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const std::int64_t q = round_half_away(w[i] * scale);
    if (q > kI16Limit || q < -kI16Limit) return false;
    out.ints[i] = static_cast<std::int16_t>(q);
    out.values[i] = static_cast<double>(q) / scale;
  }
  return true;
}

// Fits a shared format, widening the range while rounding overflows.
QFormat fit_and_round(std::span<const Eigen::VectorXd> vars, std::vector<RoundedVariable>& out) {
  QFormat fmt = qformat_fit(vars);
  out.assign(vars.size(), {});
  for (;;) {
    bool ok = true;
    for (std::size_t v = 0; v < vars.size() && ok; ++v) ok = round_to_format(vars[v], fmt, out[v]);
    if (ok) return fmt;
    if (fmt.range_bits >= 15) throw Error("quantize_bn: value exceeds the 16-bit range");
    ++fmt.range_bits;
  }
}

}  // namespace

BNParams BNParams::identity(int channels) {
  BNParams p;
  p.gamma = Eigen::VectorXd::Ones(channels);
  p.beta = Eigen::VectorXd::Zero(channels);
  p.mu = Eigen::VectorXd::Zero(channels);
  p.sigma = Eigen::VectorXd::Ones(channels);
  return p;
}

void BNParams::validate() const {
  const auto n = gamma.size();
  if (n == 0) throw Error("BNParams: no channels");
  if (beta.size() != n || mu.size() != n || sigma.size() != n) {
    throw Error("BNParams: vector lengths differ");
  }
  if (!gamma.allFinite() || !beta.allFinite() || !mu.allFinite() || !sigma.allFinite()) {
    throw Error("BNParams: non-finite parameter");
  }
  if ((sigma.array() <= 0.0).any()) throw Error("BNParams: sigma must be positive");
}

double bn_float(double x, const BNParams& p, int channel) {
  return p.gamma[channel] * (x - p.mu[channel]) / p.sigma[channel] + p.beta[channel];
}

void ThresholdParams::validate() const {
  if (tau.empty()) throw Error("ThresholdParams: no channels");
  if (direction.size() != tau.size()) throw Error("ThresholdParams: tau/direction length mismatch");
  for (auto t : tau) {
    if (t < -128 || t > 128) throw Error("ThresholdParams: tau outside [-128, 128]");
  }
}

std::vector<int> ThresholdParams::constant_channels() const {
  std::vector<int> out;
  for (int ch = 0; ch < channels(); ++ch) {
    const int t = tau[ch];
    const bool constant = direction[ch] == ThresholdDirection::kGreaterEqual
                              ? (t <= kI8Min || t > kI8Max)
                              : (t >= kI8Max || t < kI8Min);
    if (constant) out.push_back(ch);
  }
  return out;
}

ThresholdParams compute_threshold(const BNParams& p, ThresholdReport* report) {
  p.validate();
  const int channels = p.channels();
  ThresholdParams t;
  t.tau.resize(channels);
  t.direction.resize(channels);
  ThresholdReport local;

  for (int ch = 0; ch < channels; ++ch) {
    const double gamma = p.gamma[ch];
    const auto positive = [&](int x) { return bn_float(x, p, ch) >= 0.0; };

    if (gamma == 0.0) {
      // BN collapses to beta everywhere.
      t.direction[ch] = ThresholdDirection::kGreaterEqual;
      t.tau[ch] = p.beta[ch] >= 0.0 ? -128 : 128;
      local.gamma_zero_channels.push_back(ch);
      continue;
    }

    const double tau_real = p.mu[ch] - p.beta[ch] * p.sigma[ch] / gamma;
    int tau;
    if (gamma / p.sigma[ch] >= 0.0) {
      t.direction[ch] = ThresholdDirection::kGreaterEqual;
      tau = clamp_tau(std::ceil(tau_real));
      // bn_float is monotone in x even in floating point, so nudging the
      // integer boundary against it makes the comparison exact.
      while (tau > -128 && positive(tau - 1)) --tau;
      while (tau < 128 && !positive(tau)) ++tau;
    } else {
      t.direction[ch] = ThresholdDirection::kLessEqual;
      tau = clamp_tau(std::floor(tau_real));
      while (tau < 128 && positive(tau + 1)) ++tau;
      while (tau > -128 && !positive(tau)) --tau;
    }
    t.tau[ch] = static_cast<std::int16_t>(tau);
  }

  local.constant_channels = t.constant_channels();
  if (report) *report = std::move(local);
  return t;
}

BitPlaneTensor apply_threshold(const I8FeatureMap& x, const ThresholdParams& t) {
  t.validate();
  const Shape4& s = x.shape();
  if (s.c != t.channels()) {
    throw Error("apply_threshold: feature map has " + std::to_string(s.c) + " channels, thresholds " +
                std::to_string(t.channels()));
  }
  BitPlaneTensor out(s);
  const std::int8_t* src = x.data();
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int xx = 0; xx < s.w; ++xx) {
        auto dst = out.pixel(n, y, xx);
        for (int c = 0; c < s.c; ++c, ++src) {
          if (threshold_bit(*src, t.tau[c], t.direction[c])) {
            dst[c / kWordBits] |= std::uint64_t{1} << (c % kWordBits);
          }
        }
      }
  return out;
}

double QFormat::resolution() const { return std::ldexp(1.0, -frac_bits()); }

int range_bits_for(const Eigen::VectorXd& values) {
  if (values.size() == 0) return 0;
  if (!values.allFinite()) throw Error("qformat_fit: non-finite value");
  const double peak = values.cwiseAbs().maxCoeff();
  if (peak == 0.0) return 0;
  const double bits = std::ceil(std::log2(peak));
  return static_cast<int>(std::clamp(bits, 0.0, 15.0));
}

QFormat qformat_fit(std::span<const Eigen::VectorXd> variables) {
  bool any = false;
  int range = 0;
  for (const auto& v : variables) {
    if (v.size() == 0) continue;
    any = true;
    range = std::max(range, range_bits_for(v));
  }
  if (!any) throw Error("qformat_fit: empty input");
  return QFormat{range};
}

std::int64_t round_half_away(double v) {
  return static_cast<std::int64_t>(v < 0.0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5));
}

void QBNParams::validate() const {
  const auto n = gamma_q.size();
  if (n == 0) throw Error("QBNParams: no channels");
  if (beta_q.size() != n || mu_q.size() != n || sigma_q.size() != n || m_q.size() != n ||
      c_q.size() != n) {
    throw Error("QBNParams: table lengths differ");
  }
  if (format.range_bits < 0 || format.range_bits > 15 || mc_format.range_bits < 0 ||
      mc_format.range_bits > 15) {
    throw Error("QBNParams: range_bits outside [0, 15]");
  }
  for (auto s : sigma_q) {
    if (s <= 0) throw Error("QBNParams: sigma must be positive");
  }
}

double QBNParams::m(int channel) const { return m_q[channel] * mc_format.resolution(); }
double QBNParams::c(int channel) const { return c_q[channel] * mc_format.resolution(); }

BNParams QBNParams::dequantized() const {
  const double r = format.resolution();
  BNParams p;
  const auto load = [&](const std::vector<std::int16_t>& v) {
    Eigen::VectorXd out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * r;
    return out;
  };
  p.gamma = load(gamma_q);
  p.beta = load(beta_q);
  p.mu = load(mu_q);
  p.sigma = load(sigma_q);
  return p;
}

void fold_deployment_pair(QBNParams& q) {
  const BNParams d = q.dequantized();
  const std::array<Eigen::VectorXd, 2> pair{
      (d.gamma.array() / d.sigma.array()).matrix(),
      (d.beta.array() - d.gamma.array() * d.mu.array() / d.sigma.array()).matrix()};
  std::vector<RoundedVariable> rounded;
  q.mc_format = fit_and_round(pair, rounded);
  q.m_q = rounded[0].ints;
  q.c_q = rounded[1].ints;
}

QuantizedBN quantize_bn(const BNParams& p) {
  p.validate();
  const std::array<Eigen::VectorXd, 4> vars{p.gamma, p.beta, p.mu, p.sigma};
  std::vector<RoundedVariable> rounded;
  QuantizedBN out;
  out.tables.format = fit_and_round(vars, rounded);

  // A positive sigma that rounds to zero would make the folded multiplier
  // infinite; keep it at one LSB.
  for (Eigen::Index i = 0; i < rounded[3].values.size(); ++i) {
    if (rounded[3].ints[i] == 0) {
      rounded[3].ints[i] = 1;
      rounded[3].values[i] = out.tables.format.resolution();
    }
  }

  out.tables.gamma_q = rounded[0].ints;
  out.tables.beta_q = rounded[1].ints;
  out.tables.mu_q = rounded[2].ints;
  out.tables.sigma_q = rounded[3].ints;
  out.noisy.gamma = rounded[0].values;
  out.noisy.beta = rounded[1].values;
  out.noisy.mu = rounded[2].values;
  out.noisy.sigma = rounded[3].values;
  fold_deployment_pair(out.tables);
  return out;
}

std::int8_t bn_q_value(int x, std::int16_t m_q, std::int16_t c_q, int mc_frac_bits) {
  const std::int32_t acc = static_cast<std::int32_t>(m_q) * x + c_q;
  if (mc_frac_bits == 0) return saturate_i8(acc);
  const std::int32_t half = std::int32_t{1} << (mc_frac_bits - 1);
  const std::int32_t y = acc >= 0 ? (acc + half) >> mc_frac_bits : -((-acc + half) >> mc_frac_bits);
  return saturate_i8(y);
}

I8FeatureMap bn_q_forward(const I8FeatureMap& x, const QBNParams& q) {
  q.validate();
  const Shape4& s = x.shape();
  if (s.c != q.channels()) throw Error("bn_q_forward: channel count mismatch");
  I8FeatureMap out(s);
  const int frac = q.mc_format.frac_bits();
  const std::size_t pixels = x.size() / s.c;
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::int8_t* src = x.data() + p * s.c;
    std::int8_t* dst = out.data() + p * s.c;
    for (int c = 0; c < s.c; ++c) dst[c] = bn_q_value(src[c], q.m_q[c], q.c_q[c], frac);
  }
  return out;
}

double bn_q_error_bound(const BNParams& original, const QBNParams& q, int channel, int x) {
  const double g = original.gamma[channel];
  const double s = original.sigma[channel];
  const double m_true = g / s;
  const double c_true = original.beta[channel] - g * original.mu[channel] / s;
  const double eps_m = std::abs(q.m(channel) - m_true);
  const double eps_c = std::abs(q.c(channel) - c_true);
  // 1e-9 covers the floating-point evaluation of bn_float itself.
  return std::abs(x) * eps_m + eps_c + 0.5 + 1e-9;
}

void write_qbn(std::vector<std::uint8_t>& out, const QBNParams& q) {
  q.validate();
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(q.format.frac_bits()));
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(q.mc_format.frac_bits()));
  for (int ch = 0; ch < q.channels(); ++ch) {
    for (auto v : {q.gamma_q[ch], q.beta_q[ch], q.mu_q[ch], q.sigma_q[ch], q.m_q[ch], q.c_q[ch]}) {
      detail::put_le<std::int16_t>(out, v);
    }
  }
}

QBNParams read_qbn(std::span<const std::uint8_t> in, std::size_t& pos, int channels) {
  QBNParams q;
  const int frac = detail::get_le<std::uint8_t>(in, pos);
  const int mc_frac = detail::get_le<std::uint8_t>(in, pos);
  if (frac > 15 || mc_frac > 15) throw Error("model file: frac_bits outside [0, 15]");
  q.format.range_bits = 15 - frac;
  q.mc_format.range_bits = 15 - mc_frac;
  for (auto* v : {&q.gamma_q, &q.beta_q, &q.mu_q, &q.sigma_q, &q.m_q, &q.c_q}) v->resize(channels);
  for (int ch = 0; ch < channels; ++ch) {
    q.gamma_q[ch] = detail::get_le<std::int16_t>(in, pos);
    q.beta_q[ch] = detail::get_le<std::int16_t>(in, pos);
    q.mu_q[ch] = detail::get_le<std::int16_t>(in, pos);
    q.sigma_q[ch] = detail::get_le<std::int16_t>(in, pos);
    q.m_q[ch] = detail::get_le<std::int16_t>(in, pos);
    q.c_q[ch] = detail::get_le<std::int16_t>(in, pos);
  }
  q.validate();
  return q;
}

}  // namespace bitflow
