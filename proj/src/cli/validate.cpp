#include <algorithm>
#include <array>
#include <chrono>
#include <functional>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "bitflow/binconv.hpp"
#include "bitflow/cli.hpp"
#include "cli/fixtures.hpp"

namespace bitflow::cli {

namespace {

using detail::Rng;
using detail::uniform_int;

struct SuiteSizes {
  int conv;
  int fused;
  int threshold_sets;
  int bn_layers;
  int models;
};

SuiteSizes sizes_for(SuiteSize s) {
  if (s == SuiteSize::kTiny) return {120, 30, 1000, 100, 20};
  return {1000, 200, 10000, 1000, 200};
}

class Suite {
 public:
  explicit Suite(std::string name) : start_(std::chrono::steady_clock::now()) { r_.name = std::move(name); }

  void pass() { ++r_.cases; }
  void fail(const std::string& detail) {
    ++r_.cases;
    if (r_.mismatches++ == 0) r_.first_diff = detail;
  }
  void check(bool ok, const std::function<std::string()>& detail) { ok ? pass() : fail(detail()); }

  SuiteResult finish() {
    r_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return r_;
  }

 private:
  SuiteResult r_;
  std::chrono::steady_clock::time_point start_;
};

std::string describe(const Shape4& in, const Shape4& k, const ConvSpec& s) {
  std::ostringstream os;
  os << "input " << to_string(in) << " kernel " << to_string(k) << " stride " << s.stride_h << 'x' << s.stride_w
     << " pad " << s.pad_h << 'x' << s.pad_w;
  return os.str();
}

// First differing element of two equally shaped maps, after mapping `b`.
template <typename A, typename B, typename Map>
std::optional<std::string> first_diff(const A& a, const B& b, Map&& map) {
  if (a.shape() != b.shape()) return "shape " + to_string(a.shape()) + " vs " + to_string(b.shape());
  const Shape4& s = a.shape();
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int c = 0; c < s.c; ++c) {
          const long got = a(n, y, x, c);
          const long want = map(b(n, y, x, c));
          if (got != want) {
            std::ostringstream os;
            os << "at (n=" << n << ", y=" << y << ", x=" << x << ", c=" << c << "): got " << got << ", expected "
               << want;
            return os.str();
          }
        }
  return std::nullopt;
}

const auto kIdentity = [](auto v) { return static_cast<long>(v); };
const auto kClamp = [](auto v) { return static_cast<long>(saturate_i8(v)); };

struct ConvCase {
  Shape4 input;
  Shape4 kernel;
  ConvSpec spec;
};

ConvCase random_conv_case(Rng& rng, int max_out) {
  static constexpr int kFilters[] = {1, 3, 5};
  // Mix word-aligned, just-over and arbitrary channel counts.
  static constexpr int kChannelPicks[] = {1, 63, 64, 65, 127, 128, 129, 192, 255, 256};
  ConvCase c;
  const int f = kFilters[uniform_int(rng, 0, 2)];
  const int channels = uniform_int(rng, 0, 2) == 0 ? kChannelPicks[uniform_int(rng, 0, 9)] : uniform_int(rng, 1, 256);
  c.spec.stride_h = uniform_int(rng, 1, 2);
  c.spec.stride_w = uniform_int(rng, 1, 2);
  c.spec.pad_h = uniform_int(rng, 0, f / 2);
  c.spec.pad_w = uniform_int(rng, 0, f / 2);
  const int h = uniform_int(rng, std::max(1, f - 2 * c.spec.pad_h), 16);
  const int w = uniform_int(rng, std::max(1, f - 2 * c.spec.pad_w), 16);
  c.input = {uniform_int(rng, 1, 2), h, w, channels};
  c.kernel = {uniform_int(rng, 1, max_out), f, f, channels};
  return c;
}

SuiteResult conv_suite(int count, Rng& rng) {
  Suite suite("binconv: conv_i32 / conv_i8 vs dense oracle");
  for (int i = 0; i < count; ++i) {
    const ConvCase cc = random_conv_case(rng, 16);
    const SignTensor a = detail::random_signs(cc.input, rng);
    const SignTensor w = detail::random_signs(cc.kernel, rng);
    const ExecPolicy policy{uniform_int(rng, 1, 3)};
    const BitPlaneTensor x = pack_signs(a);
    const PackedKernelSet k = pack_weights(w);
    const I32FeatureMap expected = conv_float_oracle(a, w, cc.spec);

    const auto tag = [&](const char* what, const std::string& d) {
      return std::string(what) + " config #" + std::to_string(i) + " (" + describe(cc.input, cc.kernel, cc.spec) +
             ") " + d;
    };
    const I32FeatureMap got32 = conv_i32(x, k, cc.spec, policy);
    if (auto d = first_diff(got32, expected, kIdentity)) {
      suite.fail(tag("conv_i32", *d));
      continue;
    }
    const I8FeatureMap got8 = conv_i8(x, k, cc.spec, policy);
    if (auto d = first_diff(got8, expected, kClamp)) {
      suite.fail(tag("conv_i8", *d));
      continue;
    }
    suite.check(is_symmetric_i8(got8), [&] { return tag("conv_i8", "produced -128"); });
  }
  return suite.finish();
}

SuiteResult fused_suite(int count, Rng& rng) {
  Suite suite("binconv: conv_fused vs threshold -> pad -> conv_i8");
  for (int i = 0; i < count; ++i) {
    const ConvCase cc = random_conv_case(rng, 8);
    const I8FeatureMap x = detail::random_i8(cc.input, rng);
    const PackedKernelSet k = pack_weights(detail::random_signs(cc.kernel, rng));
    std::optional<ThresholdParams> thr;
    if (uniform_int(rng, 0, 3) != 0) thr = detail::random_thresholds(cc.input.c, rng);

    const BitPlaneTensor bits = thr ? apply_threshold(x, *thr) : pack_activations(x);
    const ConvSpec unpadded{cc.spec.stride_h, cc.spec.stride_w, 0, 0};
    const I8FeatureMap staged = conv_i8(pad_spatial(bits, cc.spec.pad_h, cc.spec.pad_w), k, unpadded);

    const int out_h = staged.shape().h;
    for (int tile : {1, 2, 3, 0, out_h}) {
      const ExecPolicy policy{uniform_int(rng, 1, 3)};
      const I8FeatureMap fused = conv_fused(x, thr ? &*thr : nullptr, k, cc.spec, {tile}, policy);
      const auto d = first_diff(fused, staged, kIdentity);
      suite.check(!d, [&] {
        return "config #" + std::to_string(i) + " (" + describe(cc.input, cc.kernel, cc.spec) + ") tile " +
               std::to_string(tile) + " " + *d;
      });
    }
  }
  return suite.finish();
}

SuiteResult threshold_suite(int sets, Rng& rng) {
  Suite suite("bnquant: apply_threshold vs sign(bn_float), all x in [-127, 127]");
  constexpr int kBatch = 16;
  I8FeatureMap x({1, 1, kI8Max - kI8Min + 1, kBatch});
  for (int v = kI8Min; v <= kI8Max; ++v)
    for (int c = 0; c < kBatch; ++c) x(0, 0, v - kI8Min, c) = static_cast<std::int8_t>(v);

  for (int done = 0; done < sets; done += kBatch) {
    const BNParams bn = detail::random_bn(kBatch, rng);
    const BitPlaneTensor bits = apply_threshold(x, compute_threshold(bn));
    for (int c = 0; c < kBatch && done + c < sets; ++c) {
      int bad = kI8Max + 1;
      for (int v = kI8Min; v <= kI8Max && bad > kI8Max; ++v) {
        if (bits.bit(0, 0, v - kI8Min, c) != (bn_float(v, bn, c) >= 0.0)) bad = v;
      }
      suite.check(bad > kI8Max, [&] {
        std::ostringstream os;
        os << std::setprecision(17) << "gamma=" << bn.gamma[c] << " beta=" << bn.beta[c] << " mu=" << bn.mu[c]
           << " sigma=" << bn.sigma[c] << " first differs at x=" << bad;
        return os.str();
      });
    }
  }
  return suite.finish();
}

// BN layer whose folded pair fits 16 bits; sigma stays above one LSB of any
// format so the half-LSB bound applies to every variable.
BNParams quantizable_bn(int channels, Rng& rng) {
  for (;;) {
    BNParams bn = detail::random_bn(channels, rng);
    for (int c = 0; c < channels; ++c) bn.sigma[c] = std::max(bn.sigma[c], 0.5);
    try {
      quantize_bn(bn);
      return bn;
    } catch (const Error&) {
    }
  }
}

SuiteResult bn_quant_suite(int layers, Rng& rng) {
  Suite suite("bnquant: Q-format error bounds and fixed-point BN");
  for (int i = 0; i < layers; ++i) {
    const BNParams bn = quantizable_bn(4, rng);
    const QuantizedBN q = quantize_bn(bn);
    const QBNParams& t = q.tables;
    const double half_lsb = std::ldexp(1.0, -t.format.frac_bits() - 1);
    const BNParams deq = t.dequantized();

    std::string err;
    const Eigen::VectorXd* orig[] = {&bn.gamma, &bn.beta, &bn.mu, &bn.sigma};
    const Eigen::VectorXd* back[] = {&deq.gamma, &deq.beta, &deq.mu, &deq.sigma};
    const char* names[] = {"gamma", "beta", "mu", "sigma"};
    for (int v = 0; v < 4 && err.empty(); ++v) {
      for (int c = 0; c < 4 && err.empty(); ++c) {
        const double e = std::abs((*orig[v])[c] - (*back[v])[c]);
        if (e > half_lsb * (1.0 + 1e-12)) {
          err = std::string(names[v]) + " channel " + std::to_string(c) + " error " + std::to_string(e) +
                " exceeds half LSB " + std::to_string(half_lsb);
        }
      }
    }
    for (const auto* table : {&t.gamma_q, &t.beta_q, &t.mu_q, &t.sigma_q, &t.m_q, &t.c_q}) {
      for (auto v : *table) {
        if (v < -32767 && err.empty()) err = "exported integer -32768";
      }
    }
    for (int c = 0; c < 4 && err.empty(); ++c) {
      for (int x = kI8Min; x <= kI8Max; ++x) {
        const double want = std::clamp(bn_float(x, bn, c), double(kI8Min), double(kI8Max));
        const int got = bn_q_value(x, t.m_q[c], t.c_q[c], t.mc_format.frac_bits());
        if (std::abs(got - want) > bn_q_error_bound(bn, t, c, x)) {
          err = "channel " + std::to_string(c) + " x=" + std::to_string(x) + ": fixed point " + std::to_string(got) +
                " vs float " + std::to_string(want);
          break;
        }
      }
    }
    suite.check(err.empty(), [&] { return "layer #" + std::to_string(i) + ": " + err; });
  }
  // Range clipping at both ends of the format.
  const auto fit = [](double v) { return qformat_fit(std::array<Eigen::VectorXd, 1>{Eigen::VectorXd::Constant(1, v)}).frac_bits(); };
  suite.check(fit(0.4) == 15, [&] { return "0.4 should fit with 15 fractional bits, got " + std::to_string(fit(0.4)); });
  suite.check(fit(40000.0) == 0,
              [&] { return "40000 should fit with 0 fractional bits, got " + std::to_string(fit(40000.0)); });
  return suite.finish();
}

// Reference forward built only from the dense oracle and scalar helpers.
I8FeatureMap reference_run(const Model& m, const RealTensor& input) {
  const Shape4 s = input.shape();
  I8FeatureMap x(s);
  for (std::size_t i = 0; i < input.size(); ++i) {
    x.data()[i] = saturate_i8(round_half_away(std::clamp<double>(input.data()[i], kI8Min, kI8Max)));
  }
  SignTensor signs(s);
  for (std::size_t i = 0; i < input.size(); ++i) signs.data()[i] = input.data()[i] >= 0.0f ? 1 : -1;

  for (const Layer& layer : m.layers) {
    if (const auto* v = std::get_if<VggBlock>(&layer)) {
      const I32FeatureMap z = conv_float_oracle(signs, unpack_bits(v->kernel), v->spec);
      I8FeatureMap out(z.shape());
      for (std::size_t i = 0; i < z.size(); ++i) {
        const int zc = saturate_i8(z.data()[i]);
        const int ch = static_cast<int>(i % z.shape().c);
        out.data()[i] = v->thr ? (threshold_bit(zc, v->thr->tau[ch], v->thr->direction[ch]) ? 1 : -1)
                               : static_cast<std::int8_t>(zc);
      }
      x = std::move(out);
    } else {
      const auto& r = std::get<ResnetBlock>(layer);
      const I32FeatureMap z = conv_float_oracle(signs, unpack_bits(r.kernel), r.spec);
      const int frac = r.qbn.mc_format.frac_bits();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const int ch = static_cast<int>(i % z.shape().c);
        const int y = bn_q_value(saturate_i8(z.data()[i]), r.qbn.m_q[ch], r.qbn.c_q[ch], frac);
        x.data()[i] = saturate_i8(static_cast<int>(x.data()[i]) + y);
      }
    }
    signs = SignTensor(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) signs.data()[i] = x.data()[i] >= 0 ? 1 : -1;
  }
  return x;
}

Model random_model(Rng& rng, Shape4& input) {
  const bool resnet = uniform_int(rng, 0, 1) == 1;
  const int layers = uniform_int(rng, 1, 3);
  int channels = uniform_int(rng, 1, 96);
  input = {uniform_int(rng, 1, 2), uniform_int(rng, 3, 9), uniform_int(rng, 3, 9), channels};
  Model m;
  for (int l = 0; l < layers; ++l) {
    const int f = uniform_int(rng, 0, 1) ? 3 : 1;
    const int out = resnet ? channels : uniform_int(rng, 1, 96);
    PackedKernelSet k = pack_weights(detail::random_signs({out, f, f, channels}, rng));
    if (resnet) {
      const BNParams bn = quantizable_bn(out, rng);
      m.layers.emplace_back(ResnetBlock{std::move(k), ConvSpec::same(f), quantize_bn(bn).tables});
    } else {
      std::optional<ThresholdParams> thr;
      if (l + 1 < layers || uniform_int(rng, 0, 1)) thr = detail::random_thresholds(out, rng);
      const ConvSpec spec{uniform_int(rng, 1, 2), uniform_int(rng, 1, 2), f / 2, f / 2};
      m.layers.emplace_back(VggBlock{std::move(k), spec, std::move(thr)});
    }
    channels = out;
  }
  return m;
}

SuiteResult netgraph_suite(int count, Rng& rng) {
  Suite suite("netgraph: run_model vs oracle pipeline, save/load round trip");
  std::uniform_real_distribution<float> value(-140.0f, 140.0f);
  for (int i = 0; i < count; ++i) {
    Shape4 in_shape;
    const Model m = random_model(rng, in_shape);
    RealTensor input(in_shape);
    for (auto& v : input.values()) v = value(rng);

    const I8FeatureMap got = run_model(m, input);
    if (auto d = first_diff(got, reference_run(m, input), kIdentity)) {
      suite.fail("model #" + std::to_string(i) + ": run_model " + *d);
      continue;
    }
    const std::vector<std::uint8_t> bytes = serialize_model(m);
    const Model back = parse_model(bytes);
    if (!(back == m)) {
      suite.fail("model #" + std::to_string(i) + ": parse(serialize(m)) != m");
      continue;
    }
    if (auto d = first_diff(run_model(back, input), got, kIdentity)) {
      suite.fail("model #" + std::to_string(i) + ": reloaded model " + *d);
      continue;
    }
    std::vector<std::uint8_t> corrupt = bytes;
    const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, corrupt.size() - 1)(rng);
    corrupt[pos] ^= static_cast<std::uint8_t>(uniform_int(rng, 1, 255));
    bool detected = false;
    try {
      parse_model(corrupt);
    } catch (const Error&) {
      detected = true;
    }
    suite.check(detected,
                [&] { return "model #" + std::to_string(i) + ": corruption at byte " + std::to_string(pos) + " not detected"; });
  }
  return suite.finish();
}

}  // namespace

SuiteSize parse_suite_size(std::string_view name) {
  if (name == "tiny") return SuiteSize::kTiny;
  if (name == "full") return SuiteSize::kFull;
  throw UsageError("unknown size '" + std::string(name) + "' (expected tiny or full)");
}

bool ValidateReport::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.mismatches == 0; });
}

long ValidateReport::conv_configs() const {
  for (const auto& s : suites) {
    if (s.name.starts_with("binconv: conv_i32")) return s.cases;
  }
  return 0;
}

ValidateReport run_validate(const ValidateOptions& options, std::ostream* log) {
  const SuiteSizes n = sizes_for(options.size);
  ValidateReport report;
  // Each suite gets its own stream so sizes can change without reshuffling others.
  std::uint64_t stream = 0;
  const auto run = [&](auto&& fn, int count) {
    Rng rng(options.seed + 0x9E3779B97F4A7C15ull * ++stream);
    report.suites.push_back(fn(count, rng));
    if (log) {
      const auto& s = report.suites.back();
      *log << (s.mismatches ? "FAIL " : "ok   ") << s.name << " (" << s.cases << " cases, " << std::fixed
           << std::setprecision(2) << s.seconds << " s)\n";
      log->unsetf(std::ios::floatfield);
    }
  };
  run(conv_suite, n.conv);
  run(fused_suite, n.fused);
  run(threshold_suite, n.threshold_sets);
  run(bn_quant_suite, n.bn_layers);
  run(netgraph_suite, n.models);
  return report;
}

void print_validate_report(const ValidateReport& r, std::ostream& out) {
  for (const auto& s : r.suites) {
    out << (s.mismatches ? "FAIL " : "PASS ") << s.name << ": " << s.cases << " cases, " << s.mismatches
        << " mismatches\n";
    if (s.mismatches) out << "     first diff: " << s.first_diff << '\n';
  }
  out << (r.passed() ? "validate: PASS" : "validate: FAIL") << " (" << r.conv_configs()
      << " conv configs checked against the dense oracle)\n";
}

}  // namespace bitflow::cli
