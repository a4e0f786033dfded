#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "bitflow/binconv.hpp"
#include "bitflow/cli.hpp"
#include "cli/fixtures.hpp"

namespace bitflow::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) throw UsageError("bench config: " + key + " expects an integer");
  return v;
}

void set_key(BenchConfig& c, const std::string& key, const std::string& value) {
  LayerShape& l = c.layer;
  if (key == "name") {
    l.name = value;
  } else if (key == "h") {
    l.height = parse_int(key, value);
  } else if (key == "w") {
    l.width = parse_int(key, value);
  } else if (key == "cin") {
    l.in_channels = parse_int(key, value);
  } else if (key == "cout") {
    l.out_channels = parse_int(key, value);
  } else if (key == "filter") {
    l.filter = parse_int(key, value);
  } else if (key == "stride") {
    l.stride = parse_int(key, value);
  } else if (key == "pad") {
    l.pad = parse_int(key, value);
  } else if (key == "variants") {
    c.variants = parse_variants(value);
  } else if (key == "repeats") {
    c.repeats = parse_int(key, value);
  } else if (key == "warmup") {
    c.warmup = parse_int(key, value);
  } else if (key == "threads") {
    c.workers = parse_int(key, value);
  } else {
    throw UsageError("bench config: unknown key '" + key + "'");
  }
}

std::string default_name(const LayerShape& l) {
  std::ostringstream os;
  os << l.height << 'x' << l.width << 'x' << l.in_channels << "-" << l.out_channels << "-k" << l.filter << "s"
     << l.stride;
  return os.str();
}

LayerShape layer(const char* name, int hw, int cin, int cout, int stride) {
  return {name, hw, hw, cin, cout, 3, stride, 1};
}

struct Workload {
  I8FeatureMap input;
  ThresholdParams thr;
  PackedKernelSet kernel;
  ConvSpec spec;
  ConvSpec unpadded;
};

Workload make_workload(const LayerShape& l, std::uint64_t seed) {
  detail::Rng rng(seed);
  Workload w{detail::random_i8({1, l.height, l.width, l.in_channels}, rng),
             detail::random_thresholds(l.in_channels, rng),
             pack_weights(detail::random_signs({l.out_channels, l.filter, l.filter, l.in_channels}, rng)),
             {l.stride, l.stride, l.pad, l.pad},
             {l.stride, l.stride, 0, 0}};
  return w;
}

I32FeatureMap staged_i32(const Workload& w, ExecPolicy p) {
  const BitPlaneTensor bits = apply_threshold(w.input, w.thr);
  const BitPlaneTensor padded = pad_spatial(bits, w.spec.pad_h, w.spec.pad_w);
  return conv_i32(padded, w.kernel, w.unpadded, p);
}

I8FeatureMap fused_i8(const Workload& w, ExecPolicy p) {
  return conv_fused(w.input, &w.thr, w.kernel, w.spec, {}, p);
}

I32FeatureMap float_reference(const Workload& w) {
  return conv_float_oracle(unpack_bits(apply_threshold(w.input, w.thr)), unpack_bits(w.kernel), w.spec);
}

template <typename A, typename B, typename Map>
void require_equal(const std::string& config, const char* what, const A& got, const B& expected, Map&& map) {
  if (got.shape() != expected.shape()) {
    throw MismatchError(config + ": " + what + " shape " + to_string(got.shape()) + " vs " +
                        to_string(expected.shape()));
  }
  const Shape4& s = got.shape();
  long diffs = 0;
  std::string first;
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int c = 0; c < s.c; ++c) {
          const long g = got(n, y, x, c);
          const long e = map(expected(n, y, x, c));
          if (g == e) continue;
          if (diffs++ == 0) {
            std::ostringstream os;
            os << " first at (n=" << n << ", y=" << y << ", x=" << x << ", c=" << c << "): got " << g
               << ", expected " << e;
            first = os.str();
          }
        }
  if (diffs) {
    throw MismatchError(config + ": " + what + " disagrees on " + std::to_string(diffs) + " elements;" + first);
  }
}

struct Timing {
  double median_us;
  double min_us;
  double max_us;
};

template <typename Fn>
Timing time_it(Fn&& fn, int warmup, int repeats) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> us;
  us.reserve(repeats);
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  std::sort(us.begin(), us.end());
  const std::size_t n = us.size();
  const double median = n % 2 ? us[n / 2] : 0.5 * (us[n / 2 - 1] + us[n / 2]);
  return {median, us.front(), us.back()};
}

// Keeps the optimizer from discarding a timed result.
template <typename T>
void consume(const T& t) {
  static volatile std::int64_t sink = 0;
  if (t.size()) sink = sink + t.data()[0];
}

}  // namespace

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("BITFLOW_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 0);
    if (*end != '\0') throw UsageError(std::string("BITFLOW_SEED is not an integer: ") + env);
    return v;
  }
  return kDefaultSeed;
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kI8Fused: return "i8-fused";
    case Variant::kI32Staged: return "i32-staged";
    case Variant::kFloatReference: return "float-reference";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::kI8Fused, Variant::kI32Staged, Variant::kFloatReference}) {
    if (variant_name(v) == name) return v;
  }
  throw UsageError("unknown variant '" + std::string(name) + "' (expected i8-fused, i32-staged, float-reference)");
}

std::vector<Variant> parse_variants(std::string_view list) {
  std::vector<Variant> out;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    const auto comma = std::min(list.find(',', pos), list.size());
    const std::string item = trim(list.substr(pos, comma - pos));
    if (!item.empty()) {
      const Variant v = parse_variant(item);
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
    pos = comma + 1;
  }
  if (out.empty()) throw UsageError("empty variant list");
  return out;
}

void BenchConfig::validate() const {
  const LayerShape& l = layer;
  const std::string who = "bench config '" + l.name + "': ";
  if (l.height < 1 || l.width < 1 || l.in_channels < 1 || l.out_channels < 1 || l.filter < 1) {
    throw UsageError(who + "extents must be positive");
  }
  if (l.stride < 1 || l.pad < 0) throw UsageError(who + "stride must be >= 1 and pad >= 0");
  if (l.height + 2 * l.pad < l.filter || l.width + 2 * l.pad < l.filter) {
    throw UsageError(who + "filter larger than the padded input");
  }
  if (repeats < 5) throw UsageError(who + "repeats must be >= 5");
  if (warmup < 0) throw UsageError(who + "warmup must be >= 0");
  if (workers < 1) throw UsageError(who + "threads must be >= 1");
  if (variants.empty()) throw UsageError(who + "no variants");
}

std::vector<BenchConfig> parse_bench_config(std::istream& in) {
  std::vector<BenchConfig> out;
  std::optional<BenchConfig> cur;
  std::string line;
  int lineno = 0;
  const auto flush = [&] {
    if (!cur) return;
    if (cur->layer.name.empty()) cur->layer.name = default_name(cur->layer);
    out.push_back(std::move(*cur));
    cur.reset();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) {
      flush();
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError("bench config line " + std::to_string(lineno) + ": expected key=value");
    }
    if (!cur) cur.emplace();
    set_key(*cur, trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
  flush();
  if (out.empty()) throw UsageError("bench config: no configs");
  return out;
}

std::vector<BenchConfig> load_bench_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open bench config " + path.string());
  return parse_bench_config(f);
}

std::vector<BenchConfig> default_suite() {
  const LayerShape layers[] = {
      layer("r18-conv2-56x56x64", 56, 64, 64, 1),       layer("r18-conv3a-56x56x64-s2", 56, 64, 128, 2),
      layer("r18-conv3-28x28x128", 28, 128, 128, 1),    layer("r18-conv4a-28x28x128-s2", 28, 128, 256, 2),
      layer("r18-conv4-14x14x256", 14, 256, 256, 1),    layer("r18-conv5a-14x14x256-s2", 14, 256, 512, 2),
      layer("r18-conv5-7x7x512", 7, 512, 512, 1),       layer("r18-conv4w-14x14x128-256", 14, 128, 256, 1),
      layer("r18-conv5w-7x7x256-512", 7, 256, 512, 1),
  };
  std::vector<BenchConfig> out;
  for (const auto& l : layers) out.push_back(BenchConfig{l});
  return out;
}

void apply_overrides(std::vector<BenchConfig>& configs, const BenchOverrides& o) {
  for (auto& c : configs) {
    if (o.variants) c.variants = *o.variants;
    if (o.repeats) c.repeats = *o.repeats;
    if (o.warmup) c.warmup = *o.warmup;
    if (o.workers) c.workers = *o.workers;
    c.validate();
  }
}

BenchReport run_bench(const std::vector<BenchConfig>& configs, std::uint64_t seed) {
  for (const auto& c : configs) c.validate();
  BenchReport report;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const BenchConfig& c = configs[i];
    const std::string& name = c.layer.name;
    const Workload w = make_workload(c.layer, seed + i);
    const ExecPolicy policy{c.workers};

    const I32FeatureMap baseline = staged_i32(w, policy);
    for (Variant v : c.variants) {
      if (v == Variant::kI8Fused) {
        require_equal(name, "i8-fused vs clamp(i32-staged)", fused_i8(w, policy), baseline,
                      [](std::int32_t e) { return saturate_i8(e); });
      } else if (v == Variant::kFloatReference) {
        require_equal(name, "float-reference vs i32-staged", float_reference(w), baseline,
                      [](std::int32_t e) { return e; });
      }
    }

    const Timing base = time_it([&] { consume(staged_i32(w, policy)); }, c.warmup, c.repeats);
    for (Variant v : c.variants) {
      Timing t = base;
      if (v == Variant::kI8Fused) {
        t = time_it([&] { consume(fused_i8(w, policy)); }, c.warmup, c.repeats);
      } else if (v == Variant::kFloatReference) {
        t = time_it([&] { consume(float_reference(w)); }, c.warmup, c.repeats);
      }
      report.rows.push_back({name, v, t.median_us, t.min_us, t.max_us, base.median_us / t.median_us});
    }
  }
  return report;
}

void write_csv(const BenchReport& r, std::ostream& out) {
  out << kCsvHeader << '\n';
  out << std::fixed;
  for (const auto& row : r.rows) {
    out << row.config << ',' << variant_name(row.variant) << ',' << std::setprecision(2) << row.median_us << ','
        << row.min_us << ',' << row.max_us << ',' << std::setprecision(4) << row.ratio << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

void print_table(const BenchReport& r, std::ostream& out) {
  std::size_t width = 6;
  for (const auto& row : r.rows) width = std::max(width, row.config.size());
  out << std::left << std::setw(static_cast<int>(width) + 2) << "config" << std::setw(17) << "variant"
      << std::right << std::setw(12) << "median_us" << std::setw(12) << "min_us" << std::setw(12) << "max_us"
      << std::setw(9) << "ratio" << '\n';
  out << std::fixed;
  for (const auto& row : r.rows) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << row.config << std::setw(17)
        << variant_name(row.variant) << std::right << std::setprecision(1) << std::setw(12) << row.median_us
        << std::setw(12) << row.min_us << std::setw(12) << row.max_us << std::setprecision(2) << std::setw(9)
        << row.ratio << '\n';
  }
  out.unsetf(std::ios::floatfield);
  out << std::left;
}

}  // namespace bitflow::cli
