#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bitflow/netgraph.hpp"

namespace bitflow::cli {

inline constexpr std::uint64_t kDefaultSeed = 0xB17F10;

/// Exit codes shared by all commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitMismatch = 1;
inline constexpr int kExitUsage = 2;

/// Flag value, else $BITFLOW_SEED, else kDefaultSeed.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag);

/// Thrown for malformed configs and flag values; maps to kExitUsage.
struct UsageError : Error {
  using Error::Error;
};

/// Outputs of two paths disagree; maps to kExitMismatch.
struct MismatchError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

enum class Variant { kI8Fused, kI32Staged, kFloatReference };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
/// Comma-separated list, e.g. "i8-fused,i32-staged".
std::vector<Variant> parse_variants(std::string_view list);

struct LayerShape {
  std::string name;
  int height = 14;
  int width = 14;
  int in_channels = 256;
  int out_channels = 256;
  int filter = 3;
  int stride = 1;
  int pad = 1;
};

struct BenchConfig {
  LayerShape layer;
  std::vector<Variant> variants{Variant::kI8Fused, Variant::kI32Staged};
  int repeats = 5;
  int warmup = 2;
  int workers = 1;

  /// Throws UsageError on an invalid shape or repeats < 5.
  void validate() const;
};

struct BenchOverrides {
  std::optional<std::vector<Variant>> variants;
  std::optional<int> repeats;
  std::optional<int> warmup;
  std::optional<int> workers;
};

/// key=value lines, one config per stanza, stanzas separated by blank lines.
/// '#' starts a comment. Keys: name, h, w, cin, cout, filter, stride, pad,
/// variants, repeats, warmup, threads.
std::vector<BenchConfig> parse_bench_config(std::istream& in);
std::vector<BenchConfig> load_bench_config(const std::filesystem::path& path);

/// Nine 3x3 layers shaped like a ResNet-18 body (an analog of a latency study,
/// not a reproduction of any published configuration).
std::vector<BenchConfig> default_suite();

/// Applies the overrides, then validates every config.
void apply_overrides(std::vector<BenchConfig>& configs, const BenchOverrides& o);

struct BenchRow {
  std::string config;
  Variant variant;
  double median_us;
  double min_us;
  double max_us;
  double ratio;  // i32-staged median / this median
};

struct BenchReport {
  std::vector<BenchRow> rows;
};

inline constexpr std::string_view kCsvHeader = "config,variant,median_us,min_us,max_us,ratio";

/// Checks every variant against clamp(i32-staged) before timing anything;
/// throws MismatchError with the first differing element otherwise.
BenchReport run_bench(const std::vector<BenchConfig>& configs, std::uint64_t seed);

void write_csv(const BenchReport& r, std::ostream& out);
void print_table(const BenchReport& r, std::ostream& out);

// ---------------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------------

enum class ConvertMode { kVggThreshold, kResnetQbn };

ConvertMode parse_convert_mode(std::string_view name);

struct ConvertResult {
  Model model;
  std::vector<std::string> diagnostics;
  int warnings = 0;  // channels flagged (gamma == 0 or constant output)
};

/// Rewrites every float-BN layer; already converted layers pass through.
ConvertResult convert_model(const Model& in, ConvertMode mode);

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

enum class SuiteSize { kTiny, kFull };

SuiteSize parse_suite_size(std::string_view name);

struct ValidateOptions {
  SuiteSize size = SuiteSize::kFull;
  std::uint64_t seed = kDefaultSeed;
};

struct SuiteResult {
  std::string name;
  long cases = 0;
  long mismatches = 0;
  std::string first_diff;  // empty when clean
  double seconds = 0.0;
};

struct ValidateReport {
  std::vector<SuiteResult> suites;
  bool passed() const;
  /// Number of convolution configs checked against the dense oracle.
  long conv_configs() const;
};

/// Oracle-equivalence sweeps over binconv, bnquant and netgraph. Each suite
/// keeps going after a mismatch and records only the first one.
ValidateReport run_validate(const ValidateOptions& options, std::ostream* log = nullptr);

void print_validate_report(const ValidateReport& r, std::ostream& out);

}  // namespace bitflow::cli
