#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bitflow/cli.hpp"
#include "bitflow/trainkit.hpp"

namespace {

using namespace bitflow;

struct BenchArgs {
  std::string config;
  std::string variants;
  std::optional<int> repeats;
  std::optional<int> warmup;
  std::optional<int> threads;
  std::string csv;
  std::optional<std::uint64_t> seed;
};

int do_bench(const BenchArgs& a) {
  std::vector<cli::BenchConfig> configs = a.config.empty() ? cli::default_suite() : cli::load_bench_config(a.config);
  cli::BenchOverrides o;
  if (!a.variants.empty()) o.variants = cli::parse_variants(a.variants);
  o.repeats = a.repeats;
  o.warmup = a.warmup;
  o.workers = a.threads;
  cli::apply_overrides(configs, o);
  if (a.config.empty()) {
    std::cout << "default suite: 3x3 layers shaped like a ResNet-18 body (analog, not a reproduction)\n";
  }

  const cli::BenchReport report = cli::run_bench(configs, cli::resolve_seed(a.seed));
  cli::print_table(report, std::cout);
  if (!a.csv.empty()) {
    std::ofstream f(a.csv);
    if (!f) throw cli::UsageError("cannot write " + a.csv);
    cli::write_csv(report, f);
  }
  return cli::kExitOk;
}

int do_convert(const std::string& in, const std::string& out, const std::string& mode_name) {
  const cli::ConvertMode mode = cli::parse_convert_mode(mode_name);
  const cli::ConvertResult r = cli::convert_model(load_model(in), mode);
  for (const auto& d : r.diagnostics) std::cout << "warning: " << d << '\n';
  save_model(r.model, out);
  std::cout << "wrote " << out << " (" << r.model.layers.size() << " layers, " << r.warnings << " warnings)\n";
  return cli::kExitOk;
}

int do_validate(const std::string& size, std::optional<std::uint64_t> seed) {
  cli::ValidateOptions o{cli::parse_suite_size(size), cli::resolve_seed(seed)};
  std::cout << "seed " << o.seed << '\n';
  const cli::ValidateReport r = cli::run_validate(o, &std::cout);
  cli::print_validate_report(r, std::cout);
  return r.passed() ? cli::kExitOk : cli::kExitMismatch;
}

struct TrainArgs {
  int warmup_epochs = 30;
  int clipped_epochs = 10;
  int retrain_epochs = 2;
  std::string model = "toy_resnet.bdf";
  std::string float_model;
  std::string curves;
  std::optional<std::uint64_t> seed;
};

int do_train(const TrainArgs& a) {
  train::ToyTaskConfig cfg;
  cfg.seed = cli::resolve_seed(a.seed);
  const train::ToyTask task = train::make_toy_task(cfg);

  train::TrainState s = train::train_stage1(task, a.warmup_epochs);
  const double warm = train::evaluate(s, task.val, false).accuracy;
  const double ablation = train::evaluate(s, task.val, true).accuracy;
  s = train::train_stage2(std::move(s), task, a.clipped_epochs);
  const double clipped = train::evaluate(s, task.val, true).accuracy;
  if (!a.float_model.empty()) save_model(train::export_float_model(s), a.float_model);
  s = train::bn_quantize_retrain(std::move(s), task, {a.retrain_epochs});
  const double deployed = train::evaluate_deployed(s, task.val).accuracy;

  std::cout << "val accuracy: warm-up " << warm << "%, clip without retraining " << ablation << "%, clipped "
            << clipped << "%, 8-bit deployed " << deployed << "%\n";
  save_model(train::export_model(s), a.model);
  std::cout << "wrote " << a.model << '\n';
  if (!a.curves.empty()) train::write_curves_csv(s, a.curves);
  return cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bitflow: binary convolution engine tools"};
  app.require_subcommand(1);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Latency of i8-fused vs i32-staged convolution");
  b->add_option("--config", bench.config, "key=value stanzas, one layer per stanza");
  b->add_option("--variants", bench.variants, "comma list of i8-fused, i32-staged, float-reference");
  b->add_option("--repeats", bench.repeats, "timed runs per variant (>= 5)");
  b->add_option("--warmup", bench.warmup, "untimed runs before timing");
  b->add_option("--threads", bench.threads, "worker threads");
  b->add_option("--csv", bench.csv, "write the report as CSV");
  b->add_option("--seed", bench.seed, "workload seed (default: $BITFLOW_SEED or 0xB17F10)");

  std::string conv_in, conv_out, conv_mode;
  auto* c = app.add_subcommand("convert", "Turn float BN layers into thresholds or Q-format tables");
  c->add_option("--in", conv_in, "input model")->required();
  c->add_option("--out", conv_out, "output model")->required();
  c->add_option("--mode", conv_mode, "vgg-threshold or resnet-qbn")->required();

  std::string sizes = "full";
  std::optional<std::uint64_t> validate_seed;
  auto* v = app.add_subcommand("validate", "Oracle equivalence sweeps; exit 0 pass, 1 mismatch, 2 usage");
  v->add_option("--sizes", sizes, "tiny or full");
  v->add_option("--seed", validate_seed, "sweep seed (default: $BITFLOW_SEED or 0xB17F10)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Two-stage training on the toy task, then export an 8-bit model");
  t->add_option("--warmup-epochs", tr.warmup_epochs);
  t->add_option("--clipped-epochs", tr.clipped_epochs);
  t->add_option("--retrain-epochs", tr.retrain_epochs);
  t->add_option("--model", tr.model, "exported ResNet-block model");
  t->add_option("--float-model", tr.float_model, "float-BN model after the clipped stage, input for convert");
  t->add_option("--curves", tr.curves, "training curves CSV");
  t->add_option("--seed", tr.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    if (*b) return do_bench(bench);
    if (*c) return do_convert(conv_in, conv_out, conv_mode);
    if (*v) return do_validate(sizes, validate_seed);
    if (*t) return do_train(tr);
  } catch (const cli::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return cli::kExitUsage;
  } catch (const cli::MismatchError& e) {
    std::cerr << "mismatch: " << e.what() << '\n';
    return cli::kExitMismatch;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitMismatch;
  }
  return cli::kExitUsage;
}
