#include <set>

#include "bitflow/cli.hpp"

namespace bitflow::cli {

ConvertMode parse_convert_mode(std::string_view name) {
  if (name == "vgg-threshold") return ConvertMode::kVggThreshold;
  if (name == "resnet-qbn") return ConvertMode::kResnetQbn;
  throw UsageError("unknown convert mode '" + std::string(name) + "' (expected vgg-threshold or resnet-qbn)");
}

ConvertResult convert_model(const Model& in, ConvertMode mode) {
  ConvertResult r;
  for (std::size_t i = 0; i < in.layers.size(); ++i) {
    const auto* f = std::get_if<FloatBnLayer>(&in.layers[i]);
    if (!f) {
      r.model.layers.push_back(in.layers[i]);
      continue;
    }
    f->bn.validate();
    if (f->bn.channels() != f->kernel.out_channels()) {
      throw Error("layer " + std::to_string(i) + ": BN channel count does not match the kernel");
    }
    const std::string where = "layer " + std::to_string(i) + " channel ";

    // One warning per flagged channel, even when several conditions apply.
    std::set<int> flagged;
    for (int c = 0; c < f->bn.channels(); ++c) {
      if (f->bn.gamma[c] == 0.0) {
        r.diagnostics.push_back(where + std::to_string(c) + ": gamma == 0, output is constant");
        flagged.insert(c);
      }
    }

    if (mode == ConvertMode::kVggThreshold) {
      ThresholdParams thr = compute_threshold(f->bn);
      for (int c : thr.constant_channels()) {
        if (flagged.insert(c).second) {
          r.diagnostics.push_back(where + std::to_string(c) + ": |tau| = " + std::to_string(std::abs(thr.tau[c])) +
                                  " lies outside [-127, 127], output is constant");
        }
      }
      r.model.layers.emplace_back(VggBlock{f->kernel, f->spec, std::move(thr)});
    } else {
      r.model.layers.emplace_back(ResnetBlock{f->kernel, f->spec, quantize_bn(f->bn).tables});
    }
    r.warnings += static_cast<int>(flagged.size());
  }
  return r;
}

}  // namespace bitflow::cli
