#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bitflow/binconv.hpp"
#include "bitflow/bitcore.hpp"
#include "bitflow/bnquant.hpp"

namespace bitflow {

/// sign -> XNOR/popcount saturated to 8 bits -> threshold compare.
/// Without thresholds the block is terminal and emits the 8-bit conv output.
struct VggBlock {
  PackedKernelSet kernel;
  ConvSpec spec;
  std::optional<ThresholdParams> thr;

  bool terminal() const { return !thr.has_value(); }
  bool operator==(const VggBlock&) const = default;
};

/// sign -> conv_i8 -> fixed-point BN -> saturating add with the block input.
struct ResnetBlock {
  PackedKernelSet kernel;
  ConvSpec spec;
  QBNParams qbn;

  bool operator==(const ResnetBlock&) const = default;
};

/// Binary conv followed by float BN, as produced by training. Must be
/// converted to a VggBlock or ResnetBlock before inference.
struct FloatBnLayer {
  PackedKernelSet kernel;
  ConvSpec spec;
  BNParams bn;

  bool operator==(const FloatBnLayer& o) const {
    return kernel == o.kernel && spec == o.spec && bn.gamma == o.bn.gamma && bn.beta == o.bn.beta &&
           bn.mu == o.bn.mu && bn.sigma == o.bn.sigma;
  }
};

using Layer = std::variant<VggBlock, ResnetBlock, FloatBnLayer>;

struct Model {
  std::vector<Layer> layers;
  bool operator==(const Model&) const = default;
};

using Activation = std::variant<I8FeatureMap, BitPlaneTensor>;

/// 8-bit view of an activation; packed bits become -1/+1.
I8FeatureMap to_i8(const Activation& a);

Activation run_vgg_block(const Activation& x, const VggBlock& b, ExecPolicy policy = {});
I8FeatureMap run_resnet_block(const I8FeatureMap& x, const ResnetBlock& b, ExecPolicy policy = {});

/// Throws if the layer chain is not executable for `input` (empty model,
/// unconverted layers, channel or shortcut mismatches, a ResNet block fed
/// packed bits).
void check_model(const Model& m, const Shape4& input);

/// Runs the graph. The first block binarizes the real input by sign; a ResNet
/// first block takes its shortcut from the input rounded to [-127, 127].
I8FeatureMap run_model(const Model& m, const RealTensor& input, ExecPolicy policy = {});

/// Channels whose threshold makes them constant after clipping.
std::vector<std::string> model_diagnostics(const Model& m);

inline constexpr std::uint16_t kModelVersion = 1;

/// "BDF1", version u16, layer count u16, layers, CRC-32 of everything before it.
/// All integers little-endian.
std::vector<std::uint8_t> serialize_model(const Model& m);
Model parse_model(std::span<const std::uint8_t> bytes, std::vector<std::string>* diagnostics = nullptr);

void save_model(const Model& m, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path, std::vector<std::string>* diagnostics = nullptr);

}  // namespace bitflow
