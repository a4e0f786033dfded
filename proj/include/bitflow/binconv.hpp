#pragma once

#include <optional>

#include "bitflow/bitcore.hpp"
#include "bitflow/bnquant.hpp"
#include "bitflow/tensor.hpp"

namespace bitflow {

/// Stride and zero-free spatial padding. Padded positions read as -1 (bit 0),
/// since {-1,+1} codes have no zero.
struct ConvSpec {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;

  static ConvSpec same(int filter) { return {1, 1, filter / 2, filter / 2}; }
  bool operator==(const ConvSpec&) const = default;
};

/// Output NHWC shape; throws if the spec is invalid or an extent is non-positive.
Shape4 conv_output_shape(const Shape4& input, const Shape4& kernel_dims, const ConvSpec& spec);

/// Worker count for row-parallel execution. Results never depend on it.
struct ExecPolicy {
  int workers = 1;
};

/// Exact +-1 convolution through XNOR/popcount.
I32FeatureMap conv_i32(const BitPlaneTensor& x, const PackedKernelSet& k, const ConvSpec& spec,
                       ExecPolicy policy = {});

/// conv_i32 saturated to [-127, 127] at the end of each exact accumulation.
I8FeatureMap conv_i8(const BitPlaneTensor& x, const PackedKernelSet& k, const ConvSpec& spec,
                     ExecPolicy policy = {});

/// Copies x into a tensor grown by the spatial padding; border pixels are all -1.
BitPlaneTensor pad_spatial(const BitPlaneTensor& x, int pad_h, int pad_w);

/// Output rows per tile. 0 picks the default: the largest tile whose packed
/// input rows plus one kernel fit in 32 KiB.
struct TileHint {
  int rows = 0;
};

int default_tile_rows(const Shape4& input, const PackedKernelSet& k, const ConvSpec& spec);

/// Binarize (by threshold, or by sign when `thr` is empty), pad and convolve
/// one tile of output rows at a time. Bit-identical to
/// apply_threshold -> conv_i8 for every tile size.
I8FeatureMap conv_fused(const I8FeatureMap& x_prev, const ThresholdParams* thr,
                        const PackedKernelSet& k, const ConvSpec& spec, TileHint tile = {},
                        ExecPolicy policy = {});

/// Dense reference convolution on +-1 integers; a has NHWC shape, w has
/// (out, fh, fw, in).
I32FeatureMap conv_float_oracle(const SignTensor& a, const SignTensor& w, const ConvSpec& spec);

}  // namespace bitflow
