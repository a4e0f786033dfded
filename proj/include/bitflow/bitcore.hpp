#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bitflow/tensor.hpp"

namespace bitflow {

inline constexpr int kWordBits = 64;

constexpr int words_for_channels(int channels) { return (channels + kWordBits - 1) / kWordBits; }

/// Activations packed one bit per value along the channel axis.
/// Bit 1 encodes +1, bit 0 encodes -1; channel 0 sits at the LSB of the
/// first word of each pixel. Pad bits past `channels` are always 0.
class BitPlaneTensor {
 public:
  BitPlaneTensor() = default;
  /// All-zero (all -1) tensor.
  explicit BitPlaneTensor(Shape4 shape);

  const Shape4& shape() const { return shape_; }
  int words_per_pixel() const { return words_per_pixel_; }
  int channel_pad() const { return words_per_pixel_ * kWordBits - shape_.c; }

  std::span<const std::uint64_t> pixel(int n, int y, int x) const {
    return {words_.data() + pixel_offset(n, y, x), static_cast<std::size_t>(words_per_pixel_)};
  }
  std::span<std::uint64_t> pixel(int n, int y, int x) {
    return {words_.data() + pixel_offset(n, y, x), static_cast<std::size_t>(words_per_pixel_)};
  }

  bool bit(int n, int y, int x, int c) const {
    return (pixel(n, y, x)[c / kWordBits] >> (c % kWordBits)) & 1u;
  }
  void set_bit(int n, int y, int x, int c, bool on);

  const std::vector<std::uint64_t>& words() const { return words_; }
  /// Raw word access for deserialization; caller restores the pad invariant.
  std::vector<std::uint64_t>& mutable_words() { return words_; }

  /// True when every pad bit is zero.
  bool pad_bits_clear() const;

  bool operator==(const BitPlaneTensor&) const = default;

 private:
  std::size_t pixel_offset(int n, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) * words_per_pixel_;
  }

  Shape4 shape_{};
  int words_per_pixel_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Binary weights in [out_channels, filter_h, filter_w, in_channels] order,
/// in_channels packed like BitPlaneTensor pixels. For one output channel the
/// filter_h * filter_w sites are contiguous, so one kernel row (fixed fh) is a
/// single span of filter_w * words_per_site words.
class PackedKernelSet {
 public:
  PackedKernelSet() = default;
  /// dims = (out, fh, fw, in); all bits zero.
  explicit PackedKernelSet(Shape4 dims);

  const Shape4& dims() const { return dims_; }
  int out_channels() const { return dims_.n; }
  int filter_h() const { return dims_.h; }
  int filter_w() const { return dims_.w; }
  int in_channels() const { return dims_.c; }
  int words_per_site() const { return words_per_site_; }
  int channel_pad() const { return words_per_site_ * kWordBits - dims_.c; }
  /// Pad-bit positions per output element: filter_h * filter_w * channel_pad.
  int pad_correction() const { return dims_.h * dims_.w * channel_pad(); }

  std::span<const std::uint64_t> site(int o, int fy, int fx) const {
    return {words_.data() + site_offset(o, fy, fx), static_cast<std::size_t>(words_per_site_)};
  }
  /// filter_w consecutive sites of kernel row fy.
  std::span<const std::uint64_t> row(int o, int fy) const {
    return {words_.data() + site_offset(o, fy, 0),
            static_cast<std::size_t>(words_per_site_) * dims_.w};
  }
  std::span<const std::uint64_t> kernel(int o) const {
    return {words_.data() + site_offset(o, 0, 0),
            static_cast<std::size_t>(words_per_site_) * dims_.h * dims_.w};
  }

  bool bit(int o, int fy, int fx, int c) const {
    return (site(o, fy, fx)[c / kWordBits] >> (c % kWordBits)) & 1u;
  }
  void set_bit(int o, int fy, int fx, int c, bool on);

  const std::vector<std::uint64_t>& words() const { return words_; }
  std::vector<std::uint64_t>& mutable_words() { return words_; }
  bool pad_bits_clear() const;

  bool operator==(const PackedKernelSet&) const = default;

 private:
  std::size_t site_offset(int o, int fy, int fx) const {
    return ((static_cast<std::size_t>(o) * dims_.h + fy) * dims_.w + fx) * words_per_site_;
  }

  Shape4 dims_{};
  int words_per_site_ = 0;
  std::vector<std::uint64_t> words_;
};

/// bit = 1 iff value >= 0, so sign(0) = +1.
constexpr bool sign_bit(double v) { return v >= 0.0; }

BitPlaneTensor pack_activations(const RealTensor& x);
/// Packs an 8-bit map by sign (x >= 0 -> +1).
BitPlaneTensor pack_activations(const I8FeatureMap& x);
/// Packs a {-1,+1} tensor (any value >= 0 counts as +1).
BitPlaneTensor pack_signs(const SignTensor& x);

/// w has dims (out, fh, fw, in).
PackedKernelSet pack_weights(const RealTensor& w);
PackedKernelSet pack_weights(const SignTensor& w);

/// Inverse of packing over the unpadded channels; values are -1 or +1.
SignTensor unpack_bits(const BitPlaneTensor& t);
SignTensor unpack_bits(const PackedKernelSet& k);

/// popcount(XNOR(a, b)) summed over every bit of both spans.
///
/// The reduction mirrors the vcnt -> pairwise add -> addv tree: per-byte bit
/// counts for each word, byte-lane additions across words (flushed before a
/// lane can exceed 255), then one horizontal sum. The result is exact.
/// Throws if the spans differ in length.
std::uint32_t popcount_match(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

}  // namespace bitflow
