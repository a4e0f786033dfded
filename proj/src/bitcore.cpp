#include "bitflow/bitcore.hpp"

#include <cmath>
#include <limits>

#include "popcount_tree.hpp"

namespace bitflow {

std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + "," +
         std::to_string(s.c) + ")";
}

void check_shape(const Shape4& s, const char* what) {
  if (s.n <= 0 || s.h <= 0 || s.w <= 0 || s.c <= 0) {
    throw Error(std::string(what) + ": non-positive dimension " + to_string(s));
  }
  // Stored words are indexed with size_t but shapes travel as int; keep the
  // element count inside int32 so every flattened index is representable.
  const long double total = static_cast<long double>(s.n) * s.h * s.w * s.c;
  if (total > static_cast<long double>(std::numeric_limits<std::int32_t>::max())) {
    throw Error(std::string(what) + ": dimension product overflows " + to_string(s));
  }
}

bool is_symmetric_i8(const I8FeatureMap& x) {
  for (auto v : x.values()) {
    if (v < kI8Min) return false;
  }
  return true;
}

namespace {

std::uint64_t tail_mask(int channels) {
  const int rem = channels % kWordBits;
  return rem == 0 ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
}

bool words_pad_clear(const std::vector<std::uint64_t>& words, int words_per_group, int channels) {
  if (words_per_group == 0) return true;
  const std::uint64_t keep = tail_mask(channels);
  for (std::size_t i = words_per_group - 1; i < words.size(); i += words_per_group) {
    if (words[i] & ~keep) return false;
  }
  return true;
}

template <typename Scalar>
BitPlaneTensor pack_by_sign(const Tensor4<Scalar>& x) {
  check_shape(x.shape(), "pack_activations");
  BitPlaneTensor out(x.shape());
  const Shape4& s = x.shape();
  const Scalar* src = x.data();
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int xx = 0; xx < s.w; ++xx) {
        auto dst = out.pixel(n, y, xx);
        for (int c = 0; c < s.c; ++c, ++src) {
          if (*src >= Scalar{0}) dst[c / kWordBits] |= std::uint64_t{1} << (c % kWordBits);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
PackedKernelSet pack_kernel_by_sign(const Tensor4<Scalar>& w) {
  check_shape(w.shape(), "pack_weights");
  PackedKernelSet out(w.shape());
  const Shape4& d = w.shape();
  for (int o = 0; o < d.n; ++o) {
    for (int fy = 0; fy < d.h; ++fy) {
      for (int fx = 0; fx < d.w; ++fx) {
        for (int c = 0; c < d.c; ++c) {
          if (w(o, fy, fx, c) >= Scalar{0}) out.set_bit(o, fy, fx, c, true);
        }
      }
    }
  }
  return out;
}

}  // namespace

BitPlaneTensor::BitPlaneTensor(Shape4 shape)
    : shape_(shape), words_per_pixel_(words_for_channels(shape.c)) {
  check_shape(shape, "BitPlaneTensor");
  words_.assign(static_cast<std::size_t>(shape.n) * shape.h * shape.w * words_per_pixel_, 0);
}

void BitPlaneTensor::set_bit(int n, int y, int x, int c, bool on) {
  auto& word = pixel(n, y, x)[c / kWordBits];
  const std::uint64_t m = std::uint64_t{1} << (c % kWordBits);
  word = on ? (word | m) : (word & ~m);
}

bool BitPlaneTensor::pad_bits_clear() const {
  return words_pad_clear(words_, words_per_pixel_, shape_.c);
}

PackedKernelSet::PackedKernelSet(Shape4 dims)
    : dims_(dims), words_per_site_(words_for_channels(dims.c)) {
  check_shape(dims, "PackedKernelSet");
  words_.assign(static_cast<std::size_t>(dims.n) * dims.h * dims.w * words_per_site_, 0);
}

void PackedKernelSet::set_bit(int o, int fy, int fx, int c, bool on) {
  auto& word = words_[site_offset(o, fy, fx) + c / kWordBits];
  const std::uint64_t m = std::uint64_t{1} << (c % kWordBits);
  word = on ? (word | m) : (word & ~m);
}

bool PackedKernelSet::pad_bits_clear() const {
  return words_pad_clear(words_, words_per_site_, dims_.c);
}

BitPlaneTensor pack_activations(const RealTensor& x) {
  for (float v : x.values()) {
    if (!std::isfinite(v)) throw Error("pack_activations: non-finite value");
  }
  return pack_by_sign(x);
}

BitPlaneTensor pack_activations(const I8FeatureMap& x) { return pack_by_sign(x); }

BitPlaneTensor pack_signs(const SignTensor& x) { return pack_by_sign(x); }

PackedKernelSet pack_weights(const RealTensor& w) {
  for (float v : w.values()) {
    if (!std::isfinite(v)) throw Error("pack_weights: non-finite value");
  }
  return pack_kernel_by_sign(w);
}

PackedKernelSet pack_weights(const SignTensor& w) { return pack_kernel_by_sign(w); }

SignTensor unpack_bits(const BitPlaneTensor& t) {
  const Shape4& s = t.shape();
  SignTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int c = 0; c < s.c; ++c) out(n, y, x, c) = t.bit(n, y, x, c) ? 1 : -1;
  return out;
}

SignTensor unpack_bits(const PackedKernelSet& k) {
  const Shape4& d = k.dims();
  SignTensor out(d);
  for (int o = 0; o < d.n; ++o)
    for (int fy = 0; fy < d.h; ++fy)
      for (int fx = 0; fx < d.w; ++fx)
        for (int c = 0; c < d.c; ++c) out(o, fy, fx, c) = k.bit(o, fy, fx, c) ? 1 : -1;
  return out;
}

std::uint32_t popcount_match(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  if (a.size() != b.size()) throw Error("popcount_match: span length mismatch");
  return detail::xnor_popcount(a.data(), b.data(), a.size());
}

}  // namespace bitflow
