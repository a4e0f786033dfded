#include "bitflow/binconv.hpp"

#include <algorithm>
#include <string>
#include <thread>
#include <vector>

#include "popcount_tree.hpp"

namespace bitflow {

namespace {

constexpr std::size_t kTileBudgetBytes = 32 * 1024;

// A padded bit image (or a horizontal band of one): rows of `width` pixels,
// `wpp` words per pixel, rows contiguous.
struct BitRows {
  const std::uint64_t* words;
  int width;
  int wpp;
  int first_row;  // padded-image row stored at words[0]
};

int constant_offset(const PackedKernelSet& k) {
  // 2*matches over every stored bit, minus the bit count, minus one +1 per
  // pad bit (pad bits are 0 on both sides, so they always match).
  const int stored_bits = k.filter_h() * k.filter_w() * k.words_per_site() * kWordBits;
#ifdef BITFLOW_FAULT_PAD_CORRECTION
  const int correction = k.pad_correction() + (k.pad_correction() > 0 ? 1 : 0);
#else
  const int correction = k.pad_correction();
#endif
  return stored_bits + correction;
}

// Accumulates matches for up to four output channels against one input span
// so the input words are loaded once.
template <int Lanes>
void match_block(const std::uint64_t* in, const std::uint64_t* const* kern, std::size_t n,
                 std::uint32_t* acc) {
  std::size_t i = 0;
  while (i < n) {
    const std::size_t stop = (n - i > detail::kFlushEvery) ? i + detail::kFlushEvery : n;
    std::uint64_t lanes[Lanes] = {};
    for (; i < stop; ++i) {
      const std::uint64_t a = in[i];
      for (int l = 0; l < Lanes; ++l) lanes[l] += detail::byte_counts(~(a ^ kern[l][i]));
    }
    for (int l = 0; l < Lanes; ++l) acc[l] += detail::reduce_lanes(lanes[l]);
  }
}

// Computes output rows [y0, y1) of one image; sink(y, x, o, value) receives
// the exact dot product.
template <typename Sink>
void conv_rows(const BitRows& in, const PackedKernelSet& k, const ConvSpec& spec, int out_w, int y0,
               int y1, Sink&& sink) {
  const int fh = k.filter_h();
  const int outs = k.out_channels();
  const std::size_t row_words = static_cast<std::size_t>(k.filter_w()) * k.words_per_site();
  const int offset = constant_offset(k);
  const std::uint64_t* kern[4];
  std::uint32_t acc[4];

  for (int y = y0; y < y1; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto input_row = [&](int fy) {
        const std::size_t r = static_cast<std::size_t>(y * spec.stride_h + fy - in.first_row);
        return in.words + (r * in.width + static_cast<std::size_t>(x) * spec.stride_w) * in.wpp;
      };
      int o = 0;
      for (; o + 4 <= outs; o += 4) {
        acc[0] = acc[1] = acc[2] = acc[3] = 0;
        for (int fy = 0; fy < fh; ++fy) {
          for (int l = 0; l < 4; ++l) kern[l] = k.row(o + l, fy).data();
          match_block<4>(input_row(fy), kern, row_words, acc);
        }
        for (int l = 0; l < 4; ++l) sink(y, x, o + l, 2 * static_cast<int>(acc[l]) - offset);
      }
      for (; o < outs; ++o) {
        acc[0] = 0;
        for (int fy = 0; fy < fh; ++fy) {
          kern[0] = k.row(o, fy).data();
          match_block<1>(input_row(fy), kern, row_words, acc);
        }
        sink(y, x, o, 2 * static_cast<int>(acc[0]) - offset);
      }
    }
  }
}

// Runs fn(begin, end) over [0, total) split into contiguous chunks.
template <typename Fn>
void parallel_ranges(int total, int workers, Fn&& fn) {
  workers = std::clamp(workers, 1, std::max(total, 1));
  if (workers == 1) {
    fn(0, total);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  const int chunk = (total + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int b = w * chunk;
    const int e = std::min(total, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
}

void check_conv_inputs(const Shape4& x, const PackedKernelSet& k) {
  if (x.c != k.in_channels()) {
    throw Error("conv: input has " + std::to_string(x.c) + " channels, kernel expects " +
                std::to_string(k.in_channels()));
  }
}

template <typename Out, typename Convert>
Tensor4<Out> conv_staged(const BitPlaneTensor& x, const PackedKernelSet& k, const ConvSpec& spec,
                         ExecPolicy policy, Convert convert) {
  check_conv_inputs(x.shape(), k);
  const Shape4 out_shape = conv_output_shape(x.shape(), k.dims(), spec);
  const BitPlaneTensor padded =
      (spec.pad_h || spec.pad_w) ? pad_spatial(x, spec.pad_h, spec.pad_w) : x;
  const Shape4& ps = padded.shape();
  Tensor4<Out> out(out_shape);
  const std::size_t image_words = static_cast<std::size_t>(ps.h) * ps.w * padded.words_per_pixel();

  parallel_ranges(out_shape.n * out_shape.h, policy.workers, [&](int begin, int end) {
    for (int row = begin; row < end;) {
      const int n = row / out_shape.h;
      const int y0 = row % out_shape.h;
      const int y1 = std::min(out_shape.h, y0 + (end - row));
      const BitRows in{padded.words().data() + n * image_words, ps.w, padded.words_per_pixel(), 0};
      conv_rows(in, k, spec, out_shape.w, y0, y1,
                [&](int y, int xx, int o, int v) { out(n, y, xx, o) = convert(v); });
      row += y1 - y0;
    }
  });
  return out;
}

}  // namespace

Shape4 conv_output_shape(const Shape4& input, const Shape4& kernel_dims, const ConvSpec& spec) {
  if (spec.stride_h <= 0 || spec.stride_w <= 0) throw Error("conv: stride must be positive");
  if (spec.pad_h < 0 || spec.pad_w < 0) throw Error("conv: padding must be non-negative");
  const int oh = (input.h + 2 * spec.pad_h - kernel_dims.h) / spec.stride_h + 1;
  const int ow = (input.w + 2 * spec.pad_w - kernel_dims.w) / spec.stride_w + 1;
  if (input.h + 2 * spec.pad_h < kernel_dims.h || input.w + 2 * spec.pad_w < kernel_dims.w || oh <= 0 ||
      ow <= 0) {
    throw Error("conv: non-positive output dims for input " + to_string(input) + " and kernel " +
                to_string(kernel_dims));
  }
  return {input.n, oh, ow, kernel_dims.n};
}

BitPlaneTensor pad_spatial(const BitPlaneTensor& x, int pad_h, int pad_w) {
  if (pad_h < 0 || pad_w < 0) throw Error("pad_spatial: negative padding");
  const Shape4& s = x.shape();
  BitPlaneTensor out({s.n, s.h + 2 * pad_h, s.w + 2 * pad_w, s.c});
  const std::size_t row_words = static_cast<std::size_t>(s.w) * x.words_per_pixel();
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      const auto src = x.pixel(n, y, 0);
      auto dst = out.pixel(n, y + pad_h, pad_w);
      std::copy_n(src.data(), row_words, dst.data());
    }
  }
  return out;
}

I32FeatureMap conv_i32(const BitPlaneTensor& x, const PackedKernelSet& k, const ConvSpec& spec,
                       ExecPolicy policy) {
  return conv_staged<std::int32_t>(x, k, spec, policy, [](int v) { return v; });
}

I8FeatureMap conv_i8(const BitPlaneTensor& x, const PackedKernelSet& k, const ConvSpec& spec,
                     ExecPolicy policy) {
  return conv_staged<std::int8_t>(x, k, spec, policy, [](int v) { return saturate_i8(v); });
}

int default_tile_rows(const Shape4& input, const PackedKernelSet& k, const ConvSpec& spec) {
  const Shape4 out = conv_output_shape(input, k.dims(), spec);
  const std::size_t pixel_bytes = static_cast<std::size_t>(k.words_per_site()) * sizeof(std::uint64_t);
  const std::size_t row_bytes = static_cast<std::size_t>(input.w + 2 * spec.pad_w) * pixel_bytes;
  const std::size_t kernel_bytes = static_cast<std::size_t>(k.filter_h()) * k.filter_w() * pixel_bytes;
  int rows = 1;
  while (rows < out.h) {
    const std::size_t in_rows = static_cast<std::size_t>(rows) * spec.stride_h + k.filter_h();
    if (in_rows * row_bytes + kernel_bytes > kTileBudgetBytes) break;
    ++rows;
  }
  return rows;
}

I8FeatureMap conv_fused(const I8FeatureMap& x_prev, const ThresholdParams* thr,
                        const PackedKernelSet& k, const ConvSpec& spec, TileHint tile,
                        ExecPolicy policy) {
  const Shape4& s = x_prev.shape();
  check_shape(s, "conv_fused");
  check_conv_inputs(s, k);
  if (thr) {
    thr->validate();
    if (thr->channels() != s.c) throw Error("conv_fused: threshold channel count mismatch");
  }
  const Shape4 out_shape = conv_output_shape(s, k.dims(), spec);
  const int tile_rows = std::clamp(tile.rows > 0 ? tile.rows : default_tile_rows(s, k, spec), 1, out_shape.h);
  const int tiles_per_image = (out_shape.h + tile_rows - 1) / tile_rows;
  const int wpp = k.words_per_site();
  const int padded_w = s.w + 2 * spec.pad_w;

  // Per-channel binarization lookup indexed by value + 128.
  std::vector<std::uint8_t> decide(static_cast<std::size_t>(s.c) * 256);
  for (int c = 0; c < s.c; ++c) {
    for (int v = -128; v <= 127; ++v) {
      decide[c * 256 + (v + 128)] = thr ? threshold_bit(v, thr->tau[c], thr->direction[c]) : v >= 0;
    }
  }

  I8FeatureMap out(out_shape);
  parallel_ranges(out_shape.n * tiles_per_image, policy.workers, [&](int begin, int end) {
    std::vector<std::uint64_t> band;
    for (int t = begin; t < end; ++t) {
      const int n = t / tiles_per_image;
      const int y0 = (t % tiles_per_image) * tile_rows;
      const int y1 = std::min(out_shape.h, y0 + tile_rows);
      const int r0 = y0 * spec.stride_h;
      const int r1 = (y1 - 1) * spec.stride_h + k.filter_h();

      // Binarize, pack and pad the input band in one pass.
      band.assign(static_cast<std::size_t>(r1 - r0) * padded_w * wpp, 0);
      for (int r = r0; r < r1; ++r) {
        const int src_y = r - spec.pad_h;
        if (src_y < 0 || src_y >= s.h) continue;
        std::uint64_t* dst_row = band.data() + (static_cast<std::size_t>(r - r0) * padded_w + spec.pad_w) * wpp;
        const std::int8_t* src = x_prev.data() + x_prev.index(n, src_y, 0, 0);
        for (int xx = 0; xx < s.w; ++xx) {
          std::uint64_t* dst = dst_row + static_cast<std::size_t>(xx) * wpp;
          for (int c = 0; c < s.c; ++c, ++src) {
            dst[c / kWordBits] |= std::uint64_t{decide[c * 256 + (*src + 128)]} << (c % kWordBits);
          }
        }
      }

      const BitRows in{band.data(), padded_w, wpp, r0};
      std::int8_t* dst = out.data() + out.index(n, 0, 0, 0);
      const std::size_t row_stride = static_cast<std::size_t>(out_shape.w) * out_shape.c;
      conv_rows(in, k, spec, out_shape.w, y0, y1, [&](int y, int xx, int o, int v) {
        dst[y * row_stride + static_cast<std::size_t>(xx) * out_shape.c + o] = saturate_i8(v);
      });
    }
  });
  return out;
}

I32FeatureMap conv_float_oracle(const SignTensor& a, const SignTensor& w, const ConvSpec& spec) {
  const Shape4& s = a.shape();
  const Shape4& d = w.shape();
  check_shape(s, "conv_float_oracle");
  check_shape(d, "conv_float_oracle");
  if (s.c != d.c) throw Error("conv_float_oracle: channel mismatch");
  const Shape4 os = conv_output_shape(s, d, spec);
  I32FeatureMap out(os);
  for (int n = 0; n < os.n; ++n)
    for (int y = 0; y < os.h; ++y)
      for (int x = 0; x < os.w; ++x)
        for (int o = 0; o < os.c; ++o) {
          double sum = 0.0;
          for (int fy = 0; fy < d.h; ++fy)
            for (int fx = 0; fx < d.w; ++fx) {
              const int iy = y * spec.stride_h + fy - spec.pad_h;
              const int ix = x * spec.stride_w + fx - spec.pad_w;
              const bool inside = iy >= 0 && iy < s.h && ix >= 0 && ix < s.w;
              for (int c = 0; c < d.c; ++c) {
                const double av = inside ? a(n, iy, ix, c) : -1.0;
                sum += av * w(o, fy, fx, c);
              }
            }
          out(n, y, x, o) = static_cast<std::int32_t>(sum);
        }
  return out;
}

}  // namespace bitflow
