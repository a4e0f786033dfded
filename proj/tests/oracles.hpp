#pragma once

// Reference implementations used as test oracles. They work on plain
// integers and never touch packed bits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bitflow/binconv.hpp"
#include "bitflow/tensor.hpp"

namespace oracle {

using bitflow::ConvSpec;
using bitflow::I32FeatureMap;
using bitflow::Shape4;
using bitflow::SignTensor;

/// a: NHWC signs, w: (out, fh, fw, in) signs. Out-of-image taps read -1.
inline I32FeatureMap conv(const SignTensor& a, const SignTensor& w, const ConvSpec& s) {
  const Shape4 in = a.shape();
  const Shape4 k = w.shape();
  const int oh = (in.h + 2 * s.pad_h - k.h) / s.stride_h + 1;
  const int ow = (in.w + 2 * s.pad_w - k.w) / s.stride_w + 1;
  I32FeatureMap out({in.n, oh, ow, k.n});
  for (int n = 0; n < in.n; ++n)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        for (int o = 0; o < k.n; ++o) {
          long acc = 0;
          for (int fy = 0; fy < k.h; ++fy)
            for (int fx = 0; fx < k.w; ++fx) {
              const int iy = y * s.stride_h + fy - s.pad_h;
              const int ix = x * s.stride_w + fx - s.pad_w;
              const bool inside = iy >= 0 && iy < in.h && ix >= 0 && ix < in.w;
              for (int c = 0; c < k.c; ++c) acc += (inside ? a(n, iy, ix, c) : -1) * w(o, fy, fx, c);
            }
          out(n, y, x, o) = static_cast<std::int32_t>(acc);
        }
  return out;
}

inline int clamp_i8(long v) { return static_cast<int>(std::clamp<long>(v, -127, 127)); }

inline SignTensor random_signs(const Shape4& s, std::mt19937_64& rng) {
  SignTensor t(s);
  std::bernoulli_distribution coin(0.5);
  for (auto& v : t.values()) v = coin(rng) ? 1 : -1;
  return t;
}

inline bitflow::I8FeatureMap random_i8(const Shape4& s, std::mt19937_64& rng) {
  bitflow::I8FeatureMap t(s);
  std::uniform_int_distribution<int> d(-127, 127);
  for (auto& v : t.values()) v = static_cast<std::int8_t>(d(rng));
  return t;
}

inline int rand_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace oracle
