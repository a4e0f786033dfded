#include <random>

#include <doctest.h>

#include "bitflow/binconv.hpp"
#include "oracles.hpp"

using namespace bitflow;

namespace {

struct Case {
  Shape4 in;
  Shape4 k;
  ConvSpec spec;
};

Case random_case(std::mt19937_64& rng) {
  const int f = std::array{1, 3, 5}[oracle::rand_int(rng, 0, 2)];
  Case c;
  c.spec = {oracle::rand_int(rng, 1, 3), oracle::rand_int(rng, 1, 3), oracle::rand_int(rng, 0, f / 2),
            oracle::rand_int(rng, 0, f / 2)};
  const int ch = oracle::rand_int(rng, 1, 200);
  c.in = {oracle::rand_int(rng, 1, 2), oracle::rand_int(rng, std::max(1, f - 2 * c.spec.pad_h), 12),
          oracle::rand_int(rng, std::max(1, f - 2 * c.spec.pad_w), 12), ch};
  c.k = {oracle::rand_int(rng, 1, 9), f, f, ch};
  return c;
}

}  // namespace

TEST_CASE("hand-computed convolutions") {
  SUBCASE("1x1 dot product") {
    SignTensor a({1, 1, 1, 3});
    a.values() = {1, -1, 1};
    SignTensor w({1, 1, 1, 3});
    w.values() = {1, 1, -1};
    CHECK(conv_i32(pack_signs(a), pack_weights(w), {}).values()[0] == -1);
  }
  SUBCASE("padding reads -1") {
    SignTensor a({1, 1, 1, 1}, 1);
    SignTensor w({1, 3, 3, 1}, 1);
    const I32FeatureMap y = conv_i32(pack_signs(a), pack_weights(w), ConvSpec::same(3));
    CHECK(y.shape() == Shape4{1, 1, 1, 1});
    CHECK(y.values()[0] == 1 - 8);
  }
  SUBCASE("a 3x3x128 patch spans +-1152 and saturates symmetrically") {
    SignTensor a({1, 3, 3, 128}, 1);
    SignTensor w({2, 3, 3, 128}, 1);
    for (int fy = 0; fy < 3; ++fy)
      for (int fx = 0; fx < 3; ++fx)
        for (int c = 0; c < 128; ++c) w(1, fy, fx, c) = -1;
    const BitPlaneTensor x = pack_signs(a);
    const PackedKernelSet k = pack_weights(w);
    const I32FeatureMap wide = conv_i32(x, k, {});
    CHECK(wide.values() == std::vector<std::int32_t>{1152, -1152});
    const I8FeatureMap narrow = conv_i8(x, k, {});
    CHECK(narrow.values() == std::vector<std::int8_t>{127, -127});
  }
}

TEST_CASE("conv_i32 matches the dense oracle and conv_i8 is its clamp") {
  std::mt19937_64 rng(1234);
  for (int i = 0; i < 150; ++i) {
    const Case c = random_case(rng);
    const SignTensor a = oracle::random_signs(c.in, rng);
    const SignTensor w = oracle::random_signs(c.k, rng);
    const I32FeatureMap want = oracle::conv(a, w, c.spec);
    const BitPlaneTensor x = pack_signs(a);
    const PackedKernelSet k = pack_weights(w);
    INFO("case " << i << " in " << to_string(c.in) << " k " << to_string(c.k));
    const I32FeatureMap got = conv_i32(x, k, c.spec);
    REQUIRE(got == want);
    CHECK(conv_float_oracle(a, w, c.spec) == want);
    const I8FeatureMap got8 = conv_i8(x, k, c.spec);
    for (std::size_t j = 0; j < want.size(); ++j) REQUIRE(got8.values()[j] == oracle::clamp_i8(want.values()[j]));
    CHECK(is_symmetric_i8(got8));
  }
}

TEST_CASE("results do not depend on the worker count") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 30; ++i) {
    const Case c = random_case(rng);
    const BitPlaneTensor x = pack_signs(oracle::random_signs(c.in, rng));
    const PackedKernelSet k = pack_weights(oracle::random_signs(c.k, rng));
    const I32FeatureMap one = conv_i32(x, k, c.spec, {1});
    for (int workers : {2, 3, 8}) CHECK(conv_i32(x, k, c.spec, {workers}) == one);
  }
}

TEST_CASE("pad_spatial surrounds the map with -1 pixels") {
  SignTensor a({1, 2, 2, 70}, 1);
  const BitPlaneTensor p = pad_spatial(pack_signs(a), 1, 2);
  CHECK(p.shape() == Shape4{1, 4, 6, 70});
  CHECK(p.pad_bits_clear());
  const SignTensor u = unpack_bits(p);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) {
      const bool inside = y >= 1 && y < 3 && x >= 2 && x < 4;
      CHECK(u(0, y, x, 69) == (inside ? 1 : -1));
    }
}

TEST_CASE("fused tiles equal the staged pipeline for every tile size") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 60; ++i) {
    const Case c = random_case(rng);
    const I8FeatureMap x = oracle::random_i8(c.in, rng);
    const PackedKernelSet k = pack_weights(oracle::random_signs(c.k, rng));
    ThresholdParams t;
    for (int ch = 0; ch < c.in.c; ++ch) {
      t.tau.push_back(static_cast<std::int16_t>(oracle::rand_int(rng, -128, 128)));
      t.direction.push_back(oracle::rand_int(rng, 0, 1) ? ThresholdDirection::kLessEqual
                                                          : ThresholdDirection::kGreaterEqual);
    }
    const ConvSpec bare{c.spec.stride_h, c.spec.stride_w, 0, 0};
    const I8FeatureMap staged = conv_i8(pad_spatial(apply_threshold(x, t), c.spec.pad_h, c.spec.pad_w), k, bare);
    const I8FeatureMap staged_sign = conv_i8(pad_spatial(pack_activations(x), c.spec.pad_h, c.spec.pad_w), k, bare);
    for (int tile : {1, 2, 5, 0, 1000}) {
      CHECK(conv_fused(x, &t, k, c.spec, {tile}) == staged);
      CHECK(conv_fused(x, nullptr, k, c.spec, {tile}, {2}) == staged_sign);
    }
  }
}

TEST_CASE("default tile keeps the input band and one kernel within 32 KiB") {
  const PackedKernelSet k(Shape4{64, 3, 3, 256});
  const Shape4 in{1, 56, 56, 256};
  const int rows = default_tile_rows(in, k, ConvSpec::same(3));
  CHECK(rows >= 1);
  const auto band_bytes = [&](int r) {
    const int in_rows = (r - 1) * 1 + 3;
    return static_cast<std::size_t>(in_rows) * (56 + 2) * 4 * 8 + 9 * 4 * 8;
  };
  if (rows > 1) CHECK(band_bytes(rows) <= 32 * 1024);
  CHECK(band_bytes(rows + 1) > 32 * 1024);
}

TEST_CASE("invalid convolutions are rejected") {
  const BitPlaneTensor x(Shape4{1, 4, 4, 8});
  CHECK_THROWS_AS(conv_i32(x, PackedKernelSet(Shape4{1, 3, 3, 9}), {}), Error);
  CHECK_THROWS_AS(conv_i32(x, PackedKernelSet(Shape4{1, 5, 5, 8}), {}), Error);
  CHECK_THROWS_AS(conv_i32(x, PackedKernelSet(Shape4{1, 3, 3, 8}), {0, 1, 0, 0}), Error);
  CHECK_THROWS_AS(conv_i32(x, PackedKernelSet(Shape4{1, 3, 3, 8}), {1, 1, -1, 0}), Error);
}
