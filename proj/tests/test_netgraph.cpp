#include <filesystem>
#include <random>

#include <doctest.h>
#include <zlib.h>

#include "bitflow/netgraph.hpp"
#include "oracles.hpp"

using namespace bitflow;

namespace {

ThresholdParams random_thr(std::mt19937_64& rng, int channels) {
  ThresholdParams t;
  for (int c = 0; c < channels; ++c) {
    t.tau.push_back(static_cast<std::int16_t>(oracle::rand_int(rng, -60, 60)));
    t.direction.push_back(oracle::rand_int(rng, 0, 1) ? ThresholdDirection::kLessEqual
                                                        : ThresholdDirection::kGreaterEqual);
  }
  return t;
}

QBNParams small_qbn(std::mt19937_64& rng, int channels) {
  BNParams p = BNParams::identity(channels);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int c = 0; c < channels; ++c) {
    p.gamma[c] = 2.0 * u(rng);
    p.beta[c] = 10.0 * u(rng);
    p.mu[c] = 20.0 * u(rng);
    p.sigma[c] = 1.0 + std::abs(u(rng)) * 5.0;
  }
  return quantize_bn(p).tables;
}

Model vgg_model(std::mt19937_64& rng, bool terminal_thr) {
  Model m;
  m.layers.emplace_back(VggBlock{pack_weights(oracle::random_signs({24, 3, 3, 5}, rng)), ConvSpec::same(3),
                                 random_thr(rng, 24)});
  m.layers.emplace_back(VggBlock{pack_weights(oracle::random_signs({70, 3, 3, 24}, rng)), {2, 2, 1, 1},
                                 random_thr(rng, 70)});
  std::optional<ThresholdParams> last;
  if (terminal_thr) last = random_thr(rng, 7);
  m.layers.emplace_back(VggBlock{pack_weights(oracle::random_signs({7, 1, 1, 70}, rng)), {}, last});
  return m;
}

Model resnet_model(std::mt19937_64& rng) {
  Model m;
  for (int l = 0; l < 3; ++l) {
    m.layers.emplace_back(
        ResnetBlock{pack_weights(oracle::random_signs({6, 3, 3, 6}, rng)), ConvSpec::same(3), small_qbn(rng, 6)});
  }
  return m;
}

RealTensor random_input(std::mt19937_64& rng, const Shape4& s) {
  RealTensor x(s);
  std::uniform_real_distribution<float> u(-150.0f, 150.0f);
  for (auto& v : x.values()) v = u(rng);
  return x;
}

// Independent chain: dense oracle convolution, scalar threshold/BN steps.
I8FeatureMap chain(const Model& m, const RealTensor& input) {
  I8FeatureMap x(input.shape());
  SignTensor s(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const float v = input.values()[i];
    s.values()[i] = v >= 0.0f ? 1 : -1;
    x.values()[i] = saturate_i8(round_half_away(std::clamp(v, -127.0f, 127.0f)));
  }
  for (const Layer& layer : m.layers) {
    if (const auto* v = std::get_if<VggBlock>(&layer)) {
      const I32FeatureMap z = oracle::conv(s, unpack_bits(v->kernel), v->spec);
      x = I8FeatureMap(z.shape());
      for (std::size_t i = 0; i < z.size(); ++i) {
        const int c = static_cast<int>(i % z.shape().c);
        const int zc = oracle::clamp_i8(z.values()[i]);
        x.values()[i] = static_cast<std::int8_t>(
            v->thr ? ((v->thr->direction[c] == ThresholdDirection::kGreaterEqual ? zc >= v->thr->tau[c]
                                                                                  : zc <= v->thr->tau[c])
                          ? 1
                          : -1)
                   : zc);
      }
    } else {
      const auto& r = std::get<ResnetBlock>(layer);
      const I32FeatureMap z = oracle::conv(s, unpack_bits(r.kernel), r.spec);
      for (std::size_t i = 0; i < z.size(); ++i) {
        const int c = static_cast<int>(i % z.shape().c);
        const int y = bn_q_value(oracle::clamp_i8(z.values()[i]), r.qbn.m_q[c], r.qbn.c_q[c],
                                 r.qbn.mc_format.frac_bits());
        x.values()[i] = saturate_i8(x.values()[i] + y);
      }
    }
    s = SignTensor(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) s.values()[i] = x.values()[i] >= 0 ? 1 : -1;
  }
  return x;
}

std::uint32_t crc(std::span<const std::uint8_t> b) {
  return static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

void rewrite_crc(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t c = crc(std::span(bytes).first(bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(c >> (8 * i));
}

}  // namespace

TEST_CASE("VGG chains match the oracle chain") {
  std::mt19937_64 rng(1);
  for (bool terminal_thr : {false, true}) {
    const Model m = vgg_model(rng, terminal_thr);
    const RealTensor x = random_input(rng, {2, 9, 8, 5});
    CHECK(run_model(m, x) == chain(m, x));
    CHECK(run_model(m, x, {3}) == chain(m, x));
  }
}

TEST_CASE("ResNet chains match the oracle chain") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const Model m = resnet_model(rng);
    const RealTensor x = random_input(rng, {1, 7, 7, 6});
    CHECK(run_model(m, x) == chain(m, x));
  }
}

TEST_CASE("serialization round trips every layer kind") {
  std::mt19937_64 rng(3);
  Model m = vgg_model(rng, false);
  BNParams bn = BNParams::identity(4);
  bn.gamma[2] = -0.25;
  m.layers.emplace_back(FloatBnLayer{pack_weights(oracle::random_signs({4, 1, 1, 7}, rng)), {}, bn});
  const Model r = resnet_model(rng);
  m.layers.insert(m.layers.end(), r.layers.begin(), r.layers.end());

  const std::vector<std::uint8_t> bytes = serialize_model(m);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "BDF1");
  CHECK((bytes[4] | bytes[5] << 8) == kModelVersion);
  CHECK((bytes[6] | bytes[7] << 8) == m.layers.size());
  CHECK(parse_model(bytes) == m);

  const auto path = std::filesystem::temp_directory_path() / "bitflow_test_model.bdf";
  save_model(m, path);
  CHECK(load_model(path) == m);
  std::filesystem::remove(path);
}

TEST_CASE("every single-byte corruption is detected") {
  std::mt19937_64 rng(4);
  const Model m = resnet_model(rng);
  const std::vector<std::uint8_t> bytes = serialize_model(m);
  for (std::size_t pos = 0; pos < bytes.size(); ++pos) {
    for (std::uint8_t flip : {0x01, 0x80, 0xFF}) {
      std::vector<std::uint8_t> bad = bytes;
      bad[pos] ^= flip;
      CHECK_THROWS_AS(parse_model(bad), Error);
    }
  }
}

TEST_CASE("structural errors are reported even with a valid checksum") {
  std::mt19937_64 rng(5);
  const std::vector<std::uint8_t> good = serialize_model(vgg_model(rng, true));

  std::vector<std::uint8_t> v2 = good;
  v2[4] = 2;
  rewrite_crc(v2);
  CHECK_THROWS_WITH_AS(parse_model(v2), doctest::Contains("version"), Error);

  std::vector<std::uint8_t> extra = good;
  extra.insert(extra.end() - 4, 0);
  rewrite_crc(extra);
  CHECK_THROWS_WITH_AS(parse_model(extra), doctest::Contains("trailing"), Error);

  std::vector<std::uint8_t> cut(good.begin(), good.begin() + 40);
  cut.insert(cut.end(), 4, 0);
  rewrite_crc(cut);
  CHECK_THROWS_AS(parse_model(cut), Error);

  std::vector<std::uint8_t> tag = good;
  tag[8] = 9;
  rewrite_crc(tag);
  CHECK_THROWS_WITH_AS(parse_model(tag), doctest::Contains("tag"), Error);

  CHECK_THROWS_AS(parse_model(std::vector<std::uint8_t>{'B', 'D'}), Error);
}

TEST_CASE("graphs that cannot run are rejected") {
  std::mt19937_64 rng(6);
  CHECK_THROWS_AS(run_model(Model{}, RealTensor({1, 2, 2, 1})), Error);

  Model vgg = vgg_model(rng, false);
  CHECK_THROWS_AS(run_model(vgg, RealTensor({1, 5, 5, 4})), Error);

  Model fl;
  fl.layers.emplace_back(FloatBnLayer{pack_weights(oracle::random_signs({2, 1, 1, 2}, rng)), {}, BNParams::identity(2)});
  CHECK_THROWS_WITH_AS(run_model(fl, RealTensor({1, 2, 2, 2})), doctest::Contains("converted"), Error);

  Model widen;
  widen.layers.emplace_back(
      ResnetBlock{pack_weights(oracle::random_signs({4, 3, 3, 2}, rng)), ConvSpec::same(3), small_qbn(rng, 4)});
  CHECK_THROWS_AS(run_model(widen, RealTensor({1, 4, 4, 2})), Error);

  Model packed_into_resnet;
  packed_into_resnet.layers.emplace_back(
      VggBlock{pack_weights(oracle::random_signs({3, 1, 1, 3}, rng)), {}, random_thr(rng, 3)});
  packed_into_resnet.layers.emplace_back(
      ResnetBlock{pack_weights(oracle::random_signs({3, 1, 1, 3}, rng)), {}, small_qbn(rng, 3)});
  CHECK_THROWS_AS(run_model(packed_into_resnet, RealTensor({1, 4, 4, 3})), Error);
}

TEST_CASE("diagnostics list constant threshold channels") {
  std::mt19937_64 rng(7);
  ThresholdParams t = random_thr(rng, 4);
  t.tau[1] = 128;
  t.direction[1] = ThresholdDirection::kGreaterEqual;
  t.tau[3] = -128;
  t.direction[3] = ThresholdDirection::kLessEqual;
  Model m;
  m.layers.emplace_back(VggBlock{pack_weights(oracle::random_signs({4, 1, 1, 2}, rng)), {}, t});
  const auto d = model_diagnostics(m);
  REQUIRE(d.size() == 1);
  CHECK(d[0] == "layer 0: constant threshold channels 1 3");
}
