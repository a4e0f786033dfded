#include "bitflow/netgraph.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "byte_io.hpp"

namespace bitflow {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

constexpr std::array<std::uint8_t, 4> kMagic{'B', 'D', 'F', '1'};

enum class LayerTag : std::uint8_t { kVgg = 1, kResnet = 2, kFloatBn = 3 };

// Upper bound on any single extent read from a file; keeps corrupt headers
// from requesting absurd allocations.
constexpr std::uint32_t kMaxExtent = 1u << 16;

I8FeatureMap saturating_add(const I8FeatureMap& a, const I8FeatureMap& b) {
  I8FeatureMap out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = saturate_i8(static_cast<int>(a.data()[i]) + b.data()[i]);
  }
  return out;
}

I8FeatureMap round_input(const RealTensor& x) {
  I8FeatureMap out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::clamp<double>(x.data()[i], kI8Min, kI8Max);
    out.data()[i] = static_cast<std::int8_t>(round_half_away(v));
  }
  return out;
}

const PackedKernelSet& kernel_of(const Layer& l) {
  return std::visit([](const auto& b) -> const PackedKernelSet& { return b.kernel; }, l);
}
const ConvSpec& spec_of(const Layer& l) {
  return std::visit([](const auto& b) -> const ConvSpec& { return b.spec; }, l);
}

void check_resnet_shapes(const Shape4& in, const Shape4& out) {
  if (!(in == out)) {
    throw Error("resnet block: identity shortcut needs conv output " + to_string(out) +
                " to equal block input " + to_string(in));
  }
}

void write_header(std::vector<std::uint8_t>& out, const PackedKernelSet& k, const ConvSpec& s,
                  LayerTag tag) {
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tag));
  for (int d : {k.out_channels(), k.filter_h(), k.filter_w(), k.in_channels()}) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (int v : {s.stride_h, s.stride_w, s.pad_h, s.pad_w}) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  for (auto w : k.words()) detail::put_le<std::uint64_t>(out, w);
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

I8FeatureMap to_i8(const Activation& a) {
  return std::visit(Overloaded{[](const I8FeatureMap& m) { return m; },
                               [](const BitPlaneTensor& b) { return I8FeatureMap(unpack_bits(b)); }},
                    a);
}

Activation run_vgg_block(const Activation& x, const VggBlock& b, ExecPolicy policy) {
  const I8FeatureMap y = std::visit(
      Overloaded{[&](const I8FeatureMap& m) { return conv_fused(m, nullptr, b.kernel, b.spec, {}, policy); },
                 [&](const BitPlaneTensor& bits) { return conv_i8(bits, b.kernel, b.spec, policy); }},
      x);
  if (b.terminal()) return y;
  return apply_threshold(y, *b.thr);
}

I8FeatureMap run_resnet_block(const I8FeatureMap& x, const ResnetBlock& b, ExecPolicy policy) {
  check_resnet_shapes(x.shape(), conv_output_shape(x.shape(), b.kernel.dims(), b.spec));
  const I8FeatureMap conv = conv_fused(x, nullptr, b.kernel, b.spec, {}, policy);
  return saturating_add(bn_q_forward(conv, b.qbn), x);
}

void check_model(const Model& m, const Shape4& input) {
  if (m.layers.empty()) throw Error("model: empty graph");
  check_shape(input, "model input");
  Shape4 shape = input;
  bool packed = false;  // previous block emitted bits only
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& layer = m.layers[i];
    const std::string where = "model layer " + std::to_string(i) + ": ";
    if (std::holds_alternative<FloatBnLayer>(layer)) {
      throw Error(where + "float BN layer must be converted before inference");
    }
    const PackedKernelSet& k = kernel_of(layer);
    if (k.in_channels() != shape.c) {
      throw Error(where + "expects " + std::to_string(k.in_channels()) + " channels, got " +
                  std::to_string(shape.c));
    }
    Shape4 out;
    try {
      out = conv_output_shape(shape, k.dims(), spec_of(layer));
    } catch (const Error& e) {
      throw Error(where + e.what());
    }
    if (const auto* v = std::get_if<VggBlock>(&layer)) {
      if (v->thr && v->thr->channels() != k.out_channels()) throw Error(where + "threshold channel mismatch");
      packed = !v->terminal();
    } else {
      const auto& r = std::get<ResnetBlock>(layer);
      if (packed) throw Error(where + "resnet block needs an 8-bit input, previous block emits bits");
      if (r.qbn.channels() != k.out_channels()) throw Error(where + "BN table channel mismatch");
      try {
        check_resnet_shapes(shape, out);
      } catch (const Error& e) {
        throw Error(where + e.what());
      }
      packed = false;
    }
    shape = out;
  }
}

I8FeatureMap run_model(const Model& m, const RealTensor& input, ExecPolicy policy) {
  check_model(m, input.shape());

  // The activation between blocks is an 8-bit map plus, after an inner VGG
  // block, the threshold that binarizes it; the next conv fuses that step.
  const BitPlaneTensor input_bits = pack_activations(input);
  I8FeatureMap current;
  const ThresholdParams* pending = nullptr;

  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const bool first = i == 0;
    const Layer& layer = m.layers[i];
    const auto convolve = [&](const PackedKernelSet& k, const ConvSpec& spec) {
      return first ? conv_i8(input_bits, k, spec, policy)
                   : conv_fused(current, pending, k, spec, {}, policy);
    };
    if (const auto* v = std::get_if<VggBlock>(&layer)) {
      current = convolve(v->kernel, v->spec);
      pending = v->thr ? &*v->thr : nullptr;
    } else {
      const auto& r = std::get<ResnetBlock>(layer);
      const I8FeatureMap shortcut = first ? round_input(input) : current;
      current = saturating_add(bn_q_forward(convolve(r.kernel, r.spec), r.qbn), shortcut);
      pending = nullptr;
    }
  }
  if (pending) return I8FeatureMap(unpack_bits(apply_threshold(current, *pending)));
  return current;
}

std::vector<std::string> model_diagnostics(const Model& m) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto* v = std::get_if<VggBlock>(&m.layers[i]);
    if (!v || !v->thr) continue;
    const auto constant = v->thr->constant_channels();
    if (constant.empty()) continue;
    std::string line = "layer " + std::to_string(i) + ": constant threshold channels";
    for (int ch : constant) line += " " + std::to_string(ch);
    out.push_back(std::move(line));
  }
  return out;
}

std::vector<std::uint8_t> serialize_model(const Model& m) {
  if (m.layers.size() > 0xFFFF) throw Error("model: too many layers");
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  detail::put_le<std::uint16_t>(out, kModelVersion);
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(m.layers.size()));
  for (const Layer& layer : m.layers) {
    std::visit(
        Overloaded{
            [&](const VggBlock& b) {
              write_header(out, b.kernel, b.spec, LayerTag::kVgg);
              detail::put_le<std::uint8_t>(out, b.thr ? 1 : 0);
              if (!b.thr) return;
              b.thr->validate();
              for (int ch = 0; ch < b.thr->channels(); ++ch) {
                detail::put_le<std::int16_t>(out, b.thr->tau[ch]);
                detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(b.thr->direction[ch]));
              }
            },
            [&](const ResnetBlock& b) {
              write_header(out, b.kernel, b.spec, LayerTag::kResnet);
              write_qbn(out, b.qbn);
            },
            [&](const FloatBnLayer& b) {
              write_header(out, b.kernel, b.spec, LayerTag::kFloatBn);
              for (int ch = 0; ch < b.bn.channels(); ++ch) {
                for (double v : {b.bn.gamma[ch], b.bn.beta[ch], b.bn.mu[ch], b.bn.sigma[ch]}) {
                  detail::put_le<double>(out, v);
                }
              }
            }},
        layer);
  }
  detail::put_le<std::uint32_t>(out, crc32_of(out));
  return out;
}

Model parse_model(std::span<const std::uint8_t> bytes, std::vector<std::string>* diagnostics) {
  if (bytes.size() < kMagic.size() + 8) throw Error("model file: truncated");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw Error("model file: bad magic");
  const auto body = bytes.first(bytes.size() - 4);
  std::size_t tail = body.size();
  if (detail::get_le<std::uint32_t>(bytes, tail) != crc32_of(body)) throw Error("model file: CRC mismatch");

  std::size_t pos = kMagic.size();
  const auto version = detail::get_le<std::uint16_t>(body, pos);
  if (version != kModelVersion) throw Error("model file: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint16_t>(body, pos);

  Model m;
  for (int i = 0; i < count; ++i) {
    const auto tag = detail::get_le<std::uint8_t>(body, pos);
    std::array<std::uint32_t, 4> dims{};
    for (auto& d : dims) {
      d = detail::get_le<std::uint32_t>(body, pos);
      if (d == 0 || d > kMaxExtent) throw Error("model file: bad kernel dimension");
    }
    ConvSpec spec;
    for (int* v : {&spec.stride_h, &spec.stride_w, &spec.pad_h, &spec.pad_w}) {
      const auto raw = detail::get_le<std::uint32_t>(body, pos);
      if (raw > kMaxExtent) throw Error("model file: bad conv spec");
      *v = static_cast<int>(raw);
    }
    if (spec.stride_h == 0 || spec.stride_w == 0) throw Error("model file: zero stride");
    const std::uint64_t word_count = std::uint64_t{dims[0]} * dims[1] * dims[2] *
                                     static_cast<std::uint64_t>(words_for_channels(static_cast<int>(dims[3])));
    if (word_count * 8 > body.size() - pos) throw Error("model file: truncated weights");
    PackedKernelSet kernel({static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                            static_cast<int>(dims[3])});
    for (auto& w : kernel.mutable_words()) w = detail::get_le<std::uint64_t>(body, pos);
    if (!kernel.pad_bits_clear()) throw Error("model file: weight pad bits set");
    const int channels = kernel.out_channels();

    switch (static_cast<LayerTag>(tag)) {
      case LayerTag::kVgg: {
        VggBlock b{std::move(kernel), spec, std::nullopt};
        const auto has = detail::get_le<std::uint8_t>(body, pos);
        if (has > 1) throw Error("model file: bad threshold flag");
        if (has) {
          ThresholdParams t;
          for (int ch = 0; ch < channels; ++ch) {
            t.tau.push_back(detail::get_le<std::int16_t>(body, pos));
            const auto dir = detail::get_le<std::uint8_t>(body, pos);
            if (dir > 1) throw Error("model file: bad threshold direction");
            t.direction.push_back(static_cast<ThresholdDirection>(dir));
          }
          t.validate();
          b.thr = std::move(t);
        }
        m.layers.emplace_back(std::move(b));
        break;
      }
      case LayerTag::kResnet:
        m.layers.emplace_back(ResnetBlock{std::move(kernel), spec, read_qbn(body, pos, channels)});
        break;
      case LayerTag::kFloatBn: {
        BNParams bn;
        for (auto* v : {&bn.gamma, &bn.beta, &bn.mu, &bn.sigma}) v->resize(channels);
        for (int ch = 0; ch < channels; ++ch) {
          for (auto* v : {&bn.gamma, &bn.beta, &bn.mu, &bn.sigma}) (*v)[ch] = detail::get_le<double>(body, pos);
        }
        bn.validate();
        m.layers.emplace_back(FloatBnLayer{std::move(kernel), spec, std::move(bn)});
        break;
      }
      default:
        throw Error("model file: unknown layer tag " + std::to_string(tag));
    }
  }
  if (pos != body.size()) throw Error("model file: trailing bytes");
  if (diagnostics) *diagnostics = model_diagnostics(m);
  return m;
}

void save_model(const Model& m, const std::filesystem::path& path) {
  const auto bytes = serialize_model(m);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path, std::vector<std::string>* diagnostics) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_model(bytes, diagnostics);
}

}  // namespace bitflow
