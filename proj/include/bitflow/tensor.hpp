#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace bitflow {

/// Raised for any contract violation (shape mismatch, bad file, invalid params).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NHWC extents. For kernels the same four slots hold (out, fh, fw, in).
struct Shape4 {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w) * static_cast<std::size_t>(c);
  }
  bool operator==(const Shape4&) const = default;
};

std::string to_string(const Shape4& s);

/// Throws if any extent is non-positive or the element count would not fit
/// a signed 32-bit index per axis product.
void check_shape(const Shape4& s, const char* what);

/// Dense NHWC tensor with contiguous row-major storage.
template <typename Scalar>
class Tensor4 {
 public:
  using value_type = Scalar;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape, Scalar fill = Scalar{})
      : shape_(shape), data_(shape.count(), fill) {}
  Tensor4(Shape4 shape, std::vector<Scalar> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count()) throw Error("Tensor4: data size does not match shape");
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int n, int y, int x, int c) const {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  Scalar& operator()(int n, int y, int x, int c) { return data_[index(n, y, x, c)]; }
  Scalar operator()(int n, int y, int x, int c) const { return data_[index(n, y, x, c)]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& values() { return data_; }
  const std::vector<Scalar>& values() const { return data_; }

  /// (n*h*w) x c view; one row per pixel.
  Eigen::Map<RowMatrix> pixels() {
    return {data_.data(), static_cast<Eigen::Index>(shape_.n) * shape_.h * shape_.w, shape_.c};
  }
  Eigen::Map<const RowMatrix> pixels() const {
    return {data_.data(), static_cast<Eigen::Index>(shape_.n) * shape_.h * shape_.w, shape_.c};
  }

  bool operator==(const Tensor4&) const = default;

 private:
  Shape4 shape_{};
  std::vector<Scalar> data_;
};

using RealTensor = Tensor4<float>;
using SignTensor = Tensor4<std::int8_t>;  // values in {-1, +1}
using I8FeatureMap = Tensor4<std::int8_t>;
using I32FeatureMap = Tensor4<std::int32_t>;

inline constexpr int kI8Max = 127;
inline constexpr int kI8Min = -127;

/// Symmetric 8-bit saturation; -128 is never produced.
constexpr std::int8_t saturate_i8(std::int64_t v) {
  return static_cast<std::int8_t>(v > kI8Max ? kI8Max : (v < kI8Min ? kI8Min : v));
}

/// True iff every value of the map lies in [-127, 127].
bool is_symmetric_i8(const I8FeatureMap& x);

}  // namespace bitflow
