#pragma once

// Dense 4-axis (N, C, H, W) tensors templated on the compute scalar.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace dr1mask {

using Index = Eigen::Index;

/// Raised when an operation receives inputs that violate its shape or value contract.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an internal invariant is found broken; always a bug, never user input.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class DType : std::uint8_t { kSingle = 0, kDouble = 1 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                "tensors hold float or double");
  return std::is_same_v<Scalar, float> ? DType::kSingle : DType::kDouble;
}

struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  constexpr Index numel() const { return n * c * h * w; }
  constexpr Index plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  static constexpr DType kDType = dtype_of<Scalar>();

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw InvalidArgument("negative tensor extent " + shape.str());
    }
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> values) : shape_(shape), data_(std::move(values)) {
    if (static_cast<Index>(data_.size()) != shape.numel()) {
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape.str());
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, Scalar(0)); }
  static Tensor ones(Shape shape) { return Tensor(shape, Scalar(1)); }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, Scalar lo = Scalar(-1), Scalar hi = Scalar(1)) {
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng));
    return t;
  }

  template <typename Rng>
  static Tensor normal(Shape shape, Rng& rng, double stddev) {
    Tensor t(shape);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Sample n viewed as a C x (H*W) row-major matrix.
  MatrixMap sample(Index n) {
    return MatrixMap(data_.data() + n * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }
  ConstMatrixMap sample(Index n) const {
    return ConstMatrixMap(data_.data() + n * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }

  /// Whole buffer as a flat array expression.
  Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> array() {
    return {data_.data(), static_cast<Index>(data_.size())};
  }
  Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> array() const {
    return {data_.data(), static_cast<Index>(data_.size())};
  }

  Tensor reshaped(Shape shape) const {
    if (shape.numel() != size()) {
      throw InvalidArgument("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    Tensor t = *this;
    t.shape_ = shape;
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](Scalar v) { return static_cast<Other>(v); });
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<Scalar> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

/// max |a - b| / max(max |b|, floor); the normalized error used by every equivalence check.
template <typename Scalar>
double max_relative_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double floor = 1e-30) {
  require_same_shape(a.shape(), b.shape(), "max_relative_error");
  double diff = 0.0;
  double scale = floor;
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  return diff / scale;
}

template <typename Scalar>
double max_abs_difference(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_difference");
  double diff = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return diff;
}

}  // namespace dr1mask
