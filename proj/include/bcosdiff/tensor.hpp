#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bcosdiff {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

// Error taxonomy. The CLI maps each family to its own exit code.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

/// Dense row-major n-dimensional array. A rank-0 tensor (shape {}) holds one
/// element and serves as the scalar type.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() : data_(Array::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_ = Array::Zero(numel(shape_));
  }

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor: " + std::to_string(data_.size()) + " elements for shape " +
                       bcosdiff::to_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<S> values) : Tensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != data_.size()) {
      throw ShapeError("tensor: initializer size does not match shape " + bcosdiff::to_string(shape_));
    }
    std::copy(values.begin(), values.end(), data_.data());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }
  static Tensor scalar(S value) { return Tensor(Shape{}, Array::Constant(1, value)); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Index size() const { return data_.size(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  S item() const {
    if (size() != 1) throw ShapeError("item(): tensor of shape " + bcosdiff::to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  template <typename... I>
  S& at(I... idx) {
    return data_[offset({static_cast<Index>(idx)...})];
  }
  template <typename... I>
  S at(I... idx) const {
    return data_[offset({static_cast<Index>(idx)...})];
  }

  /// Row-major matrix view with the given row count; columns are inferred.
  MatrixMap matrix(Index rows) {
    return MatrixMap(data_.data(), rows, rows ? size() / rows : 0);
  }
  ConstMatrixMap matrix(Index rows) const {
    return ConstMatrixMap(data_.data(), rows, rows ? size() / rows : 0);
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("reshape " + bcosdiff::to_string(shape_) + " -> " + bcosdiff::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, data_.template cast<T>());
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Bitwise equality of shape and elements.
  bool identical(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(data_.data(), data_.data() + size(), other.data_.data(),
                      [](S a, S b) { return std::memcmp(&a, &b, sizeof(S)) == 0; });
  }

 private:
  static void check_dims(const Shape& shape) {
    for (Index d : shape) {
      if (d < 1) throw ShapeError("tensor dimensions must be >= 1, got " + bcosdiff::to_string(shape));
    }
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank()) throw ShapeError("index rank mismatch");
    Index off = 0;
    std::size_t k = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[k]) throw ShapeError("index out of range");
      off = off * shape_[k++] + i;
    }
    return off;
  }

  Shape shape_;
  Array data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

}  // namespace bcosdiff
