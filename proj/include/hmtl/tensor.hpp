#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "hmtl/error.hpp"

namespace hmtl {

// Dense row-major tensor. Double precision is the project default; float is
// selectable for benchmark realism. No strides, no views: the model keeps its
// parameters in flat blocks and hands spans to the kernels.
template <typename S>
class TensorT {
public:
  TensorT() = default;

  explicit TensorT(std::vector<size_t> shape)
      : shape_(std::move(shape)), data_(count_(shape_), S(0)) {}

  TensorT(std::vector<size_t> shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == count_(shape_),
            "tensor: data length does not match shape");
  }

  static TensorT matrix(size_t rows, size_t cols,
                        std::initializer_list<S> vals) {
    TensorT t({rows, cols});
    require(vals.size() == rows * cols, "tensor: initializer size mismatch");
    std::copy(vals.begin(), vals.end(), t.data_.begin());
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t extent(size_t d) const { return shape_.at(d); }
  size_t size() const { return data_.size(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](size_t i) { return data_[i]; }
  const S& operator[](size_t i) const { return data_[i]; }

  S& at2(size_t r, size_t c) { return data_[r * shape_[1] + c]; }
  const S& at2(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const S& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i)
      os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

private:
  static size_t count_(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
  }

  std::vector<size_t> shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<double>;

template <typename S>
inline void check_finite(const TensorT<S>& t, const char* where) {
  if (!t.all_finite())
    fail(ErrorCode::contract,
         std::string("non-finite values after ") + where);
}

}  // namespace hmtl
