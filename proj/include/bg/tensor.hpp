#pragma once

// Dense row-major float64 tensor. Rank is arbitrary but every operation in
// the network stack views a tensor as a [rows, cols] matrix where cols is the
// trailing dimension; that keeps batched math on plain GEMMs.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include "bg/common.hpp"

namespace bg::nn {

using EigenMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMatrix>;
using ConstMatMap = Eigen::Map<const EigenMatrix>;

struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;
  // Populated on parameter leaves after a backward pass when the caller asks
  // for it; absent otherwise.
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(std::vector<size_t> shape_, std::vector<double> data_)
      : shape(std::move(shape_)), data(std::move(data_)) {
    require(element_count(shape) == data.size(),
            "Tensor: shape does not match data length");
  }

  static size_t element_count(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<size_t> shape) {
    size_t n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor filled(std::vector<size_t> shape, double value) {
    size_t n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor row(std::vector<double> values) {
    size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor column(std::vector<double> values) {
    size_t n = values.size();
    return Tensor({n, 1}, std::move(values));
  }

  size_t size() const { return data.size(); }
  size_t rank() const { return shape.size(); }

  // trailing dimension
  size_t cols() const {
    require(!shape.empty(), "Tensor: rank-0 tensor has no columns");
    return shape.back();
  }

  size_t rows() const {
    const size_t c = cols();
    return c == 0 ? 0 : data.size() / c;
  }

  double& at(size_t r, size_t c) { return data[r * cols() + c]; }
  double at(size_t r, size_t c) const { return data[r * cols() + c]; }

  MatMap mat() {
    return MatMap(data.data(), static_cast<Eigen::Index>(rows()),
                  static_cast<Eigen::Index>(cols()));
  }
  ConstMatMap mat() const {
    return ConstMatMap(data.data(), static_cast<Eigen::Index>(rows()),
                       static_cast<Eigen::Index>(cols()));
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline MatMap as_mat(std::vector<double>& buf, size_t rows, size_t cols) {
  return MatMap(buf.data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

inline ConstMatMap as_mat(const std::vector<double>& buf, size_t rows,
                          size_t cols) {
  return ConstMatMap(buf.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

}  // namespace bg::nn
