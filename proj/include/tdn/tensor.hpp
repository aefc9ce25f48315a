#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "tdn/archdsl.hpp"

namespace tdn {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Batch of images in NHWC order (batch-major, channel-minor).
template <typename Scalar>
struct Tensor {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  int batch = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  Array data;

  Tensor() = default;
  Tensor(int n, int h, int w, int c) : batch(n), height(h), width(w), channels(c) {
    data = Array::Zero(static_cast<Eigen::Index>(n) * h * w * c);
  }
  Tensor(int n, const TensorShape& s) : Tensor(n, s.height, s.width, s.channels) {}

  TensorShape shape() const { return {height, width, channels}; }
  Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }
  Eigen::Index sample_size() const { return pixels() * channels; }

  Scalar* sample(int n) { return data.data() + n * sample_size(); }
  const Scalar* sample(int n) const { return data.data() + n * sample_size(); }

  /// One sample viewed as a (pixels x channels) row-major matrix.
  Eigen::Map<RowMatrix<Scalar>> sample_matrix(int n) { return {sample(n), pixels(), channels}; }
  Eigen::Map<const RowMatrix<Scalar>> sample_matrix(int n) const { return {sample(n), pixels(), channels}; }

  /// The whole batch viewed as (batch*pixels x channels).
  Eigen::Map<RowMatrix<Scalar>> rows() { return {data.data(), batch * pixels(), channels}; }
  Eigen::Map<const RowMatrix<Scalar>> rows() const { return {data.data(), batch * pixels(), channels}; }

  Scalar& at(int n, int y, int x, int c) {
    return data[((static_cast<Eigen::Index>(n) * height + y) * width + x) * channels + c];
  }
  Scalar at(int n, int y, int x, int c) const {
    return data[((static_cast<Eigen::Index>(n) * height + y) * width + x) * channels + c];
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.batch = batch;
    t.height = height;
    t.width = width;
    t.channels = channels;
    t.data = data.template cast<Other>();
    return t;
  }
};

}  // namespace tdn
