#include "nmt/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "nmt/errors.hpp"

namespace nmt {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto extent : shape_) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  }
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& row : rows) {
    if (row.size() != m) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{n, m}, std::move(data));
}

double& Tensor::at(std::size_t row, std::size_t col) {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_string(shape_));
  return data_[row * shape_[1] + col];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_string(shape_));
  return data_[row * shape_[1] + col];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() needs a single-element tensor, got " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::gather(std::size_t axis, std::span<const int> indices) const {
  if (axis >= rank()) throw DimensionError("gather axis out of range for " + shape_string(shape_));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape_[i];
  for (std::size_t i = axis + 1; i < rank(); ++i) inner *= shape_[i];
  const std::size_t extent = shape_[axis];
  Shape out_shape = shape_;
  out_shape[axis] = indices.size();
  std::vector<double> out(outer * indices.size() * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const auto idx = static_cast<std::size_t>(indices[j]);
      if (indices[j] < 0 || idx >= extent) throw IndexError("gather index " + std::to_string(indices[j]) + " out of range");
      const double* src = data_.data() + (o * extent + idx) * inner;
      std::copy(src, src + inner, out.data() + (o * indices.size() + j) * inner);
    }
  }
  return Tensor(std::move(out_shape), std::move(out));
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
          bool transpose_a, bool transpose_b, bool accumulate) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  const auto rows = static_cast<Eigen::Index>(n);
  const auto inner = static_cast<Eigen::Index>(k);
  const auto cols = static_cast<Eigen::Index>(m);
  Eigen::Map<RowMat> out(c, rows, cols);
  if (!accumulate) out.setZero();
  if (n == 0 || m == 0 || k == 0) return;
  if (!transpose_a && !transpose_b) {
    out.noalias() += ConstMap(a, rows, inner) * ConstMap(b, inner, cols);
  } else if (!transpose_a && transpose_b) {
    out.noalias() += ConstMap(a, rows, inner) * ConstMap(b, cols, inner).transpose();
  } else if (transpose_a && !transpose_b) {
    out.noalias() += ConstMap(a, inner, rows).transpose() * ConstMap(b, inner, cols);
  } else {
    out.noalias() += ConstMap(a, inner, rows).transpose() * ConstMap(b, cols, inner).transpose();
  }
}

}  // namespace nmt
