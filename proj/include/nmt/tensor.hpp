#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace nmt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. A rank-0 tensor holds a single scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D element access; the tensor must be a matrix.
  double& at(std::size_t row, std::size_t col);
  double at(std::size_t row, std::size_t col) const;

  double item() const;

  // Same data, different shape; sizes must agree.
  Tensor reshaped(Shape shape) const;

  // Gathers slices along `axis` (indices may repeat).
  Tensor gather(std::size_t axis, std::span<const int> indices) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// C (n×m) = op(A) · op(B), optionally accumulating into C. A is n×k (or k×n
// when transposed); B is k×m (or m×k when transposed).
void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
          std::size_t m, bool transpose_a, bool transpose_b, bool accumulate);

}  // namespace nmt
