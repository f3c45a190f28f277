#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace latentflow {

// Dense row-major tensor of 64-bit floats. Plain value type: copies are
// deep, moves are cheap, and a tensor never aliases another. A rank-0
// tensor holds exactly one element and represents a scalar.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor vector(std::initializer_list<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> v);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return shape_.empty(); }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator()() { return data_[0]; }
  double operator()() const { return data_[0]; }
  double& operator()(std::size_t i) { return data_[i]; }
  double operator()(std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& buffer() const { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  std::string shape_str() const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Plain (non-recorded) arithmetic used by optimizers, data generation and IO.
// The differentiable versions live on the Tape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul_elem(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n) or (m,k)x(k)
Tensor transposed(const Tensor& a);
double dot_all(const Tensor& a, const Tensor& b);
double sum_all(const Tensor& a);
double l2_norm(const Tensor& a);

std::size_t shape_numel(const std::vector<std::size_t>& shape);

}  // namespace latentflow
