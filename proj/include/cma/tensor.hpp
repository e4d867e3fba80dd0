#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cma {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

// Dense row-major f32 tensor. Rank >= 1, every dimension >= 1.
class Tensor {
 public:
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  // Number of slices along the last axis, and the slice itself.
  std::size_t rows() const noexcept { return data_.size() / shape_.back(); }
  std::size_t cols() const noexcept { return shape_.back(); }
  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// a[m x k] * b[k x n]; products accumulate in f64.
Tensor matmul(const Tensor& a, const Tensor& b);

// a[m x k] * transpose(b[n x k]).
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

// Adds bias[n] to every row of x[... x n].
void add_bias_inplace(Tensor& x, const Tensor& bias);

// Numerically stable softmax of one slice, computed in f64.
void softmax_inplace(std::span<float> x);

// Softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);

// Per-last-axis normalization with affine gamma/beta; two-pass f64 statistics.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Tanh-approximation GELU as used by the GPT2 reference implementation.
float gelu(float x);
Tensor gelu(const Tensor& x);

}  // namespace cma
