#include "cma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include "cma/errors.hpp"

namespace cma {

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

std::size_t checked_numel(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) { data_.assign(checked_numel(shape_), 0.0f); }

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

std::span<float> Tensor::row(std::size_t r) {
  return std::span<float>(data_).subspan(r * shape_.back(), shape_.back());
}

std::span<const float> Tensor::row(std::size_t r) const {
  return std::span<const float>(data_).subspan(r * shape_.back(), shape_.back());
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const float* pb = b.data().data();
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    auto ra = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ra[p];
      const float* rb = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * rb[j];
    }
    auto ro = out.row(i);
    for (std::size_t j = 0; j < n; ++j) ro[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_transposed: cannot multiply " + shape_to_string(a.shape()) +
                         " by transpose of " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto ra = a.row(i);
    auto ro = out.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      auto rb = b.row(j);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(ra[p]) * rb[p];
      ro[j] = static_cast<float>(acc);
    }
  }
  return out;
}

void add_bias_inplace(Tensor& x, const Tensor& bias) {
  if (bias.numel() != x.cols()) {
    throw DimensionError("bias " + shape_to_string(bias.shape()) + " does not fit " +
                         shape_to_string(x.shape()));
  }
  auto b = bias.data();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
}

void softmax_inplace(std::span<float> x) {
  if (x.empty()) return;
  const float max = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(static_cast<double>(x[i]) - max);
    sum += e[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(e[i] / sum);
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range");
  const auto& s = x.shape();
  const std::size_t len = s[axis];
  const std::size_t inner = std::accumulate(s.begin() + axis + 1, s.end(), std::size_t{1},
                                            std::multiplies<>());
  const std::size_t outer = x.numel() / (len * inner);
  Tensor out = x;
  std::vector<float> slice(len);
  auto d = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t i = 0; i < len; ++i) slice[i] = d[base + i * inner];
      softmax_inplace(slice);
      for (std::size_t i = 0; i < len; ++i) d[base + i * inner] = slice[i];
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t k = x.cols();
  if (gamma.numel() != k || beta.numel() != k) {
    throw DimensionError("layer_norm: parameters do not fit " + shape_to_string(x.shape()));
  }
  Tensor out(x.shape());
  auto g = gamma.data();
  auto b = beta.data();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(k);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(k);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    auto o = out.row(r);
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = static_cast<float>((in[j] - mean) * inv * g[j] + b[j]);
    }
  }
  return out;
}

float gelu(float x) {
  const double v = x;
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return static_cast<float>(0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))));
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data()) v = gelu(v);
  return out;
}

}  // namespace cma
