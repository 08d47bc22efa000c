#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ambs {

// Dense row-major float32 array. Rank 1 and rank 2 cover everything the
// pipeline needs; higher ranks are representable but no op consumes them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor filled(std::vector<int> shape, float value);
  static Tensor vector(std::vector<float> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-2 accessors. A rank-1 tensor is treated as a single row.
  int rows() const noexcept;
  int cols() const noexcept;

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  std::span<float> row(int r);
  std::span<const float> row(int r) const;

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;
  void fill(float value);

  std::string shape_string() const;

  // FNV-1a over the raw little-endian payload and the shape. Used to prove
  // that frozen parameters are untouched.
  std::uint64_t checksum() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::string shape_string(const std::vector<int>& shape);

// Raw kernels on tensors. These do not record gradients; autograd.hpp wraps
// them into graph ops.
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m×k] · b[n×k]^T -> [m×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a[k×m]^T · b[k×n] -> [m×n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
Tensor mean_pool_rows(const Tensor& h);
float dot(std::span<const float> a, std::span<const float> b);
float l2_norm(std::span<const float> a);
// Throws DegenerateInputError when either argument has zero norm.
float cosine_similarity(const Tensor& a, const Tensor& b);
float frobenius_norm(const Tensor& a);

}  // namespace ambs
