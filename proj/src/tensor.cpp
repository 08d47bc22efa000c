#include "ambs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "ambs/error.hpp"

namespace ambs {

namespace {

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int s : shape) {
    if (s <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    n *= static_cast<std::size_t>(s);
  }
  return n;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + t.shape_string());
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) {
    throw DimensionError("tensor payload of " + std::to_string(data_.size()) + " elements does not match shape " +
                         ambs::shape_string(shape_));
  }
}

Tensor Tensor::filled(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::vector(std::vector<float> values) {
  const int n = static_cast<int>(values.size());
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const int r = static_cast<int>(rows.size());
  const int c = r ? static_cast<int>(rows.begin()->size()) : 0;
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

int Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : shape_[0];
}

int Tensor::cols() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.back();
}

std::span<float> Tensor::row(int r) {
  return {data_.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
}

std::span<const float> Tensor::row(int r) const {
  return {data_.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

std::string Tensor::shape_string() const { return ambs::shape_string(shape_); }

std::uint64_t Tensor::checksum() const noexcept {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (int s : shape_) mix(&s, sizeof s);
  mix(data_.data(), data_.size() * sizeof(float));
  return h;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor c({m, n});
  std::vector<double> acc(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* ar = a.data().data() + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const float* br = b.data().data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) acc[j] += av * br[j];
    }
    float* cr = c.data().data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) cr[j] = static_cast<float>(acc[j]);
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + a.shape_string() + " x " + b.shape_string() +
                         "^T");
  }
  Tensor c({m, n});
  for (int i = 0; i < m; ++i) {
    const float* ar = a.data().data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const float* br = b.data().data() + static_cast<std::size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += static_cast<double>(ar[p]) * br[p];
      c.at(i, j) = static_cast<float>(s);
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  const int k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: inner dimensions disagree for " + a.shape_string() + "^T x " +
                         b.shape_string());
  }
  std::vector<double> acc(static_cast<std::size_t>(m) * n, 0.0);
  for (int p = 0; p < k; ++p) {
    const float* ar = a.data().data() + static_cast<std::size_t>(p) * m;
    const float* br = b.data().data() + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* cr = acc.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < acc.size(); ++i) c[i] = static_cast<float>(acc[i]);
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.shape());
  const int n = x.cols();
  for (int r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    const float mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(static_cast<double>(in[j]) - mx);
    for (int j = 0; j < n; ++j) out[j] = static_cast<float>(std::exp(static_cast<double>(in[j]) - mx) / sum);
  }
  return y;
}

Tensor mean_pool_rows(const Tensor& h) {
  if (h.empty() || h.rows() < 1) throw DegenerateInputError("mean_pool_rows: empty sequence");
  const int t = h.rows(), d = h.cols();
  Tensor out({d});
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int r = 0; r < t; ++r) s += h.at(r, j);
    out[j] = static_cast<float>(s / t);
  }
  return out;
}

float dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(s);
}

float l2_norm(std::span<const float> a) {
  double s = 0.0;
  for (float v : a) s += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(s));
}

float cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: " + a.shape_string() + " vs " + b.shape_string());
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm argument");
  const double c = ab / (std::sqrt(aa) * std::sqrt(bb));
  return static_cast<float>(std::clamp(c, -1.0, 1.0));
}

float frobenius_norm(const Tensor& a) { return l2_norm(a.data()); }

}  // namespace ambs
