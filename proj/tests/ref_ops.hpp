#pragma once

// Double-precision reference forwards, written independently of the library
// kernels. They serve as finite-difference oracles (float32 output rounding
// alone would put central differences at step 1e-3 near the 1e-4 tolerance)
// and as forward oracles for the float implementation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ambs/backbone.hpp"
#include "ambs/tensor.hpp"

namespace ambs::ref {

struct Mat {
  int r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int rows, int cols) : r(rows), c(cols), v(static_cast<std::size_t>(rows) * cols, 0.0) {}
  double& operator()(int i, int j) { return v[static_cast<std::size_t>(i) * c + j]; }
  double operator()(int i, int j) const { return v[static_cast<std::size_t>(i) * c + j]; }
};

// Rank-1 tensors become a single row.
inline Mat from(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t[i];
  return m;
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat o(a.r, b.c);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < b.c; ++j) {
      double s = 0.0;
      for (int p = 0; p < a.c; ++p) s += a(i, p) * b(p, j);
      o(i, j) = s;
    }
  return o;
}

inline Mat tr(const Mat& a) {
  Mat o(a.c, a.r);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) o(j, i) = a(i, j);
  return o;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Mat add_row(Mat a, const Mat& row) {
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) a(i, j) += row.v[j];
  return a;
}

inline Mat mul(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] *= b.v[i];
  return a;
}

inline Mat scale(Mat a, double s) {
  for (auto& x : a.v) x *= s;
  return a;
}

inline Mat relu(Mat a) {
  for (auto& x : a.v) x = std::max(x, 0.0);
  return a;
}

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
  Mat o(x.r, x.c);
  for (int i = 0; i < x.r; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < x.c; ++j) mean += x(i, j);
    mean /= x.c;
    for (int j = 0; j < x.c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= x.c;
    for (int j = 0; j < x.c; ++j) o(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * g.v[j] + b.v[j];
  }
  return o;
}

// Row softmax; with causal set, entries above the diagonal get probability 0.
inline Mat softmax(const Mat& x, bool causal = false) {
  Mat o(x.r, x.c);
  for (int i = 0; i < x.r; ++i) {
    const int last = causal ? i : x.c - 1;
    double mx = x(i, 0);
    for (int j = 0; j <= last; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (int j = 0; j <= last; ++j) z += std::exp(x(i, j) - mx);
    for (int j = 0; j <= last; ++j) o(i, j) = std::exp(x(i, j) - mx) / z;
  }
  return o;
}

inline Mat mean_pool(const Mat& h) {
  Mat o(1, h.c);
  for (int i = 0; i < h.r; ++i)
    for (int j = 0; j < h.c; ++j) o(0, j) += h(i, j) / h.r;
  return o;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b, double floor = 0.0) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::max(std::sqrt(aa), floor) * std::max(std::sqrt(bb), floor));
}

inline Mat scalar(double x) {
  Mat m(1, 1);
  m.v[0] = x;
  return m;
}

inline Mat cols(const Mat& x, int b, int e) {
  Mat o(x.r, e - b);
  for (int i = 0; i < x.r; ++i)
    for (int j = b; j < e; ++j) o(i, j - b) = x(i, j);
  return o;
}

inline Mat hcat(const std::vector<Mat>& parts) {
  int c = 0;
  for (const auto& p : parts) c += p.c;
  Mat o(parts[0].r, c);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p.r; ++i)
      for (int j = 0; j < p.c; ++j) o(i, off + j) = p(i, j);
    off += p.c;
  }
  return o;
}

struct Layer {
  Mat ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

inline Layer layer(const LayerWeights& w) {
  return {from(w.ln1_g), from(w.ln1_b), from(w.wq), from(w.wk), from(w.wv), from(w.wo),
          from(w.ln2_g), from(w.ln2_b), from(w.w1), from(w.b1), from(w.w2), from(w.b2)};
}

// Pre-norm block in eval mode. `min_preact` receives the smallest |FFN
// pre-activation| so callers can avoid ReLU kinks.
inline Mat block(const Mat& h, const Layer& w, int n_heads, double* min_preact = nullptr) {
  const Mat x = layer_norm(h, w.ln1_g, w.ln1_b);
  const Mat q = mm(x, w.wq), k = mm(x, w.wk), v = mm(x, w.wv);
  const int hd = h.c / n_heads;
  std::vector<Mat> heads;
  for (int i = 0; i < n_heads; ++i) {
    const Mat s = scale(mm(cols(q, i * hd, (i + 1) * hd), tr(cols(k, i * hd, (i + 1) * hd))), 1.0 / std::sqrt(hd));
    heads.push_back(mm(softmax(s, true), cols(v, i * hd, (i + 1) * hd)));
  }
  const Mat h1 = add(h, mm(hcat(heads), w.wo));
  const Mat pre = add_row(mm(layer_norm(h1, w.ln2_g, w.ln2_b), w.w1), w.b1);
  if (min_preact) {
    *min_preact = 1e300;
    for (double p : pre.v) *min_preact = std::min(*min_preact, std::abs(p));
  }
  return add(h1, add_row(mm(relu(pre), w.w2), w.b2));
}

// relu(x W1 + b1) W2 + b2 on a single row.
inline Mat mlp(const Mat& x, const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2,
               double* min_preact = nullptr) {
  const Mat pre = add_row(mm(x, w1), b1);
  if (min_preact) {
    *min_preact = 1e300;
    for (double p : pre.v) *min_preact = std::min(*min_preact, std::abs(p));
  }
  return add_row(mm(relu(pre), w2), b2);
}

}  // namespace ambs::ref
