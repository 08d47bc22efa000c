#include "ambs/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ambs/error.hpp"

namespace ambs {

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float step) {
  if (!(step > 0.0f)) throw ContractError("finite_difference_grad: step must be positive");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float orig = probe[i];
    probe[i] = orig + step;
    const double hi_x = probe[i];
    const double hi = f(probe);
    probe[i] = orig - step;
    const double lo_x = probe[i];
    const double lo = f(probe);
    probe[i] = orig;
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw NumericError("finite_difference_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    // Divide by the perturbation actually realised in float32.
    grad[i] = static_cast<float>((hi - lo) / (hi_x - lo_x));
  }
  return grad;
}

double relative_error(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: " + a.shape_string() + " vs " + b.shape_string());
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    diff += d * d;
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

}  // namespace ambs
