#include "ambs/optim.hpp"

#include <cmath>

#include "ambs/error.hpp"

namespace ambs {

AdamWState AdamWState::for_param(const Tensor& param, float lr, float weight_decay) {
  AdamWState s;
  s.m = Tensor(param.shape());
  s.v = Tensor(param.shape());
  s.lr = lr;
  s.weight_decay = weight_decay;
  return s;
}

void adamw_update(Tensor& param, const Tensor& grad, AdamWState& state) {
  if (!param.same_shape(grad)) {
    throw DimensionError("adamw_update: param " + param.shape_string() + " vs grad " + grad.shape_string());
  }
  if (state.m.empty()) state.m = Tensor(param.shape());
  if (state.v.empty()) state.v = Tensor(param.shape());
  if (!state.m.same_shape(param) || !state.v.same_shape(param)) {
    throw DimensionError("adamw_update: moment shape " + state.m.shape_string() + " vs param " + param.shape_string());
  }
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = b1 * state.m[i] + (1.0 - b1) * g;
    const double v = b2 * state.v[i] + (1.0 - b2) * g * g;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    double p = param[i];
    p -= state.lr * state.weight_decay * p;
    p -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    param[i] = static_cast<float>(p);
  }
}

void sgd_update(Tensor& param, const Tensor& grad, float lr) {
  if (!param.same_shape(grad)) {
    throw DimensionError("sgd_update: param " + param.shape_string() + " vs grad " + grad.shape_string());
  }
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
}

}  // namespace ambs
