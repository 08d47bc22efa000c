#pragma once

#include <functional>

#include "ambs/tensor.hpp"

namespace ambs {

// Central differences (f(x + δe_i) - f(x - δe_i)) / 2δ per coordinate,
// evaluated in double around float32 perturbations of x.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float step = 1e-3f);

// ||a - b|| / max(||a||, ||b||); zero when both vanish.
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace ambs
