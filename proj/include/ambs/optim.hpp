#pragma once

#include "ambs/tensor.hpp"

namespace ambs {

struct AdamWState {
  Tensor m;
  Tensor v;
  long step = 0;
  float lr = 2e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;

  static AdamWState for_param(const Tensor& param, float lr, float weight_decay = 0.0f);
};

// Decoupled weight decay Adam step with bias correction. Moments are
// allocated on first use; state.step is incremented.
void adamw_update(Tensor& param, const Tensor& grad, AdamWState& state);

// param -= lr * grad
void sgd_update(Tensor& param, const Tensor& grad, float lr);

}  // namespace ambs
