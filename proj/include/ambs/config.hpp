#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ambs/backbone.hpp"
#include "ambs/steering.hpp"

namespace ambs {

// Every knob of a run. Serialized as flat `section.key = value` lines;
// '#' starts a comment.
struct ExperimentConfig {
  BackboneConfig backbone;

  std::uint64_t seed = 0;
  std::string out_dir = "out";
  bool deterministic = true;

  // data
  std::string data_dir;  // empty: <out_dir>/data
  int train_size = 512;  // per axis
  int test_size = 64;    // per axis

  // pretraining of the base model and the reference head
  int lm_epochs = 12;
  int lm_batch = 16;
  float lm_lr = 3e-3f;
  float aligned_fraction = 0.4f;
  int ref_epochs = 60;
  float ref_lr = 1e-2f;

  // steering
  std::vector<Axis> axes{kAllAxes.begin(), kAllAxes.end()};
  float alpha = 1.0f;
  int inject_layer = 0;  // 0 selects the top layer
  float init_std = 0.02f;
  int k = 32;
  int d_hid = 128;
  float eta_h = 0.0f;
  bool policy_from_reference = true;

  // training
  OptimizerMode optimizer_mode = OptimizerMode::paper;
  int epochs = 5;
  int batch_size = 8;
  int grad_accum = 4;
  float lr = 5e-2f;
  float head_lr = 1e-5f;  // the shared head barely moves; larger values wash out the axis split
  float weight_decay = 0.0f;

  // decoding and sweeps
  int max_new_tokens = 12;
  std::vector<int> sweep_layers{1, 2, 3, 4};
  std::vector<float> sweep_alphas{0.25f, 0.5f, 1.0f, 2.0f};

  int resolved_layer() const { return inject_layer == 0 ? backbone.n_layers : inject_layer; }
  std::string resolved_data_dir() const;

  // Throws ConfigError.
  void validate() const;
  std::string serialize() const;
  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::string& path);

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

}  // namespace ambs
