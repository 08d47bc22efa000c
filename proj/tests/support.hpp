#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ambs/backbone.hpp"
#include "ambs/tensor.hpp"

namespace ambs::testing {

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, float stddev = 1.0f) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> n(0.0f, stddev);
  for (auto& x : t.data()) x = n(rng);
  return t;
}

inline Tensor random_uniform(std::vector<int> shape, std::mt19937_64& rng, float lo, float hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& x : t.data()) x = u(rng);
  return t;
}

inline int random_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline TokenSequence random_tokens(int n, int vocab, std::mt19937_64& rng) {
  TokenSequence s;
  for (int i = 0; i < n; ++i) s.ids.push_back(random_int(rng, 0, vocab - 1));
  return s;
}

// L=2, d=8, T=4, |V|=11 with two heads.
inline BackboneConfig tiny_config() {
  BackboneConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 4;
  c.dropout_p = 0.0f;
  return c;
}

// A slightly larger model for decoding tests: byte vocabulary, short context.
inline BackboneConfig small_config() {
  BackboneConfig c;
  c.vocab_size = 256;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq = 32;
  return c;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace ambs::testing
