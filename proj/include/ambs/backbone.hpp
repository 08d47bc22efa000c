#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ambs/autograd.hpp"
#include "ambs/tensor.hpp"

// Stage I: byte-level token handling, embeddings, the causal pre-norm
// decoder stack and the single shared computation of h_L.
namespace ambs {

struct BackboneConfig {
  int vocab_size = 256;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq = 64;
  float dropout_p = 0.1f;

  int head_dim() const { return d_model / n_heads; }
  // Throws ConfigError on an invalid geometry.
  void validate() const;
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct TokenSequence {
  std::vector<int> ids;

  static TokenSequence from_text(std::string_view text);
  std::string text() const;
  int length() const { return static_cast<int>(ids.size()); }
  // Throws VocabularyError naming the first out-of-range position, or
  // ContractError on an empty or over-long sequence.
  void validate(const BackboneConfig& cfg) const;
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct HiddenStates {
  int layer_index = 0;
  Tensor values;  // T×d
};

struct LayerWeights {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;  // d×d
  Tensor ln2_g, ln2_b;
  Tensor w1, b1;  // d×d_ff, d_ff
  Tensor w2, b2;  // d_ff×d, d
};

struct BackboneWeights {
  BackboneConfig cfg;
  Tensor token_emb;  // |V|×d
  Tensor pos_emb;    // T×d
  std::vector<LayerWeights> layers;
  Tensor lnf_g, lnf_b;

  static BackboneWeights init(const BackboneConfig& cfg, std::uint64_t seed);
  // Same geometry, every projection zero and every norm gain one.
  static BackboneWeights zeros(const BackboneConfig& cfg);

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  void check() const;
};

struct LayerVars {
  ag::Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

// Graph leaves bound to a copy of BackboneWeights.
struct BackboneVars {
  ag::Var token_emb, pos_emb;
  std::vector<LayerVars> layers;
  ag::Var lnf_g, lnf_b;

  static BackboneVars bind(const BackboneWeights& w, bool requires_grad);
  std::vector<ag::Var> all() const;
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
};

// Optional steering applied to the output of block `layer` (1-based; layer L
// is the top of the stack).
struct GraphSteering {
  int layer = 0;
  float alpha = 0.0f;
  ag::Var vector;  // [d]
};

// Counts Stage I executions and decoder-block row executions.
struct BackboneCounters {
  long shared_forwards = 0;
  long block_rows = 0;
};

// ---- graph-level building blocks -------------------------------------------------
ag::Var embed_graph(const TokenSequence& tokens, const BackboneVars& vars, int max_seq);
ag::Var decoder_block_graph(const ag::Var& h, const LayerVars& lw, const BackboneConfig& cfg,
                            const ForwardOptions& opt, int layer);
// embed -> blocks 1..L, with optional injection after block `steer->layer`.
ag::Var forward_graph(const TokenSequence& tokens, const BackboneVars& vars, const BackboneConfig& cfg,
                      const ForwardOptions& opt, const GraphSteering* steer = nullptr,
                      BackboneCounters* counters = nullptr);
// Runs blocks first_layer..L on states that already passed block first_layer-1.
ag::Var forward_from_layer(const ag::Var& h, int first_layer, const BackboneVars& vars, const BackboneConfig& cfg,
                           const ForwardOptions& opt, BackboneCounters* counters = nullptr);
ag::Var final_norm_graph(const ag::Var& h, const BackboneVars& vars);

// ---- value-level operations ------------------------------------------------------
HiddenStates embed(const TokenSequence& tokens, const BackboneWeights& w);
HiddenStates decoder_block(const HiddenStates& h, int layer, const BackboneWeights& w, bool train,
                           std::uint64_t dropout_seed = 0);
// Stage I. Increments counters->shared_forwards exactly once.
HiddenStates forward_shared(const TokenSequence& tokens, const BackboneWeights& w, bool train = false,
                            BackboneCounters* counters = nullptr, std::uint64_t dropout_seed = 0);
// Hidden states after block `layer` (0 = embeddings).
HiddenStates forward_to_layer(const TokenSequence& tokens, const BackboneWeights& w, int layer);
std::vector<HiddenStates> clone_for_branches(const HiddenStates& h_L, int n_branches);
// Mean-pooled h_L of a response, eval mode, outside any gradient graph.
Tensor encode_reference(const TokenSequence& response_tokens, const BackboneWeights& w);
Tensor final_norm(const Tensor& h, const BackboneWeights& w);

// ---- incremental execution for generation --------------------------------------
// Per-layer state of every processed position. outputs[l] holds the rows
// leaving block l (after injection when l is the steering layer); outputs[0]
// holds the embeddings. keys/values[l-1] cache block l's attention inputs.
struct DecodeState {
  std::vector<int> tokens;
  std::vector<std::vector<float>> outputs;
  std::vector<std::vector<float>> keys;
  std::vector<std::vector<float>> values;

  int length() const { return static_cast<int>(tokens.size()); }
  std::size_t payload_bytes() const;
  // Top-of-stack row for position t.
  std::span<const float> top_row(int t, int d) const;
};

struct SteeringSpec {
  int layer = 0;  // 1..L
  float alpha = 0.0f;
  const Tensor* vector = nullptr;
};

DecodeState make_decode_state(const BackboneConfig& cfg);
// Appends tokens and runs them through every block. block_rows is increased
// by (#new rows) × L.
void extend(DecodeState& state, std::span<const int> new_tokens, const BackboneWeights& w,
            const SteeringSpec* steer, long* block_rows);
// Branch state from an unsteered shared prefix: copies the prefix up to the
// steering layer, injects, and recomputes the blocks above it.
DecodeState fork_steered(const DecodeState& shared, const BackboneWeights& w, const SteeringSpec* steer,
                         long* block_rows);

}  // namespace ambs
