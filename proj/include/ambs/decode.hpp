#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ambs/autograd.hpp"
#include "ambs/backbone.hpp"
#include "ambs/steering.hpp"
#include "ambs/tensor.hpp"

// Vocabulary projection, token distributions and per-branch generation.
namespace ambs {

struct OutputHead {
  Tensor w_o;  // d×|V|
  Tensor b_o;  // |V|

  static OutputHead init(int d_model, int vocab_size, std::uint64_t seed);
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  void check(const BackboneConfig& cfg) const;
};

enum class DecodeMode { greedy, temperature };

struct GenerationConfig {
  int max_new_tokens = 16;
  DecodeMode mode = DecodeMode::greedy;
  float temperature = 1.0f;
  std::uint64_t seed = 0;
  std::optional<int> stop_token = 10;  // '\n'

  void validate() const;
};

// z = Ĥ W_o + b_o, one row per position.
Tensor project(const HiddenStates& H_hat, const OutputHead& head);
ag::Var project_graph(const ag::Var& h, const ag::Var& w_o, const ag::Var& b_o);
Tensor next_token_dist(const Tensor& logits_row);

// Returns prompt + generated tokens (the stop token, when hit, is kept).
// A null branch decodes the unsteered model.
TokenSequence generate_branch(const TokenSequence& prompt, const SteeringBranch* branch, const BackboneWeights& w,
                              const OutputHead& head, const GenerationConfig& cfg);

struct SharingReport {
  int n_branches = 0;
  int prompt_len = 0;
  long shared_forwards = 0;       // Stage I prompt passes
  long prefix_shared_blocks = 0;  // block-row executions of the shared prompt pass
  long prefix_branch_blocks = 0;  // per-branch recomputation above an injection layer < L
  long decode_blocks = 0;         // block-row executions of generated tokens
  std::size_t mem_bytes = 0;      // payload of every state alive at the end

  long prefix_blocks() const { return prefix_shared_blocks + prefix_branch_blocks; }
  long total_blocks() const { return prefix_blocks() + decode_blocks; }
};

struct GenerateAllResult {
  std::vector<TokenSequence> outputs;
  SharingReport report;
  double shared_seconds = 0.0;
  std::vector<double> branch_seconds;
};

// Stage I runs once over the prompt; each branch forks from the shared
// states and then decodes on its own. Branch i samples with seed cfg.seed + i.
GenerateAllResult generate_all(const TokenSequence& prompt, const std::vector<SteeringBranch>& branches,
                               const BackboneWeights& w, const OutputHead& head, const GenerationConfig& cfg);

// Same workload without sharing: each branch runs its own full prompt pass.
GenerateAllResult generate_independent(const TokenSequence& prompt, const std::vector<SteeringBranch>& branches,
                                       const BackboneWeights& w, const OutputHead& head,
                                       const GenerationConfig& cfg);

// Language-model pretraining of the backbone and output head.
struct LmSequence {
  TokenSequence tokens;
  int loss_from = 1;  // first position whose token is a prediction target
};

struct LmTrainConfig {
  int epochs = 20;
  int batch_size = 16;
  float lr = 3e-3f;
  float weight_decay = 0.0f;
  std::uint64_t seed = 0;
};

struct LmReport {
  std::vector<double> epoch_loss;
};

// epoch_data(e) supplies the sequences of epoch e (in training order).
LmReport train_language_model(const std::function<std::vector<LmSequence>(int)>& epoch_data, BackboneWeights& w,
                              OutputHead& head, const LmTrainConfig& cfg);

// Mean next-token loss of the targets, eval mode.
double language_model_loss(const std::vector<LmSequence>& data, const BackboneWeights& w, const OutputHead& head);

struct Transcript {
  std::string prompt;
  std::string axis;  // empty for the unsteered model
  std::vector<int> tokens;
  std::string text;
  float alpha = 0.0f;
  int layer = 0;
  std::uint64_t seed = 0;
};

void write_transcript(std::ostream& out, const Transcript& t);

}  // namespace ambs
