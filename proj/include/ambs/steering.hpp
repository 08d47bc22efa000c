#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ambs/autograd.hpp"
#include "ambs/backbone.hpp"
#include "ambs/optim.hpp"
#include "ambs/tensor.hpp"

// Stage II: per-objective steering vectors, the policy and reference heads,
// the cosine objective and the branch training loop.
namespace ambs {

enum class Axis { helpfulness = 0, harmlessness = 1, honesty = 2 };
inline constexpr std::array<Axis, 3> kAllAxes{Axis::helpfulness, Axis::harmlessness, Axis::honesty};

std::string_view axis_name(Axis a);
// Throws DataError for anything but the three axis names.
Axis parse_axis(std::string_view name);

enum class OptimizerMode {
  alg1,   // plain SGD on v, heads untouched
  paper,  // AdamW on v and on the policy head
};
std::string_view optimizer_mode_name(OptimizerMode m);
OptimizerMode parse_optimizer_mode(std::string_view name);

struct SteeringBranch {
  int branch_id = 0;
  Axis axis = Axis::helpfulness;
  Tensor v;  // [d]
  float alpha = 1.0f;
  int inject_layer = 1;
  AdamWState optimizer;

  // v ~ N(0, init_std²), drawn from a stream keyed by (seed, branch_id).
  static SteeringBranch init(int branch_id, Axis axis, int d_model, int inject_layer, float alpha, float init_std,
                             std::uint64_t seed);
  void check(int d_model, int n_layers) const;
};

// Two-layer MLP on a pooled vector: relu(x W1 + b1) W2 + b2.
struct MlpHead {
  Tensor w1, b1;  // d×d_hid, d_hid
  Tensor w2, b2;  // d_hid×k, k
  bool frozen = false;

  static MlpHead init(int d_in, int d_hid, int k, std::uint64_t seed);
  static MlpHead zeros(int d_in, int d_hid, int k);

  int in_dim() const { return w1.rows(); }
  int out_dim() const { return w2.cols(); }
  // x is [d] or [m×d]; returns [k] or [m×k] respectively.
  Tensor apply(const Tensor& x) const;
  std::uint64_t checksum() const;
  std::vector<std::pair<std::string, Tensor*>> named(const std::string& prefix);
  std::vector<std::pair<std::string, const Tensor*>> named(const std::string& prefix) const;
};

using PolicyHead = MlpHead;
using ReferenceHead = MlpHead;

struct HeadVars {
  ag::Var w1, b1, w2, b2;
  static HeadVars bind(const MlpHead& h, bool requires_grad);
  std::vector<ag::Var> all() const { return {w1, b1, w2, b2}; }
};

// x is [d] or [m×d].
ag::Var head_graph(const ag::Var& x, const HeadVars& h);

struct BranchEmbeddings {
  Tensor y_plus;
  Tensor y_minus;
};

// H̃[t] = H[t] + α v for every row.
HiddenStates inject(const HiddenStates& H, const SteeringBranch& branch);
ag::Var inject_graph(const ag::Var& H, const ag::Var& v, float alpha);

Tensor policy_embed(const HiddenStates& H_tilde, const PolicyHead& f_theta);
Tensor reference_embed(const Tensor& enc_r, const ReferenceHead& f_phi);

inline constexpr float kNormFloor = 1e-8f;
// 1 - cos(y_+, y_-) with norms clamped at kNormFloor.
float cosine_loss(const BranchEmbeddings& y);

// Everything one evaluation of the branch objective produces.
struct BranchObjective {
  float loss = 0.0f;
  float cosine = 0.0f;
  Tensor grad_v;        // ∂L/∂v
  Tensor grad_states;   // ∂L/∂H̃ (empty unless requested)
  BranchEmbeddings y;
};

// inject -> pool -> f_θ -> cosine loss against `target`, with gradients.
// H holds the states leaving block `branch.inject_layer`; blocks above it run
// inside the graph. A null f_theta compares the pooled states with the target
// directly. When `policy_grads` is non-null the f_θ gradients are added into
// it (w1, b1, w2, b2 order).
BranchObjective branch_objective(const HiddenStates& H, const SteeringBranch& branch, const PolicyHead* f_theta,
                                 const Tensor& target, const BackboneWeights& w, bool want_state_grad = false,
                                 std::vector<Tensor>* policy_grads = nullptr);

// Plain SGD (alg1) or AdamW (paper). lr overrides the optimizer's own rate.
// Throws ContractError when grad is empty.
void steering_step(SteeringBranch& branch, const Tensor& grad, OptimizerMode mode, float lr);

// Ĥ = H̃ - η_h ∇_{H̃} L. η_h = 0 returns H̃ unchanged.
HiddenStates refine_hidden(const HiddenStates& H_tilde, const Tensor& grad, float eta_h);

// Applies one AdamW step per head tensor. Throws ContractError on a frozen head.
void update_head(MlpHead& head, const std::vector<Tensor>& grads, std::vector<AdamWState>& states, float lr);

struct TrainingSample {
  TokenSequence prompt;
  TokenSequence response;
  Axis axis = Axis::helpfulness;
};

struct SteeringTrainConfig {
  OptimizerMode mode = OptimizerMode::paper;
  int epochs = 5;
  int batch_size = 8;
  int grad_accum = 4;
  float lr = 1e-2f;       // steering vectors
  float head_lr = 1e-3f;  // policy head, paper mode only
  float weight_decay = 0.0f;
  bool linear_decay = true;
  std::uint64_t seed = 0;
  // When non-empty (one [d] vector per axis), the objective becomes
  // 1 - cos(pool(H̃), anchor) and the heads are bypassed.
  std::vector<Tensor> direct_anchors;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::vector<double> branch_loss;    // per branch, mean over the epoch
  std::vector<double> branch_cosine;  // per branch, mean over the epoch
  float lr_first = 0.0f;
  float lr_last = 0.0f;
};

struct TrainingReport {
  std::vector<EpochRecord> epochs;
  long optimizer_steps = 0;
  long shared_forwards = 0;
  std::vector<float> step_lr;
};

// Called after each epoch with the branches and head as they stand.
using EpochHook = std::function<void(const EpochRecord&, const std::vector<SteeringBranch>&, const PolicyHead&)>;

// Optional mid-run state so training can resume at an epoch boundary.
struct TrainingCursor {
  int next_epoch = 0;
  long step = 0;
  std::vector<AdamWState> head_states;
};

// Learning rate at optimizer step `step` of `total`: linear to zero.
float scheduled_lr(float base, long step, long total, bool linear_decay);

TrainingReport train_branches(const std::vector<TrainingSample>& samples, std::vector<SteeringBranch>& branches,
                              PolicyHead& f_theta, const ReferenceHead& f_phi, const BackboneWeights& w,
                              const SteeringTrainConfig& cfg, const EpochHook& hook = {},
                              TrainingCursor* cursor = nullptr, int stop_after_epoch = -1);

struct LabeledExample {
  Tensor enc;     // [d]
  Tensor target;  // [k] anchor
};

struct ReferencePretrainConfig {
  int epochs = 200;
  float lr = 1e-2f;
  std::uint64_t seed = 0;
};

// Fits f_φ to map each encoding onto its anchor under the cosine loss, then
// freezes it. Returns the final mean loss.
double pretrain_reference(const std::vector<LabeledExample>& labeled, ReferenceHead& f_phi,
                          const ReferencePretrainConfig& cfg);

// One random unit vector in R^k per axis.
std::vector<Tensor> make_axis_anchors(int k, int n_axes, std::uint64_t seed);

// Text format, one branch per line: axis alpha layer d v_0 ... v_{d-1}
void write_steering_vectors(std::ostream& out, const std::vector<SteeringBranch>& branches);
std::vector<SteeringBranch> read_steering_vectors(std::istream& in);

}  // namespace ambs
