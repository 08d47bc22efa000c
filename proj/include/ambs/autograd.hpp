#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ambs/tensor.hpp"

// Reverse-mode differentiation over the closed set of ops the pipeline uses.
//
// A graph is built eagerly: every op computes its value immediately and, when
// any input requires a gradient, records a closure that pushes the output
// gradient back into its inputs. backward() runs those closures in reverse
// topological order. Leaf gradients accumulate across calls until
// zero_grad(); interior gradients are recomputed on every call.
namespace ambs::ag {

struct Node {
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return !backward_fn; }
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var leaf(Tensor value, bool requires_grad = true);
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
// x[T×n] + b[n], broadcast over rows.
Var add_row(const Var& x, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var add_scalar(const Var& x, float s);
Var relu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var softmax_rows(const Var& x);
// Entries above the diagonal become a large negative constant; their
// gradient is zero.
Var causal_mask(const Var& scores);
Var mean_pool_rows(const Var& h);
// Norms in the denominator are clamped at norm_floor. A floor of zero turns a
// zero-norm argument into a DegenerateInputError.
Var cosine_similarity(const Var& a, const Var& b, float norm_floor = 0.0f);
// 1 - cos(a, b) with the norm floor of the steering objective.
Var cosine_loss(const Var& a, const Var& b, float norm_floor = 1e-8f);
// mean over rows i of 1 - cos(y_i, t_i); t is treated as a constant.
Var mean_row_cosine_loss(const Var& y, const Tensor& t, float norm_floor = 1e-8f);
// Inverted dropout with a mask drawn from `seed`. Identity when !train or p == 0.
Var dropout(const Var& x, float p, std::uint64_t seed, bool train);
Var embedding(const Var& table, std::span<const int> ids);
Var sum(const Var& x);
Var transpose(const Var& x);
// Same data, new shape of equal element count.
Var reshape(const Var& x, std::vector<int> shape);
Var slice_cols(const Var& x, int begin, int end);
Var concat_cols(const std::vector<Var>& parts);
// Mean negative log-likelihood over rows; target -1 skips a row.
Var cross_entropy(const Var& logits, std::span<const int> targets);

// Populates d(root)/d(leaf) for every leaf that requires a gradient.
// Throws ContractError if root is not scalar.
void backward(const Var& root);

}  // namespace ambs::ag
