#include "ambs/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "ambs/error.hpp"

namespace ambs {

using ag::Var;

std::string_view axis_name(Axis a) {
  switch (a) {
    case Axis::helpfulness: return "helpfulness";
    case Axis::harmlessness: return "harmlessness";
    case Axis::honesty: return "honesty";
  }
  return "unknown";
}

Axis parse_axis(std::string_view name) {
  for (Axis a : kAllAxes)
    if (axis_name(a) == name) return a;
  throw DataError("unknown axis '" + std::string(name) + "'");
}

std::string_view optimizer_mode_name(OptimizerMode m) { return m == OptimizerMode::alg1 ? "alg1" : "paper"; }

OptimizerMode parse_optimizer_mode(std::string_view name) {
  if (name == "alg1") return OptimizerMode::alg1;
  if (name == "paper") return OptimizerMode::paper;
  throw ConfigError("unknown optimizer mode '" + std::string(name) + "' (expected alg1 or paper)");
}

SteeringBranch SteeringBranch::init(int branch_id, Axis axis, int d_model, int inject_layer, float alpha,
                                    float init_std, std::uint64_t seed) {
  SteeringBranch b;
  b.branch_id = branch_id;
  b.axis = axis;
  b.alpha = alpha;
  b.inject_layer = inject_layer;
  b.v = Tensor({d_model});
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(branch_id) + 1);
  std::normal_distribution<float> dist(0.0f, init_std);
  for (auto& x : b.v.data()) x = dist(rng);
  return b;
}

void SteeringBranch::check(int d_model, int n_layers) const {
  if (v.rank() != 1 || v.size() != static_cast<std::size_t>(d_model)) {
    throw DimensionError("steering vector " + v.shape_string() + " does not match d_model " + std::to_string(d_model));
  }
  if (!v.all_finite()) throw NumericError("steering vector for " + std::string(axis_name(axis)) + " is not finite");
  if (!(alpha >= 0.0f) || !std::isfinite(alpha)) throw ContractError("steering magnitude must be finite and >= 0");
  if (inject_layer < 1 || inject_layer > n_layers) {
    throw ContractError("inject layer " + std::to_string(inject_layer) + " outside [1, " + std::to_string(n_layers) +
                        "]");
  }
}

// ---------------------------------------------------------------------------
// heads

MlpHead MlpHead::init(int d_in, int d_hid, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto gauss = [&rng](std::vector<int> shape, float sd) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, sd);
    for (auto& x : t.data()) x = dist(rng);
    return t;
  };
  MlpHead h;
  h.w1 = gauss({d_in, d_hid}, 1.0f / std::sqrt(static_cast<float>(d_in)));
  h.b1 = Tensor({d_hid});
  h.w2 = gauss({d_hid, k}, 1.0f / std::sqrt(static_cast<float>(d_hid)));
  h.b2 = Tensor({k});
  return h;
}

MlpHead MlpHead::zeros(int d_in, int d_hid, int k) {
  MlpHead h;
  h.w1 = Tensor({d_in, d_hid});
  h.b1 = Tensor({d_hid});
  h.w2 = Tensor({d_hid, k});
  h.b2 = Tensor({k});
  return h;
}

Tensor MlpHead::apply(const Tensor& x) const {
  HeadVars vars = HeadVars::bind(*this, false);
  return head_graph(Var::constant(x), vars).value();
}

std::uint64_t MlpHead::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor* t : {&w1, &b1, &w2, &b2}) h = (h ^ t->checksum()) * 1099511628211ull;
  return h;
}

std::vector<std::pair<std::string, Tensor*>> MlpHead::named(const std::string& prefix) {
  return {{prefix + ".w1", &w1}, {prefix + ".b1", &b1}, {prefix + ".w2", &w2}, {prefix + ".b2", &b2}};
}

std::vector<std::pair<std::string, const Tensor*>> MlpHead::named(const std::string& prefix) const {
  return {{prefix + ".w1", &w1}, {prefix + ".b1", &b1}, {prefix + ".w2", &w2}, {prefix + ".b2", &b2}};
}

HeadVars HeadVars::bind(const MlpHead& h, bool requires_grad) {
  return {Var::leaf(h.w1, requires_grad), Var::leaf(h.b1, requires_grad), Var::leaf(h.w2, requires_grad),
          Var::leaf(h.b2, requires_grad)};
}

Var head_graph(const Var& x, const HeadVars& h) {
  const bool single = x.value().rank() == 1;
  Var in = single ? ag::reshape(x, {1, static_cast<int>(x.value().size())}) : x;
  Var hid = ag::relu(ag::add_row(ag::matmul(in, h.w1), h.b1));
  Var out = ag::add_row(ag::matmul(hid, h.w2), h.b2);
  return single ? ag::reshape(out, {out.value().cols()}) : out;
}

// ---------------------------------------------------------------------------
// Stage II operations

HiddenStates inject(const HiddenStates& H, const SteeringBranch& branch) {
  if (H.values.rank() != 2 || branch.v.size() != static_cast<std::size_t>(H.values.cols())) {
    throw DimensionError("inject: states " + H.values.shape_string() + " vs steering vector " +
                         branch.v.shape_string());
  }
  HiddenStates out = H;
  for (int t = 0; t < out.values.rows(); ++t) {
    auto row = out.values.row(t);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += branch.alpha * branch.v[c];
  }
  return out;
}

Var inject_graph(const Var& H, const Var& v, float alpha) { return ag::add_row(H, ag::scale(v, alpha)); }

Tensor policy_embed(const HiddenStates& H_tilde, const PolicyHead& f_theta) {
  if (H_tilde.values.cols() != f_theta.in_dim()) {
    throw DimensionError("policy_embed: states " + H_tilde.values.shape_string() + " vs head input " +
                         std::to_string(f_theta.in_dim()));
  }
  return f_theta.apply(mean_pool_rows(H_tilde.values));
}

Tensor reference_embed(const Tensor& enc_r, const ReferenceHead& f_phi) {
  if (enc_r.size() != static_cast<std::size_t>(f_phi.in_dim())) {
    throw DimensionError("reference_embed: encoding " + enc_r.shape_string() + " vs head input " +
                         std::to_string(f_phi.in_dim()));
  }
  return f_phi.apply(enc_r);
}

float cosine_loss(const BranchEmbeddings& y) {
  return ag::cosine_loss(Var::constant(y.y_plus), Var::constant(y.y_minus), kNormFloor).value()[0];
}

BranchObjective branch_objective(const HiddenStates& H, const SteeringBranch& branch, const PolicyHead* f_theta,
                                 const Tensor& target, const BackboneWeights& w, bool want_state_grad,
                                 std::vector<Tensor>* policy_grads) {
  branch.check(w.cfg.d_model, std::max(w.cfg.n_layers, branch.inject_layer));
  if (H.layer_index != branch.inject_layer) {
    throw ContractError("branch_objective: states from layer " + std::to_string(H.layer_index) +
                        " but the branch injects after layer " + std::to_string(branch.inject_layer));
  }
  Var states = Var::leaf(H.values, want_state_grad);
  Var v = Var::leaf(branch.v, true);
  Var steered = inject_graph(states, v, branch.alpha);
  Var top = steered;
  if (branch.inject_layer < w.cfg.n_layers) {
    BackboneVars vars;
    vars.layers.resize(w.layers.size());
    for (int l = branch.inject_layer + 1; l <= w.cfg.n_layers; ++l) {
      const LayerWeights& s = w.layers[l - 1];
      auto c = [](const Tensor& t) { return Var::constant(t); };
      vars.layers[l - 1] = LayerVars{c(s.ln1_g), c(s.ln1_b), c(s.wq), c(s.wk), c(s.wv), c(s.wo),
                                     c(s.ln2_g), c(s.ln2_b), c(s.w1), c(s.b1), c(s.w2), c(s.b2)};
    }
    top = forward_from_layer(steered, branch.inject_layer + 1, vars, w.cfg, ForwardOptions{});
  }
  Var pooled = ag::mean_pool_rows(top);
  HeadVars hv;
  Var y_plus = pooled;
  if (f_theta) {
    hv = HeadVars::bind(*f_theta, policy_grads != nullptr);
    y_plus = head_graph(pooled, hv);
  }
  Var cos = ag::cosine_similarity(y_plus, Var::constant(target), kNormFloor);
  Var loss = ag::add_scalar(ag::scale(cos, -1.0f), 1.0f);
  ag::backward(loss);

  BranchObjective out;
  out.loss = loss.value()[0];
  out.cosine = cos.value()[0];
  out.grad_v = v.has_grad() ? v.grad() : Tensor(branch.v.shape());
  if (want_state_grad) out.grad_states = steered.has_grad() ? steered.grad() : Tensor(H.values.shape());
  out.y = {y_plus.value(), target};
  if (policy_grads && f_theta) {
    auto vars = hv.all();
    if (policy_grads->empty()) {
      for (const auto& p : vars) policy_grads->emplace_back(p.value().shape());
    }
    for (std::size_t i = 0; i < vars.size(); ++i) {
      if (!vars[i].has_grad()) continue;
      auto& dst = (*policy_grads)[i];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += vars[i].grad()[j];
    }
  }
  return out;
}

void steering_step(SteeringBranch& branch, const Tensor& grad, OptimizerMode mode, float lr) {
  if (grad.empty()) throw ContractError("steering_step: gradient not populated for branch " +
                                        std::to_string(branch.branch_id));
  if (!grad.same_shape(branch.v)) {
    throw DimensionError("steering_step: gradient " + grad.shape_string() + " vs vector " + branch.v.shape_string());
  }
  if (!grad.all_finite()) throw NumericError("steering_step: non-finite gradient");
  if (mode == OptimizerMode::alg1) {
    sgd_update(branch.v, grad, lr);
  } else {
    branch.optimizer.lr = lr;
    adamw_update(branch.v, grad, branch.optimizer);
  }
}

HiddenStates refine_hidden(const HiddenStates& H_tilde, const Tensor& grad, float eta_h) {
  if (eta_h == 0.0f) return H_tilde;
  if (!grad.same_shape(H_tilde.values)) {
    throw DimensionError("refine_hidden: gradient " + grad.shape_string() + " vs states " +
                         H_tilde.values.shape_string());
  }
  HiddenStates out = H_tilde;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= eta_h * grad[i];
  return out;
}

void update_head(MlpHead& head, const std::vector<Tensor>& grads, std::vector<AdamWState>& states, float lr) {
  if (head.frozen) throw ContractError("attempt to update a frozen head");
  Tensor* params[] = {&head.w1, &head.b1, &head.w2, &head.b2};
  if (grads.size() != 4) throw ContractError("update_head: expected 4 gradients");
  if (states.empty()) {
    for (Tensor* p : params) states.push_back(AdamWState::for_param(*p, lr));
  }
  for (int i = 0; i < 4; ++i) {
    states[i].lr = lr;
    adamw_update(*params[i], grads[i], states[i]);
  }
}

// ---------------------------------------------------------------------------
// training loop

float scheduled_lr(float base, long step, long total, bool linear_decay) {
  if (!linear_decay || total <= 0) return base;
  return base * static_cast<float>(static_cast<double>(total - step) / static_cast<double>(total));
}

namespace {

struct SampleCache {
  HiddenStates states;  // after the branch's injection layer
  Tensor target;        // y_- or direct anchor
  int branch = 0;
};

}  // namespace

TrainingReport train_branches(const std::vector<TrainingSample>& samples, std::vector<SteeringBranch>& branches,
                              PolicyHead& f_theta, const ReferenceHead& f_phi, const BackboneWeights& w,
                              const SteeringTrainConfig& cfg, const EpochHook& hook, TrainingCursor* cursor,
                              int stop_after_epoch) {
  TrainingReport report;
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch_size < 1 || cfg.grad_accum < 1) throw ConfigError("batch_size and grad_accum must be >= 1");
  if (cfg.epochs == 0 || samples.empty()) return report;
  for (auto& b : branches) b.check(w.cfg.d_model, w.cfg.n_layers);
  const bool direct = !cfg.direct_anchors.empty();
  if (direct && cfg.direct_anchors.size() != kAllAxes.size()) {
    throw ConfigError("direct objective needs one anchor per axis");
  }

  // Stage I once per sample; every branch reads the cached states.
  std::vector<SampleCache> cache(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    auto it = std::find_if(branches.begin(), branches.end(), [&](const SteeringBranch& b) { return b.axis == s.axis; });
    if (it == branches.end()) {
      throw DataError("sample " + std::to_string(i) + ": axis " + std::string(axis_name(s.axis)) +
                      " has no configured branch");
    }
    SampleCache& c = cache[i];
    c.branch = static_cast<int>(it - branches.begin());
    const int layer = it->inject_layer;
    if (layer == w.cfg.n_layers) {
      BackboneCounters counters;
      c.states = forward_shared(s.prompt, w, false, &counters);
      report.shared_forwards += counters.shared_forwards;
    } else {
      c.states = forward_to_layer(s.prompt, w, layer);
      ++report.shared_forwards;
    }
    if (direct) {
      c.target = cfg.direct_anchors[static_cast<std::size_t>(s.axis)];
    } else {
      c.target = reference_embed(encode_reference(s.response, w), f_phi);
    }
  }

  const std::size_t chunk = static_cast<std::size_t>(cfg.batch_size) * cfg.grad_accum;
  const long steps_per_epoch = static_cast<long>((samples.size() + chunk - 1) / chunk);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const bool train_head = cfg.mode == OptimizerMode::paper && !direct && !f_theta.frozen;

  TrainingCursor local;
  TrainingCursor& cur = cursor ? *cursor : local;
  for (auto& b : branches) {
    if (b.optimizer.step == 0) {
      b.optimizer.weight_decay = cfg.weight_decay;
      b.optimizer.lr = cfg.lr;
    }
  }

  const std::size_t nb = branches.size();
  for (int epoch = cur.next_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 1000003ull + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.branch_loss.assign(nb, 0.0);
    rec.branch_cosine.assign(nb, 0.0);
    std::vector<long> seen(nb, 0);
    double loss_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += chunk) {
      const std::size_t stop = std::min(order.size(), start + chunk);
      const float lr = scheduled_lr(cfg.lr, cur.step, total_steps, cfg.linear_decay);
      const float head_lr = scheduled_lr(cfg.head_lr, cur.step, total_steps, cfg.linear_decay);
      if (start == 0) rec.lr_first = lr;
      rec.lr_last = lr;
      report.step_lr.push_back(lr);

      std::vector<Tensor> grad_v(nb);
      std::vector<Tensor> head_grads;
      for (std::size_t j = start; j < stop; ++j) {
        const SampleCache& c = cache[order[j]];
        const auto& branch = branches[c.branch];
        BranchObjective obj = branch_objective(c.states, branch, direct ? nullptr : &f_theta, c.target, w, false,
                                               train_head ? &head_grads : nullptr);
        if (!std::isfinite(obj.loss)) throw NumericError("non-finite steering loss at epoch " +
                                                         std::to_string(epoch + 1));
        if (grad_v[c.branch].empty()) grad_v[c.branch] = Tensor(branch.v.shape());
        for (std::size_t k = 0; k < obj.grad_v.size(); ++k) grad_v[c.branch][k] += obj.grad_v[k];
        rec.branch_loss[c.branch] += obj.loss;
        rec.branch_cosine[c.branch] += obj.cosine;
        ++seen[c.branch];
        loss_sum += obj.loss;
      }
      const float inv = 1.0f / static_cast<float>(stop - start);
      for (std::size_t b = 0; b < nb; ++b) {
        if (grad_v[b].empty()) continue;
        for (auto& g : grad_v[b].data()) g *= inv;
        steering_step(branches[b], grad_v[b], cfg.mode, lr);
      }
      if (train_head && !head_grads.empty()) {
        for (auto& g : head_grads)
          for (auto& x : g.data()) x *= inv;
        update_head(f_theta, head_grads, cur.head_states, head_lr);
      }
      ++cur.step;
      ++report.optimizer_steps;
    }

    rec.mean_loss = loss_sum / static_cast<double>(samples.size());
    for (std::size_t b = 0; b < nb; ++b) {
      if (seen[b] == 0) continue;
      rec.branch_loss[b] /= static_cast<double>(seen[b]);
      rec.branch_cosine[b] /= static_cast<double>(seen[b]);
    }
    report.epochs.push_back(rec);
    cur.next_epoch = epoch + 1;
    if (hook) hook(rec, branches, f_theta);
    if (stop_after_epoch >= 0 && epoch + 1 >= stop_after_epoch) break;
  }
  return report;
}

// ---------------------------------------------------------------------------
// reference head

double pretrain_reference(const std::vector<LabeledExample>& labeled, ReferenceHead& f_phi,
                          const ReferencePretrainConfig& cfg) {
  if (f_phi.frozen) throw ContractError("reference head is frozen");
  if (labeled.empty()) throw DataError("pretrain_reference: no labeled examples");
  const int d = f_phi.in_dim(), k = f_phi.out_dim();
  const int m = static_cast<int>(labeled.size());
  Tensor x({m, d}), t({m, k});
  for (int i = 0; i < m; ++i) {
    const auto& ex = labeled[i];
    if (ex.enc.size() != static_cast<std::size_t>(d) || ex.target.size() != static_cast<std::size_t>(k)) {
      throw DimensionError("pretrain_reference: example " + std::to_string(i) + " has wrong dimensions");
    }
    std::copy(ex.enc.data().begin(), ex.enc.data().end(), x.row(i).begin());
    std::copy(ex.target.data().begin(), ex.target.data().end(), t.row(i).begin());
  }

  constexpr int kBatch = 64;
  std::vector<AdamWState> states;
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  const long steps_per_epoch = (m + kBatch - 1) / kBatch;
  const long total = steps_per_epoch * cfg.epochs;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < m; start += kBatch) {
      const int n = std::min(kBatch, m - start);
      Tensor xb({n, d}), tb({n, k});
      for (int r = 0; r < n; ++r) {
        std::copy(x.row(order[start + r]).begin(), x.row(order[start + r]).end(), xb.row(r).begin());
        std::copy(t.row(order[start + r]).begin(), t.row(order[start + r]).end(), tb.row(r).begin());
      }
      HeadVars hv = HeadVars::bind(f_phi, true);
      Var loss = ag::mean_row_cosine_loss(head_graph(Var::constant(xb), hv), tb, kNormFloor);
      ag::backward(loss);
      std::vector<Tensor> grads;
      for (const auto& p : hv.all()) grads.push_back(p.has_grad() ? p.grad() : Tensor(p.value().shape()));
      update_head(f_phi, grads, states, scheduled_lr(cfg.lr, step++, total, true));
    }
  }
  HeadVars hv = HeadVars::bind(f_phi, false);
  const double final_loss = ag::mean_row_cosine_loss(head_graph(Var::constant(x), hv), t, kNormFloor).value()[0];
  f_phi.frozen = true;
  return final_loss;
}

std::vector<Tensor> make_axis_anchors(int k, int n_axes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<Tensor> out;
  for (int a = 0; a < n_axes; ++a) {
    Tensor t({k});
    for (auto& x : t.data()) x = dist(rng);
    const float n = l2_norm(t.data());
    for (auto& x : t.data()) x /= n;
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// text import/export

void write_steering_vectors(std::ostream& out, const std::vector<SteeringBranch>& branches) {
  char buf[32];
  for (const auto& b : branches) {
    out << axis_name(b.axis);
    std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(b.alpha));
    out << buf << ' ' << b.inject_layer << ' ' << b.v.size();
    for (float x : b.v.data()) {
      std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(x));
      out << buf;
    }
    out << '\n';
  }
}

std::vector<SteeringBranch> read_steering_vectors(std::istream& in) {
  std::vector<SteeringBranch> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string axis;
    SteeringBranch b;
    int d = 0;
    if (!(ls >> axis >> b.alpha >> b.inject_layer >> d) || d <= 0) {
      throw DataError("steering vectors line " + std::to_string(line_no) + ": malformed header");
    }
    try {
      b.axis = parse_axis(axis);
    } catch (const DataError& e) {
      throw DataError("steering vectors line " + std::to_string(line_no) + ": " + e.what());
    }
    b.v = Tensor({d});
    for (int i = 0; i < d; ++i) {
      if (!(ls >> b.v[i])) {
        throw DataError("steering vectors line " + std::to_string(line_no) + ": expected " + std::to_string(d) +
                        " components, got " + std::to_string(i));
      }
    }
    std::string extra;
    if (ls >> extra) throw DataError("steering vectors line " + std::to_string(line_no) + ": trailing data");
    b.branch_id = static_cast<int>(out.size());
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace ambs
