#include "ambs/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <random>

#include "json.hpp"

#include "ambs/error.hpp"
#include "ambs/optim.hpp"

namespace ambs {

using ag::Var;

OutputHead OutputHead::init(int d_model, int vocab_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(static_cast<float>(d_model)));
  OutputHead h;
  h.w_o = Tensor({d_model, vocab_size});
  for (auto& x : h.w_o.data()) x = dist(rng);
  h.b_o = Tensor({vocab_size});
  return h;
}

std::vector<std::pair<std::string, Tensor*>> OutputHead::named() { return {{"head.w_o", &w_o}, {"head.b_o", &b_o}}; }

std::vector<std::pair<std::string, const Tensor*>> OutputHead::named() const {
  return {{"head.w_o", &w_o}, {"head.b_o", &b_o}};
}

void OutputHead::check(const BackboneConfig& cfg) const {
  if (w_o.shape() != std::vector<int>{cfg.d_model, cfg.vocab_size} ||
      b_o.shape() != std::vector<int>{cfg.vocab_size}) {
    throw DimensionError("output head " + w_o.shape_string() + " / " + b_o.shape_string() + " does not match d=" +
                         std::to_string(cfg.d_model) + ", |V|=" + std::to_string(cfg.vocab_size));
  }
}

void GenerationConfig::validate() const {
  if (max_new_tokens < 0) throw ConfigError("max_new_tokens must be >= 0");
  if (mode == DecodeMode::temperature && !(temperature > 0.0f)) {
    throw ConfigError("temperature must be positive in temperature mode");
  }
}

Tensor project(const HiddenStates& H_hat, const OutputHead& head) {
  return project_graph(Var::constant(H_hat.values), Var::constant(head.w_o), Var::constant(head.b_o)).value();
}

Var project_graph(const Var& h, const Var& w_o, const Var& b_o) { return ag::add_row(ag::matmul(h, w_o), b_o); }

Tensor next_token_dist(const Tensor& logits_row) {
  Tensor row = logits_row.rank() == 1 ? Tensor({1, static_cast<int>(logits_row.size())}, logits_row.data())
                                      : logits_row;
  Tensor p = softmax_rows(row);
  return Tensor({static_cast<int>(p.size())}, p.data());
}

namespace {

// Final norm + projection of one top-of-stack row.
std::vector<float> row_logits(std::span<const float> top, const BackboneWeights& w, const OutputHead& head) {
  const int d = w.cfg.d_model, V = w.cfg.vocab_size;
  double mean = 0.0;
  for (float x : top) mean += x;
  mean /= d;
  double var = 0.0;
  for (float x : top) var += (x - mean) * (x - mean);
  var /= d;
  const double is = 1.0 / std::sqrt(var + 1e-5);
  std::vector<float> normed(d);
  for (int c = 0; c < d; ++c) normed[c] = w.lnf_g[c] * static_cast<float>((top[c] - mean) * is) + w.lnf_b[c];
  std::vector<double> acc(static_cast<std::size_t>(V), 0.0);
  for (int c = 0; c < d; ++c) {
    const double x = normed[c];
    const float* wr = head.w_o.data().data() + static_cast<std::size_t>(c) * V;
    for (int j = 0; j < V; ++j) acc[j] += x * wr[j];
  }
  std::vector<float> out(V);
  for (int j = 0; j < V; ++j) out[j] = static_cast<float>(acc[j]) + head.b_o[j];
  return out;
}

int choose_token(const std::vector<float>& logits, const GenerationConfig& cfg, std::mt19937_64& rng) {
  if (cfg.mode == DecodeMode::greedy) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  Tensor scaled({1, static_cast<int>(logits.size())});
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / cfg.temperature;
  Tensor p = softmax_rows(scaled);
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  double cum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

void check_budget(const TokenSequence& prompt, const BackboneWeights& w, const GenerationConfig& cfg) {
  cfg.validate();
  prompt.validate(w.cfg);
  if (prompt.length() + cfg.max_new_tokens > w.cfg.max_seq) {
    throw ContractError("prompt length " + std::to_string(prompt.length()) + " + max_new_tokens " +
                        std::to_string(cfg.max_new_tokens) + " exceeds max_seq " + std::to_string(w.cfg.max_seq));
  }
}

SteeringSpec spec_of(const SteeringBranch& b) { return SteeringSpec{b.inject_layer, b.alpha, &b.v}; }

// Autoregressive continuation of a state whose prompt rows are in place.
void continue_decoding(DecodeState& state, const SteeringSpec* steer, const BackboneWeights& w,
                       const OutputHead& head, const GenerationConfig& cfg, std::uint64_t seed, long* blocks) {
  std::mt19937_64 rng(seed);
  const int d = w.cfg.d_model;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    auto logits = row_logits(state.top_row(state.length() - 1, d), w, head);
    const int tok = choose_token(logits, cfg, rng);
    const int one[1] = {tok};
    if (step + 1 < cfg.max_new_tokens && !(cfg.stop_token && tok == *cfg.stop_token)) {
      extend(state, one, w, steer, blocks);
    } else {
      state.tokens.push_back(tok);  // last token: nothing reads its states
      break;
    }
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TokenSequence generate_branch(const TokenSequence& prompt, const SteeringBranch* branch, const BackboneWeights& w,
                              const OutputHead& head, const GenerationConfig& cfg) {
  check_budget(prompt, w, cfg);
  head.check(w.cfg);
  SteeringSpec spec;
  if (branch) {
    branch->check(w.cfg.d_model, w.cfg.n_layers);
    spec = spec_of(*branch);
  }
  DecodeState state = make_decode_state(w.cfg);
  extend(state, prompt.ids, w, branch ? &spec : nullptr, nullptr);
  continue_decoding(state, branch ? &spec : nullptr, w, head, cfg, cfg.seed, nullptr);
  return TokenSequence{state.tokens};
}

GenerateAllResult generate_all(const TokenSequence& prompt, const std::vector<SteeringBranch>& branches,
                               const BackboneWeights& w, const OutputHead& head, const GenerationConfig& cfg) {
  check_budget(prompt, w, cfg);
  head.check(w.cfg);
  for (const auto& b : branches) b.check(w.cfg.d_model, w.cfg.n_layers);
  GenerateAllResult res;
  res.report.n_branches = static_cast<int>(branches.size());
  res.report.prompt_len = prompt.length();

  auto t0 = std::chrono::steady_clock::now();
  DecodeState shared = make_decode_state(w.cfg);
  extend(shared, prompt.ids, w, nullptr, &res.report.prefix_shared_blocks);
  res.report.shared_forwards = 1;
  res.shared_seconds = seconds_since(t0);
  res.report.mem_bytes = shared.payload_bytes();

  for (std::size_t i = 0; i < branches.size(); ++i) {
    auto tb = std::chrono::steady_clock::now();
    SteeringSpec spec = spec_of(branches[i]);
    DecodeState state = fork_steered(shared, w, &spec, &res.report.prefix_branch_blocks);
    continue_decoding(state, &spec, w, head, cfg, cfg.seed + i, &res.report.decode_blocks);
    res.branch_seconds.push_back(seconds_since(tb));
    res.report.mem_bytes += state.payload_bytes();
    res.outputs.push_back(TokenSequence{state.tokens});
  }
  return res;
}

GenerateAllResult generate_independent(const TokenSequence& prompt, const std::vector<SteeringBranch>& branches,
                                       const BackboneWeights& w, const OutputHead& head,
                                       const GenerationConfig& cfg) {
  check_budget(prompt, w, cfg);
  head.check(w.cfg);
  GenerateAllResult res;
  res.report.n_branches = static_cast<int>(branches.size());
  res.report.prompt_len = prompt.length();
  for (std::size_t i = 0; i < branches.size(); ++i) {
    branches[i].check(w.cfg.d_model, w.cfg.n_layers);
    auto tb = std::chrono::steady_clock::now();
    SteeringSpec spec = spec_of(branches[i]);
    DecodeState state = make_decode_state(w.cfg);
    extend(state, prompt.ids, w, &spec, &res.report.prefix_shared_blocks);
    ++res.report.shared_forwards;
    continue_decoding(state, &spec, w, head, cfg, cfg.seed + i, &res.report.decode_blocks);
    res.branch_seconds.push_back(seconds_since(tb));
    res.report.mem_bytes += state.payload_bytes();
    res.outputs.push_back(TokenSequence{state.tokens});
  }
  return res;
}

// ---------------------------------------------------------------------------
// language-model pretraining

namespace {

std::vector<int> lm_targets(const LmSequence& s) {
  const int n = s.tokens.length();
  std::vector<int> targets(n, -1);
  for (int t = std::max(0, s.loss_from - 1); t + 1 < n; ++t) targets[t] = s.tokens.ids[t + 1];
  return targets;
}

Var sequence_loss(const LmSequence& s, const BackboneVars& vars, const Var& w_o, const Var& b_o,
                  const BackboneConfig& cfg, const ForwardOptions& opt) {
  Var h = forward_graph(s.tokens, vars, cfg, opt);
  Var logits = project_graph(final_norm_graph(h, vars), w_o, b_o);
  auto targets = lm_targets(s);
  return ag::cross_entropy(logits, targets);
}

}  // namespace

LmReport train_language_model(const std::function<std::vector<LmSequence>(int)>& epoch_data, BackboneWeights& w,
                              OutputHead& head, const LmTrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("lm batch size must be >= 1");
  w.check();
  head.check(w.cfg);
  LmReport report;
  auto params = w.named();
  for (auto& p : head.named()) params.push_back(p);
  std::vector<AdamWState> states;
  for (auto& [name, t] : params) states.push_back(AdamWState::for_param(*t, cfg.lr, cfg.weight_decay));

  std::vector<std::vector<LmSequence>> epochs;
  long total_steps = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    epochs.push_back(epoch_data(e));
    total_steps += (static_cast<long>(epochs.back().size()) + cfg.batch_size - 1) / cfg.batch_size;
  }

  long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto& data = epochs[e];
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(data.size(), start + cfg.batch_size);
      BackboneVars vars = BackboneVars::bind(w, true);
      Var w_o = Var::leaf(head.w_o, true), b_o = Var::leaf(head.b_o, true);
      Var total;
      for (std::size_t i = start; i < stop; ++i) {
        ForwardOptions opt{true, cfg.seed * 7777777ull + static_cast<std::uint64_t>(step) * 131ull + i};
        Var l = sequence_loss(data[i], vars, w_o, b_o, w.cfg, opt);
        total = total ? ag::add(total, l) : l;
      }
      Var loss = ag::scale(total, 1.0f / static_cast<float>(stop - start));
      if (!std::isfinite(loss.value()[0])) throw NumericError("non-finite language-model loss");
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(stop - start);
      ag::backward(loss);

      auto leaves = vars.all();
      leaves.push_back(w_o);
      leaves.push_back(b_o);
      const float lr = scheduled_lr(cfg.lr, step, total_steps, true);
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        if (!leaves[k].has_grad()) continue;
        states[k].lr = lr;
        adamw_update(*params[k].second, leaves[k].grad(), states[k]);
      }
      ++step;
    }
    report.epoch_loss.push_back(data.empty() ? 0.0 : loss_sum / static_cast<double>(data.size()));
  }
  return report;
}

double language_model_loss(const std::vector<LmSequence>& data, const BackboneWeights& w, const OutputHead& head) {
  if (data.empty()) return 0.0;
  BackboneVars vars = BackboneVars::bind(w, false);
  Var w_o = Var::constant(head.w_o), b_o = Var::constant(head.b_o);
  double sum = 0.0;
  for (const auto& s : data) sum += sequence_loss(s, vars, w_o, b_o, w.cfg, ForwardOptions{}).value()[0];
  return sum / static_cast<double>(data.size());
}

void write_transcript(std::ostream& out, const Transcript& t) {
  nlohmann::ordered_json j;
  j["prompt"] = t.prompt;
  j["axis"] = t.axis;
  j["tokens"] = t.tokens;
  j["text"] = t.text;
  j["steering"] = {{"alpha", t.alpha}, {"layer", t.layer}};
  j["seed"] = t.seed;
  out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
}

}  // namespace ambs
