#include "ambs/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ambs/error.hpp"

namespace ambs {

using ag::Var;

void BackboneConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("backbone config: " + what); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (d_model <= 0) fail("d_model must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers < 0 || n_layers > 64) fail("n_layers must be in [0, 64]");
  if (d_ff <= 0) fail("d_ff must be positive");
  if (max_seq <= 0 || max_seq > 4096) fail("max_seq must be in (0, 4096]");
  if (!(dropout_p >= 0.0f && dropout_p < 1.0f)) fail("dropout_p must be in [0, 1)");
}

TokenSequence TokenSequence::from_text(std::string_view text) {
  TokenSequence s;
  s.ids.reserve(text.size());
  for (unsigned char c : text) s.ids.push_back(c);
  return s;
}

std::string TokenSequence::text() const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

void TokenSequence::validate(const BackboneConfig& cfg) const {
  if (ids.empty()) throw ContractError("token sequence is empty");
  if (length() > cfg.max_seq) {
    throw ContractError("token sequence of length " + std::to_string(length()) + " exceeds max_seq " +
                        std::to_string(cfg.max_seq));
  }
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(ids[t]) + " at position " + std::to_string(t) +
                            " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
}

// ---------------------------------------------------------------------------
// weights

namespace {

Tensor gaussian(std::vector<int> shape, float stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

BackboneWeights BackboneWeights::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg.d_model;
  const float proj = 1.0f / std::sqrt(static_cast<float>(d));
  const float resid = proj / std::sqrt(2.0f * std::max(1, cfg.n_layers));
  BackboneWeights w;
  w.cfg = cfg;
  w.token_emb = gaussian({cfg.vocab_size, d}, 0.1f, rng);
  w.pos_emb = gaussian({cfg.max_seq, d}, 0.02f, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_g = Tensor::filled({d}, 1.0f);
    lw.ln1_b = Tensor({d});
    lw.wq = gaussian({d, d}, proj, rng);
    lw.wk = gaussian({d, d}, proj, rng);
    lw.wv = gaussian({d, d}, proj, rng);
    lw.wo = gaussian({d, d}, resid, rng);
    lw.ln2_g = Tensor::filled({d}, 1.0f);
    lw.ln2_b = Tensor({d});
    lw.w1 = gaussian({d, cfg.d_ff}, proj, rng);
    lw.b1 = Tensor({cfg.d_ff});
    lw.w2 = gaussian({cfg.d_ff, d}, 1.0f / std::sqrt(static_cast<float>(cfg.d_ff)) / std::sqrt(2.0f), rng);
    lw.b2 = Tensor({d});
    w.layers.push_back(std::move(lw));
  }
  w.lnf_g = Tensor::filled({d}, 1.0f);
  w.lnf_b = Tensor({d});
  return w;
}

BackboneWeights BackboneWeights::zeros(const BackboneConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  BackboneWeights w;
  w.cfg = cfg;
  w.token_emb = Tensor({cfg.vocab_size, d});
  w.pos_emb = Tensor({cfg.max_seq, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_g = Tensor::filled({d}, 1.0f);
    lw.ln1_b = Tensor({d});
    lw.wq = Tensor({d, d});
    lw.wk = Tensor({d, d});
    lw.wv = Tensor({d, d});
    lw.wo = Tensor({d, d});
    lw.ln2_g = Tensor::filled({d}, 1.0f);
    lw.ln2_b = Tensor({d});
    lw.w1 = Tensor({d, cfg.d_ff});
    lw.b1 = Tensor({cfg.d_ff});
    lw.w2 = Tensor({cfg.d_ff, d});
    lw.b2 = Tensor({d});
    w.layers.push_back(std::move(lw));
  }
  w.lnf_g = Tensor::filled({d}, 1.0f);
  w.lnf_b = Tensor({d});
  return w;
}

std::vector<std::pair<std::string, Tensor*>> BackboneWeights::named() {
  std::vector<std::pair<std::string, Tensor*>> out{{"backbone.token_emb", &token_emb},
                                                   {"backbone.pos_emb", &pos_emb}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto p = "backbone.layer" + std::to_string(l + 1) + ".";
    auto& lw = layers[l];
    out.insert(out.end(), {{p + "ln1_g", &lw.ln1_g}, {p + "ln1_b", &lw.ln1_b}, {p + "wq", &lw.wq},
                           {p + "wk", &lw.wk},       {p + "wv", &lw.wv},       {p + "wo", &lw.wo},
                           {p + "ln2_g", &lw.ln2_g}, {p + "ln2_b", &lw.ln2_b}, {p + "w1", &lw.w1},
                           {p + "b1", &lw.b1},       {p + "w2", &lw.w2},       {p + "b2", &lw.b2}});
  }
  out.emplace_back("backbone.lnf_g", &lnf_g);
  out.emplace_back("backbone.lnf_b", &lnf_b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> BackboneWeights::named() const {
  auto mut = const_cast<BackboneWeights*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

void BackboneWeights::check() const {
  cfg.validate();
  const int d = cfg.d_model;
  auto expect = [](const std::string& name, const Tensor& t, std::vector<int> shape) {
    if (t.shape() != shape) {
      throw DimensionError(name + ": expected " + shape_string(shape) + ", got " + t.shape_string());
    }
    if (!t.all_finite()) throw NumericError(name + ": non-finite parameter");
  };
  expect("token_emb", token_emb, {cfg.vocab_size, d});
  expect("pos_emb", pos_emb, {cfg.max_seq, d});
  if (static_cast<int>(layers.size()) != cfg.n_layers) throw DimensionError("layer count does not match config");
  for (const auto& lw : layers) {
    expect("ln1_g", lw.ln1_g, {d});
    expect("ln1_b", lw.ln1_b, {d});
    expect("wq", lw.wq, {d, d});
    expect("wk", lw.wk, {d, d});
    expect("wv", lw.wv, {d, d});
    expect("wo", lw.wo, {d, d});
    expect("ln2_g", lw.ln2_g, {d});
    expect("ln2_b", lw.ln2_b, {d});
    expect("w1", lw.w1, {d, cfg.d_ff});
    expect("b1", lw.b1, {cfg.d_ff});
    expect("w2", lw.w2, {cfg.d_ff, d});
    expect("b2", lw.b2, {d});
  }
  expect("lnf_g", lnf_g, {d});
  expect("lnf_b", lnf_b, {d});
}

BackboneVars BackboneVars::bind(const BackboneWeights& w, bool requires_grad) {
  auto leaf = [requires_grad](const Tensor& t) { return Var::leaf(t, requires_grad); };
  BackboneVars v;
  v.token_emb = leaf(w.token_emb);
  v.pos_emb = leaf(w.pos_emb);
  for (const auto& lw : w.layers) {
    v.layers.push_back(LayerVars{leaf(lw.ln1_g), leaf(lw.ln1_b), leaf(lw.wq), leaf(lw.wk), leaf(lw.wv),
                                 leaf(lw.wo), leaf(lw.ln2_g), leaf(lw.ln2_b), leaf(lw.w1), leaf(lw.b1),
                                 leaf(lw.w2), leaf(lw.b2)});
  }
  v.lnf_g = leaf(w.lnf_g);
  v.lnf_b = leaf(w.lnf_b);
  return v;
}

std::vector<Var> BackboneVars::all() const {
  // Same order as BackboneWeights::named().
  std::vector<Var> out{token_emb, pos_emb};
  for (const auto& lw : layers) {
    out.insert(out.end(), {lw.ln1_g, lw.ln1_b, lw.wq, lw.wk, lw.wv, lw.wo, lw.ln2_g, lw.ln2_b, lw.w1, lw.b1,
                           lw.w2, lw.b2});
  }
  out.push_back(lnf_g);
  out.push_back(lnf_b);
  return out;
}

// ---------------------------------------------------------------------------
// graph forward

Var embed_graph(const TokenSequence& tokens, const BackboneVars& vars, int max_seq) {
  if (tokens.length() > max_seq) {
    throw ContractError("sequence of length " + std::to_string(tokens.length()) + " exceeds max_seq " +
                        std::to_string(max_seq));
  }
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = static_cast<int>(t);
  return ag::add(ag::embedding(vars.token_emb, tokens.ids), ag::embedding(vars.pos_emb, positions));
}

Var decoder_block_graph(const Var& h, const LayerVars& lw, const BackboneConfig& cfg, const ForwardOptions& opt,
                        int layer) {
  const int hd = cfg.head_dim();
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  const std::uint64_t seed_base = opt.dropout_seed * 1000003ull + static_cast<std::uint64_t>(layer) * 7919ull;

  Var x = ag::layer_norm(h, lw.ln1_g, lw.ln1_b);
  Var q = ag::matmul(x, lw.wq);
  Var k = ag::matmul(x, lw.wk);
  Var v = ag::matmul(x, lw.wv);
  std::vector<Var> heads;
  heads.reserve(cfg.n_heads);
  for (int head = 0; head < cfg.n_heads; ++head) {
    const int b = head * hd, e = b + hd;
    Var qh = ag::slice_cols(q, b, e);
    Var kh = ag::slice_cols(k, b, e);
    Var vh = ag::slice_cols(v, b, e);
    Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt);
    Var probs = ag::softmax_rows(ag::causal_mask(scores));
    heads.push_back(ag::matmul(probs, vh));
  }
  Var attn = ag::matmul(heads.size() == 1 ? heads[0] : ag::concat_cols(heads), lw.wo);
  attn = ag::dropout(attn, cfg.dropout_p, seed_base + 1, opt.train);
  Var h1 = ag::add(h, attn);

  Var y = ag::layer_norm(h1, lw.ln2_g, lw.ln2_b);
  Var ff = ag::relu(ag::add_row(ag::matmul(y, lw.w1), lw.b1));
  ff = ag::add_row(ag::matmul(ff, lw.w2), lw.b2);
  ff = ag::dropout(ff, cfg.dropout_p, seed_base + 2, opt.train);
  return ag::add(h1, ff);
}

Var forward_from_layer(const Var& h, int first_layer, const BackboneVars& vars, const BackboneConfig& cfg,
                       const ForwardOptions& opt, BackboneCounters* counters) {
  Var x = h;
  for (int l = first_layer; l <= cfg.n_layers; ++l) {
    x = decoder_block_graph(x, vars.layers[l - 1], cfg, opt, l);
    if (counters) counters->block_rows += x.value().rows();
  }
  return x;
}

Var forward_graph(const TokenSequence& tokens, const BackboneVars& vars, const BackboneConfig& cfg,
                  const ForwardOptions& opt, const GraphSteering* steer, BackboneCounters* counters) {
  tokens.validate(cfg);
  if (steer && (steer->layer < 1 || steer->layer > cfg.n_layers)) {
    throw ContractError("steering layer " + std::to_string(steer->layer) + " outside [1, " +
                        std::to_string(cfg.n_layers) + "]");
  }
  Var x = embed_graph(tokens, vars, cfg.max_seq);
  for (int l = 1; l <= cfg.n_layers; ++l) {
    x = decoder_block_graph(x, vars.layers[l - 1], cfg, opt, l);
    if (counters) counters->block_rows += x.value().rows();
    if (steer && steer->layer == l) x = ag::add_row(x, ag::scale(steer->vector, steer->alpha));
  }
  return x;
}

Var final_norm_graph(const Var& h, const BackboneVars& vars) { return ag::layer_norm(h, vars.lnf_g, vars.lnf_b); }

// ---------------------------------------------------------------------------
// value-level API

HiddenStates embed(const TokenSequence& tokens, const BackboneWeights& w) {
  tokens.validate(w.cfg);
  BackboneVars vars;
  vars.token_emb = Var::constant(w.token_emb);
  vars.pos_emb = Var::constant(w.pos_emb);
  return {0, embed_graph(tokens, vars, w.cfg.max_seq).value()};
}

HiddenStates decoder_block(const HiddenStates& h, int layer, const BackboneWeights& w, bool train,
                           std::uint64_t dropout_seed) {
  if (layer < 1 || layer > w.cfg.n_layers) throw ContractError("decoder_block: layer out of range");
  if (h.layer_index != layer - 1) {
    throw ContractError("decoder_block: layer " + std::to_string(layer) + " expects states from layer " +
                        std::to_string(layer - 1) + ", got " + std::to_string(h.layer_index));
  }
  if (h.values.rank() != 2 || h.values.cols() != w.cfg.d_model) {
    throw DimensionError("decoder_block: states " + h.values.shape_string());
  }
  const LayerWeights& src = w.layers[layer - 1];
  auto c = [](const Tensor& t) { return Var::constant(t); };
  LayerVars lw{c(src.ln1_g), c(src.ln1_b), c(src.wq), c(src.wk), c(src.wv), c(src.wo),
               c(src.ln2_g), c(src.ln2_b), c(src.w1), c(src.b1), c(src.w2), c(src.b2)};
  ForwardOptions opt{train, dropout_seed};
  return {layer, decoder_block_graph(Var::constant(h.values), lw, w.cfg, opt, layer).value()};
}

HiddenStates forward_shared(const TokenSequence& tokens, const BackboneWeights& w, bool train,
                            BackboneCounters* counters, std::uint64_t dropout_seed) {
  BackboneVars vars = BackboneVars::bind(w, false);
  ForwardOptions opt{train, dropout_seed};
  Var h = forward_graph(tokens, vars, w.cfg, opt, nullptr, counters);
  if (counters) ++counters->shared_forwards;
  return {w.cfg.n_layers, h.value()};
}

HiddenStates forward_to_layer(const TokenSequence& tokens, const BackboneWeights& w, int layer) {
  if (layer < 0 || layer > w.cfg.n_layers) throw ContractError("forward_to_layer: layer out of range");
  HiddenStates h = embed(tokens, w);
  for (int l = 1; l <= layer; ++l) h = decoder_block(h, l, w, false);
  return h;
}

std::vector<HiddenStates> clone_for_branches(const HiddenStates& h_L, int n_branches) {
  if (n_branches < 1) throw ContractError("clone_for_branches: need at least one branch");
  return std::vector<HiddenStates>(static_cast<std::size_t>(n_branches), h_L);
}

Tensor encode_reference(const TokenSequence& response_tokens, const BackboneWeights& w) {
  return mean_pool_rows(forward_shared(response_tokens, w, false).values);
}

Tensor final_norm(const Tensor& h, const BackboneWeights& w) {
  return ag::layer_norm(Var::constant(h), Var::constant(w.lnf_g), Var::constant(w.lnf_b)).value();
}

// ---------------------------------------------------------------------------
// incremental engine

namespace {

void layer_norm_row(std::span<const float> x, const Tensor& g, const Tensor& b, std::span<float> out) {
  const int d = static_cast<int>(x.size());
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= d;
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= d;
  const double is = 1.0 / std::sqrt(var + 1e-5);
  for (int c = 0; c < d; ++c) {
    const float xh = static_cast<float>((x[c] - mean) * is);
    out[c] = g[c] * xh + b[c];
  }
}

// out[n] = Σ_k x[k] w[k][n]
void row_matmul(std::span<const float> x, const Tensor& w, std::span<float> out) {
  const int k = w.rows(), n = w.cols();
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  for (int p = 0; p < k; ++p) {
    const double xv = x[p];
    if (xv == 0.0) continue;
    const float* wr = w.data().data() + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) acc[j] += xv * wr[j];
  }
  for (int j = 0; j < n; ++j) out[j] = static_cast<float>(acc[j]);
}

void run_block_rows(DecodeState& s, int layer, int first_row, const BackboneWeights& w) {
  const BackboneConfig& cfg = w.cfg;
  const int d = cfg.d_model, hd = cfg.head_dim();
  const LayerWeights& lw = w.layers[layer - 1];
  const auto& in = s.outputs[layer - 1];
  auto& keys = s.keys[layer - 1];
  auto& vals = s.values[layer - 1];
  auto& out = s.outputs[layer];
  const int n = s.length();
  keys.resize(static_cast<std::size_t>(n) * d);
  vals.resize(static_cast<std::size_t>(n) * d);
  out.resize(static_cast<std::size_t>(n) * d);

  std::vector<float> x(d), q(d), att(d), proj(d), h1(d), y(d), hid(cfg.d_ff), ff(d);
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  for (int t = first_row; t < n; ++t) {
    std::span<const float> hin(in.data() + static_cast<std::size_t>(t) * d, d);
    layer_norm_row(hin, lw.ln1_g, lw.ln1_b, x);
    row_matmul(x, lw.wk, std::span<float>(keys.data() + static_cast<std::size_t>(t) * d, d));
    row_matmul(x, lw.wv, std::span<float>(vals.data() + static_cast<std::size_t>(t) * d, d));
  }
  // Attention for new rows reads keys/values of all rows up to and including itself.
  for (int t = first_row; t < n; ++t) {
    std::span<const float> hin(in.data() + static_cast<std::size_t>(t) * d, d);
    layer_norm_row(hin, lw.ln1_g, lw.ln1_b, x);
    row_matmul(x, lw.wq, q);
    std::vector<float> scores(static_cast<std::size_t>(t) + 1);
    for (int head = 0; head < cfg.n_heads; ++head) {
      const int b = head * hd;
      for (int j = 0; j <= t; ++j) {
        double sdot = 0.0;
        const float* kr = keys.data() + static_cast<std::size_t>(j) * d + b;
        for (int c = 0; c < hd; ++c) sdot += static_cast<double>(q[b + c]) * kr[c];
        scores[j] = static_cast<float>(sdot) * inv_sqrt;
      }
      const float mx = *std::max_element(scores.begin(), scores.end());
      double z = 0.0;
      for (float sc : scores) z += std::exp(static_cast<double>(sc) - mx);
      std::vector<double> acc(static_cast<std::size_t>(hd), 0.0);
      for (int j = 0; j <= t; ++j) {
        const float p = static_cast<float>(std::exp(static_cast<double>(scores[j]) - mx) / z);
        const float* vr = vals.data() + static_cast<std::size_t>(j) * d + b;
        for (int c = 0; c < hd; ++c) acc[c] += static_cast<double>(p) * vr[c];
      }
      for (int c = 0; c < hd; ++c) att[b + c] = static_cast<float>(acc[c]);
    }
    row_matmul(att, lw.wo, proj);
    for (int c = 0; c < d; ++c) h1[c] = hin[c] + proj[c];
    layer_norm_row(h1, lw.ln2_g, lw.ln2_b, y);
    row_matmul(y, lw.w1, hid);
    for (int c = 0; c < cfg.d_ff; ++c) {
      const float v = hid[c] + lw.b1[c];
      hid[c] = v > 0.0f ? v : 0.0f;
    }
    row_matmul(hid, lw.w2, ff);
    float* o = out.data() + static_cast<std::size_t>(t) * d;
    for (int c = 0; c < d; ++c) o[c] = h1[c] + (ff[c] + lw.b2[c]);
  }
}

void inject_rows(std::vector<float>& rows, int first_row, int n, int d, const SteeringSpec& steer) {
  for (int t = first_row; t < n; ++t) {
    float* r = rows.data() + static_cast<std::size_t>(t) * d;
    for (int c = 0; c < d; ++c) r[c] += steer.alpha * (*steer.vector)[c];
  }
}

void check_steer(const SteeringSpec* steer, const BackboneConfig& cfg) {
  if (!steer) return;
  if (steer->layer < 1 || steer->layer > cfg.n_layers) {
    throw ContractError("steering layer " + std::to_string(steer->layer) + " outside [1, " +
                        std::to_string(cfg.n_layers) + "]");
  }
  if (!steer->vector || steer->vector->size() != static_cast<std::size_t>(cfg.d_model)) {
    throw DimensionError("steering vector must have length d_model");
  }
}

}  // namespace

std::size_t DecodeState::payload_bytes() const {
  std::size_t n = tokens.size() * sizeof(int);
  for (const auto& v : outputs) n += v.size() * sizeof(float);
  for (const auto& v : keys) n += v.size() * sizeof(float);
  for (const auto& v : values) n += v.size() * sizeof(float);
  return n;
}

std::span<const float> DecodeState::top_row(int t, int d) const {
  return {outputs.back().data() + static_cast<std::size_t>(t) * d, static_cast<std::size_t>(d)};
}

DecodeState make_decode_state(const BackboneConfig& cfg) {
  DecodeState s;
  s.outputs.resize(static_cast<std::size_t>(cfg.n_layers) + 1);
  s.keys.resize(static_cast<std::size_t>(cfg.n_layers));
  s.values.resize(static_cast<std::size_t>(cfg.n_layers));
  return s;
}

void extend(DecodeState& state, std::span<const int> new_tokens, const BackboneWeights& w,
            const SteeringSpec* steer, long* block_rows) {
  const BackboneConfig& cfg = w.cfg;
  check_steer(steer, cfg);
  if (new_tokens.empty()) return;
  const int first = state.length();
  const int d = cfg.d_model;
  if (first + static_cast<int>(new_tokens.size()) > cfg.max_seq) {
    throw ContractError("decode would exceed max_seq " + std::to_string(cfg.max_seq));
  }
  for (int id : new_tokens) {
    if (id < 0 || id >= cfg.vocab_size) throw VocabularyError("token id " + std::to_string(id) + " out of range");
    state.tokens.push_back(id);
  }
  const int n = state.length();
  auto& emb = state.outputs[0];
  emb.resize(static_cast<std::size_t>(n) * d);
  for (int t = first; t < n; ++t) {
    auto te = w.token_emb.row(state.tokens[t]);
    auto pe = w.pos_emb.row(t);
    for (int c = 0; c < d; ++c) emb[static_cast<std::size_t>(t) * d + c] = te[c] + pe[c];
  }
  for (int l = 1; l <= cfg.n_layers; ++l) {
    run_block_rows(state, l, first, w);
    if (block_rows) *block_rows += n - first;
    if (steer && steer->layer == l) inject_rows(state.outputs[l], first, n, d, *steer);
  }
}

DecodeState fork_steered(const DecodeState& shared, const BackboneWeights& w, const SteeringSpec* steer,
                         long* block_rows) {
  const BackboneConfig& cfg = w.cfg;
  check_steer(steer, cfg);
  DecodeState s = shared;
  if (!steer) return s;
  const int n = s.length(), d = cfg.d_model;
  inject_rows(s.outputs[steer->layer], 0, n, d, *steer);
  for (int l = steer->layer + 1; l <= cfg.n_layers; ++l) {
    run_block_rows(s, l, 0, w);
    if (block_rows) *block_rows += n;
  }
  return s;
}

}  // namespace ambs
