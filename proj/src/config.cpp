#include "ambs/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "ambs/error.hpp"

namespace ambs {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_float(float x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(x));
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

float parse_float(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    float f = std::stof(v, &used);
    if (used != v.size()) throw ConfigError(key + ": cannot parse '" + v + "'");
    return f;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": cannot parse '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
};

#define INT_FIELD(name, member)                                                                        \
  Field {                                                                                              \
    name, [](const ExperimentConfig& c) { return std::to_string(c.member); },                          \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                          \
          c.member = parse_number<decltype(c.member)>(k, v);                                           \
        }                                                                                              \
  }
#define FLOAT_FIELD(name, member)                                                                      \
  Field {                                                                                              \
    name, [](const ExperimentConfig& c) { return fmt_float(c.member); },                               \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_float(k, v); } \
  }
#define BOOL_FIELD(name, member)                                                                       \
  Field {                                                                                              \
    name, [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); },          \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); } \
  }
#define STRING_FIELD(name, member)                                                                     \
  Field {                                                                                              \
    name, [](const ExperimentConfig& c) { return c.member; },                                          \
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.member = v; }            \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      INT_FIELD("run.seed", seed),
      STRING_FIELD("run.out_dir", out_dir),
      BOOL_FIELD("run.deterministic", deterministic),
      INT_FIELD("backbone.vocab_size", backbone.vocab_size),
      INT_FIELD("backbone.d_model", backbone.d_model),
      INT_FIELD("backbone.n_layers", backbone.n_layers),
      INT_FIELD("backbone.n_heads", backbone.n_heads),
      INT_FIELD("backbone.d_ff", backbone.d_ff),
      INT_FIELD("backbone.max_seq", backbone.max_seq),
      FLOAT_FIELD("backbone.dropout", backbone.dropout_p),
      STRING_FIELD("data.dir", data_dir),
      INT_FIELD("data.train_size", train_size),
      INT_FIELD("data.test_size", test_size),
      INT_FIELD("pretrain.lm_epochs", lm_epochs),
      INT_FIELD("pretrain.lm_batch", lm_batch),
      FLOAT_FIELD("pretrain.lm_lr", lm_lr),
      FLOAT_FIELD("pretrain.aligned_fraction", aligned_fraction),
      INT_FIELD("pretrain.ref_epochs", ref_epochs),
      FLOAT_FIELD("pretrain.ref_lr", ref_lr),
      Field{"steering.axes",
            [](const ExperimentConfig& c) {
              return join(c.axes, [](Axis a) { return std::string(axis_name(a)); });
            },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.axes.clear();
              for (const auto& s : split_list(v)) {
                try {
                  c.axes.push_back(parse_axis(s));
                } catch (const DataError& e) {
                  throw ConfigError(k + ": " + e.what());
                }
              }
            }},
      FLOAT_FIELD("steering.alpha", alpha),
      INT_FIELD("steering.layer", inject_layer),
      FLOAT_FIELD("steering.init_std", init_std),
      INT_FIELD("steering.k", k),
      INT_FIELD("steering.d_hid", d_hid),
      FLOAT_FIELD("steering.eta_h", eta_h),
      BOOL_FIELD("steering.policy_from_reference", policy_from_reference),
      Field{"train.optimizer_mode",
            [](const ExperimentConfig& c) { return std::string(optimizer_mode_name(c.optimizer_mode)); },
            [](ExperimentConfig& c, const std::string&, const std::string& v) {
              c.optimizer_mode = parse_optimizer_mode(v);
            }},
      INT_FIELD("train.epochs", epochs),
      INT_FIELD("train.batch_size", batch_size),
      INT_FIELD("train.grad_accum", grad_accum),
      FLOAT_FIELD("train.lr", lr),
      FLOAT_FIELD("train.head_lr", head_lr),
      FLOAT_FIELD("train.weight_decay", weight_decay),
      INT_FIELD("decode.max_new_tokens", max_new_tokens),
      Field{"sweep.layers",
            [](const ExperimentConfig& c) { return join(c.sweep_layers, [](int l) { return std::to_string(l); }); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.sweep_layers.clear();
              for (const auto& s : split_list(v)) c.sweep_layers.push_back(parse_number<int>(k, s));
            }},
      Field{"sweep.alphas", [](const ExperimentConfig& c) { return join(c.sweep_alphas, fmt_float); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.sweep_alphas.clear();
              for (const auto& s : split_list(v)) c.sweep_alphas.push_back(parse_float(k, s));
            }},
  };
  return f;
}

#undef INT_FIELD
#undef FLOAT_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD

}  // namespace

std::string ExperimentConfig::resolved_data_dir() const { return data_dir.empty() ? out_dir + "/data" : data_dir; }

void ExperimentConfig::validate() const {
  backbone.validate();
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (train_size < 1 || test_size < 1) fail("data sizes must be >= 1");
  if (lm_epochs < 0 || ref_epochs < 0 || epochs < 0) fail("epoch counts must be >= 0");
  if (lm_batch < 1 || batch_size < 1 || grad_accum < 1) fail("batch sizes must be >= 1");
  if (!(aligned_fraction >= 0.0f && aligned_fraction <= 1.0f)) fail("pretrain.aligned_fraction must be in [0, 1]");
  if (axes.empty()) fail("steering.axes must name at least one axis");
  if (!(alpha > 0.0f)) fail("steering.alpha must be positive");
  if (inject_layer < 0 || inject_layer > backbone.n_layers) fail("steering.layer must be in [0, n_layers]");
  if (!(init_std >= 0.0f)) fail("steering.init_std must be >= 0");
  if (k < 1 || d_hid < 1) fail("head dimensions must be >= 1");
  if (eta_h < 0.0f) fail("steering.eta_h must be >= 0");
  if (!(lr > 0.0f) || !(head_lr >= 0.0f) || !(lm_lr > 0.0f) || !(ref_lr > 0.0f)) fail("learning rates must be positive");
  if (max_new_tokens < 0) fail("decode.max_new_tokens must be >= 0");
  for (int l : sweep_layers)
    if (l < 1 || l > backbone.n_layers) fail("sweep.layers entries must be in [1, n_layers]");
  for (float a : sweep_alphas)
    if (!(a > 0.0f)) fail("sweep.alphas entries must be positive");
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  ExperimentConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    bool found = false;
    for (const auto& f : fields()) {
      if (key == f.key) {
        try {
          f.set(cfg, key, value);
        } catch (const ConfigError& e) {
          throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

}  // namespace ambs
