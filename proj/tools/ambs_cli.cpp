// Command-line driver: corpus generation, base-model pretraining, steering
// training, evaluation and the analysis sweeps. Every artifact lands under
// --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "ambs/efficiency.hpp"
#include "ambs/error.hpp"
#include "ambs/experiments.hpp"

namespace fs = std::filesystem;
using namespace ambs;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool deterministic = false;
};

ExperimentConfig resolve_config(const GlobalOptions& g) {
  ExperimentConfig cfg = g.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  if (g.deterministic) cfg.deterministic = true;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  return cfg;
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out_dir) / name).string();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

void write_rows(const ExperimentConfig& cfg, const std::string& name, const std::vector<ScoreRow>& rows) {
  const std::string path = out_path(cfg, name);
  auto f = open_out(path);
  write_score_csv(f, rows);
  std::cout << "wrote " << path << " (" << rows.size() << " rows)\n";
}

Corpus corpus_for(const ExperimentConfig& cfg) {
  const std::string dir = cfg.resolved_data_dir();
  if (!fs::exists(fs::path(dir) / "judge.json")) throw IoError("no corpus in " + dir + " (run gen-corpus first)");
  return load_corpus(dir);
}

BaseModel base_for(const ExperimentConfig& cfg) {
  return BaseModel::from_tensors(load_checkpoint(out_path(cfg, "base.ckpt")), cfg);
}

SteeredModel steered_for(const ExperimentConfig& cfg, const BaseModel& base) {
  return load_training_state(out_path(cfg, "steering.ckpt"), cfg, base, cfg.resolved_layer()).first;
}

void cmd_gen_corpus(const ExperimentConfig& cfg) {
  CorpusSizes sizes{cfg.train_size, cfg.test_size};
  generate_toy_corpus(cfg.seed, sizes, cfg.resolved_data_dir());
  std::cout << "corpus written to " << cfg.resolved_data_dir() << "\n";
}

void cmd_pretrain_ref(const ExperimentConfig& cfg) {
  const Corpus corpus = corpus_for(cfg);
  const BaseModel base = build_base_model(cfg, corpus);
  save_checkpoint(out_path(cfg, "base.ckpt"), base.tensors());
  auto f = open_out(out_path(cfg, "pretrain_loss.csv"));
  f << "epoch,lm_loss\n";
  for (std::size_t e = 0; e < base.lm_loss.size(); ++e) f << e + 1 << ',' << format_fixed(base.lm_loss[e], 6) << '\n';
  std::cout << "lm loss " << format_fixed(base.lm_loss.empty() ? 0.0 : base.lm_loss.back(), 4) << ", reference loss "
            << format_fixed(base.ref_loss, 4) << "\n";
}

void cmd_train(const ExperimentConfig& cfg, const std::string& resume, int stop_after) {
  const Corpus corpus = corpus_for(cfg);
  const BaseModel base = base_for(cfg);
  TrainingOptions opt;
  opt.resume_from = resume;
  opt.save_to = out_path(cfg, "steering.ckpt");
  opt.stop_after_epoch = stop_after;
  const TrainingRun run = run_training(cfg, corpus, base, opt);

  std::vector<ScoreRow> rows;
  for (std::size_t i = 0; i < run.epoch_scores.size(); ++i) {
    rows.push_back({"epoch=" + std::to_string(run.report.epochs[i].epoch), "all", run.epoch_scores[i],
                    run.epoch_bd[i]});
  }
  write_rows(cfg, "train_epochs.csv", rows);

  auto f = open_out(out_path(cfg, "train_loss.csv"));
  f << "epoch,mean_loss,lr_first,lr_last";
  for (const auto& b : run.model.branches) f << ",loss_" << axis_name(b.axis);
  f << '\n';
  for (const auto& e : run.report.epochs) {
    f << e.epoch << ',' << format_fixed(e.mean_loss, 6) << ',' << format_fixed(e.lr_first, 9) << ','
      << format_fixed(e.lr_last, 9);
    for (double l : e.branch_loss) f << ',' << format_fixed(l, 6);
    f << '\n';
  }
  std::cout << "optimizer steps " << run.report.optimizer_steps << ", shared forwards "
            << run.report.shared_forwards << "\n";
}

void cmd_eval(const ExperimentConfig& cfg) {
  const Corpus corpus = corpus_for(cfg);
  const BaseModel base = base_for(cfg);
  const SteeredModel m = steered_for(cfg, base);
  std::vector<ScoreRow> rows;
  rows.push_back({"base", "all", evaluate_base(corpus, base, cfg.max_new_tokens), std::nullopt});
  for (const auto& b : m.branches) {
    rows.push_back({"branch", std::string(axis_name(b.axis)),
                    evaluate_records(corpus.test_of(b.axis), &b, base, corpus.judge, cfg.max_new_tokens),
                    std::nullopt});
  }
  std::optional<double> bd;
  if (m.branches.size() >= 2) bd = evaluate_bd(corpus, m.branches, base);
  rows.push_back({"full", "all", evaluate_full(corpus, m.branches, base, cfg.max_new_tokens), bd});
  write_rows(cfg, "eval.csv", rows);

  // Transcripts of the first few test prompts per axis, one line per branch.
  auto f = open_out(out_path(cfg, "transcripts.jsonl"));
  GenerationConfig gc;
  gc.max_new_tokens = cfg.max_new_tokens;
  gc.seed = cfg.seed;
  for (Axis a : kAllAxes) {
    const auto& test = corpus.test_of(a);
    for (std::size_t i = 0; i < std::min<std::size_t>(test.size(), 4); ++i) {
      const TokenSequence prompt = TokenSequence::from_text(test[i].instruction);
      const GenerateAllResult res = generate_all(prompt, m.branches, base.backbone, base.head, gc);
      for (std::size_t b = 0; b < m.branches.size(); ++b) {
        Transcript t;
        t.prompt = test[i].instruction;
        t.axis = std::string(axis_name(m.branches[b].axis));
        t.tokens.assign(res.outputs[b].ids.begin() + prompt.length(), res.outputs[b].ids.end());
        t.text = res.outputs[b].text().substr(test[i].instruction.size());
        t.alpha = m.branches[b].alpha;
        t.layer = m.branches[b].inject_layer;
        t.seed = gc.seed + b;
        write_transcript(f, t);
      }
    }
  }
}

void cmd_mixing(const ExperimentConfig& cfg, const std::string& mode) {
  const Corpus corpus = corpus_for(cfg);
  const BaseModel base = base_for(cfg);
  const SteeredModel m = steered_for(cfg, base);
  if (mode != "implicit" && mode != "explicit") throw ConfigError("--mode must be implicit or explicit");
  const MixingMode mm = mode == "implicit" ? MixingMode::implicit : MixingMode::explicit_;
  write_rows(cfg, "mixing_" + mode + ".csv", run_mixing_grid(cfg, corpus, base, m, mm));
}

void cmd_ablate(const ExperimentConfig& cfg) {
  const Corpus corpus = corpus_for(cfg);
  write_rows(cfg, "ablations.csv", run_ablations(cfg, corpus, base_for(cfg)));
}

void cmd_sweep_layer(const ExperimentConfig& cfg) {
  const Corpus corpus = corpus_for(cfg);
  write_rows(cfg, "sweep_layer.csv", run_layer_sweep(cfg, corpus, base_for(cfg), cfg.sweep_layers));
}

void cmd_sweep_alpha(const ExperimentConfig& cfg, bool with_null) {
  const Corpus corpus = corpus_for(cfg);
  const BaseModel base = base_for(cfg);
  const SteeredModel m = steered_for(cfg, base);
  write_rows(cfg, "sweep_alpha.csv", run_magnitude_sweep(cfg, corpus, base, m, cfg.sweep_alphas, with_null));
}

void cmd_efficiency(const ExperimentConfig& cfg, int n_prompts) {
  const Corpus corpus = corpus_for(cfg);
  const BaseModel base = base_for(cfg);
  const SteeredModel m = steered_for(cfg, base);
  std::vector<TokenSequence> prompts;
  for (Axis a : kAllAxes)
    for (const auto& r : corpus.test_of(a))
      if (static_cast<int>(prompts.size()) < n_prompts) prompts.push_back(TokenSequence::from_text(r.instruction));
  GenerationConfig gc;
  gc.max_new_tokens = cfg.max_new_tokens;
  gc.seed = cfg.seed;
  std::vector<TimingRecord> recs;
  for (ExecMode mode : {ExecMode::naive, ExecMode::ambs})
    recs.push_back(measure_generation(prompts, m.branches, base.backbone, base.head, gc, mode));
  const std::string path = out_path(cfg, "efficiency.csv");
  auto f = open_out(path);
  write_efficiency_csv(f, recs);
  std::cout << "wrote " << path << "\n";
}

void cmd_export_vectors(const ExperimentConfig& cfg) {
  const BaseModel base = base_for(cfg);
  const SteeredModel m = steered_for(cfg, base);
  const std::string path = out_path(cfg, "steering_vectors.txt");
  auto f = open_out(path);
  write_steering_vectors(f, m.branches);
  std::cout << "wrote " << path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-branch steering: training, evaluation and analysis sweeps"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "config file (key = value lines)");
  app.add_option("--seed", g.seed, "override run.seed");
  app.add_option("--out", g.out_dir, "output directory");
  app.add_flag("--deterministic", g.deterministic, "single-threaded, byte-reproducible run");

  std::string resume, mode = "explicit";
  int stop_after = -1, n_prompts = 30;
  bool with_null = false;
  auto* gen = app.add_subcommand("gen-corpus", "write the synthetic per-axis corpus and judge rules");
  auto* pre = app.add_subcommand("pretrain-ref", "pretrain the backbone and fit the frozen reference head");
  auto* train = app.add_subcommand("train", "train the steering branches");
  train->add_option("--resume", resume, "resume from a training-state checkpoint");
  train->add_option("--stop-after-epoch", stop_after, "stop after this many epochs (checkpoint stays resumable)");
  auto* eval = app.add_subcommand("eval", "score the base model and the trained branches");
  auto* mix = app.add_subcommand("mixing-grid", "implicit or explicit steering-vector mixing grid");
  mix->add_option("--mode", mode, "implicit | explicit");
  auto* ablate = app.add_subcommand("ablate", "full vs no policy/reference heads vs random init");
  auto* sweep_layer = app.add_subcommand("sweep-layer", "retrain at each injection layer");
  auto* sweep_alpha = app.add_subcommand("sweep-alpha", "evaluate the trained branches at each alpha");
  sweep_alpha->add_flag("--with-null", with_null, "prepend an alpha = 0 row");
  auto* eff = app.add_subcommand("efficiency", "time shared vs independent branch decoding");
  eff->add_option("--prompts", n_prompts, "number of test prompts")->check(CLI::PositiveNumber);
  auto* exportv = app.add_subcommand("export-vectors", "write the trained steering vectors as text");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = resolve_config(g);
    if (*gen) cmd_gen_corpus(cfg);
    else if (*pre) cmd_pretrain_ref(cfg);
    else if (*train) cmd_train(cfg, resume, stop_after);
    else if (*eval) cmd_eval(cfg);
    else if (*mix) cmd_mixing(cfg, mode);
    else if (*ablate) cmd_ablate(cfg);
    else if (*sweep_layer) cmd_sweep_layer(cfg);
    else if (*sweep_alpha) cmd_sweep_alpha(cfg, with_null);
    else if (*eff) cmd_efficiency(cfg, n_prompts);
    else if (*exportv) cmd_export_vectors(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
