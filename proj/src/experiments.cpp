#include "ambs/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ambs/error.hpp"

namespace ambs {

namespace {

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag) { return seed * 0x100000001B3ull + tag; }

std::string strip_stop(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

std::string label(const char* key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s=%g", key, v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// base model

TensorRefs BaseModel::tensors() const {
  TensorRefs out = backbone.named();
  for (auto& p : head.named()) out.push_back(p);
  for (auto& p : f_phi.named("reference")) out.push_back(p);
  for (std::size_t a = 0; a < anchors.size(); ++a) out.emplace_back("anchor." + std::to_string(a), &anchors[a]);
  return out;
}

BaseModel BaseModel::from_tensors(const TensorMap& m, const ExperimentConfig& cfg) {
  BaseModel b;
  b.backbone = BackboneWeights::zeros(cfg.backbone);
  for (auto& [name, t] : b.backbone.named()) take_tensor(m, name, *t);
  b.head = OutputHead::init(cfg.backbone.d_model, cfg.backbone.vocab_size, 0);
  for (auto& [name, t] : b.head.named()) take_tensor(m, name, *t);
  b.f_phi = MlpHead::zeros(cfg.backbone.d_model, cfg.d_hid, cfg.k);
  for (auto& [name, t] : b.f_phi.named("reference")) take_tensor(m, name, *t);
  b.f_phi.frozen = true;
  for (std::size_t a = 0; a < kAllAxes.size(); ++a) {
    Tensor t({cfg.k});
    take_tensor(m, "anchor." + std::to_string(a), t);
    b.anchors.push_back(t);
  }
  b.backbone.check();
  return b;
}

BaseModel build_base_model(const ExperimentConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  BaseModel base;
  base.backbone = BackboneWeights::init(cfg.backbone, sub_seed(cfg.seed, 1));
  base.head = OutputHead::init(cfg.backbone.d_model, cfg.backbone.vocab_size, sub_seed(cfg.seed, 2));

  // Each epoch draws, per record, the preferred answer with probability
  // aligned_fraction and the rejected one otherwise.
  auto epoch_data = [&](int epoch) {
    std::mt19937_64 rng(sub_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::vector<LmSequence> seqs;
    for (Axis a : kAllAxes) {
      for (const auto& r : corpus.train_of(a)) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        const std::string& answer = u < cfg.aligned_fraction || r.rejected.empty() ? r.response : r.rejected;
        LmSequence s;
        s.tokens = TokenSequence::from_text(r.instruction + answer);
        s.loss_from = static_cast<int>(r.instruction.size());
        seqs.push_back(std::move(s));
      }
    }
    std::shuffle(seqs.begin(), seqs.end(), rng);
    return seqs;
  };
  LmTrainConfig lm;
  lm.epochs = cfg.lm_epochs;
  lm.batch_size = cfg.lm_batch;
  lm.lr = cfg.lm_lr;
  lm.seed = sub_seed(cfg.seed, 3);
  base.lm_loss = train_language_model(epoch_data, base.backbone, base.head, lm).epoch_loss;

  base.anchors = make_axis_anchors(cfg.k, static_cast<int>(kAllAxes.size()), sub_seed(cfg.seed, 4));
  std::vector<LabeledExample> labeled;
  for (Axis a : kAllAxes) {
    const Tensor& anchor = base.anchors[static_cast<int>(a)];
    Tensor negative = anchor;
    for (auto& x : negative.data()) x = -x;
    for (const auto& r : corpus.train_of(a)) {
      labeled.push_back({encode_reference(TokenSequence::from_text(r.response), base.backbone), anchor});
      if (!r.rejected.empty()) {
        labeled.push_back({encode_reference(TokenSequence::from_text(r.rejected), base.backbone), negative});
      }
    }
  }
  base.f_phi = MlpHead::init(cfg.backbone.d_model, cfg.d_hid, cfg.k, sub_seed(cfg.seed, 5));
  ReferencePretrainConfig rc;
  rc.epochs = cfg.ref_epochs;
  rc.lr = cfg.ref_lr;
  rc.seed = sub_seed(cfg.seed, 6);
  base.ref_loss = pretrain_reference(labeled, base.f_phi, rc);
  return base;
}

// ---------------------------------------------------------------------------
// steering training

SteeredModel init_steered(const ExperimentConfig& cfg, const BaseModel& base, int layer, float init_std) {
  SteeredModel m;
  if (cfg.policy_from_reference) {
    m.f_theta = base.f_phi;
    m.f_theta.frozen = false;
  } else {
    m.f_theta = MlpHead::init(cfg.backbone.d_model, cfg.d_hid, cfg.k, sub_seed(cfg.seed, 7));
  }
  for (std::size_t i = 0; i < cfg.axes.size(); ++i) {
    m.branches.push_back(SteeringBranch::init(static_cast<int>(i), cfg.axes[i], cfg.backbone.d_model, layer,
                                              cfg.alpha, init_std, sub_seed(cfg.seed, 8)));
  }
  return m;
}

std::vector<TrainingSample> training_samples(const Corpus& corpus, const std::vector<Axis>& axes) {
  std::vector<TrainingSample> out;
  for (Axis a : axes) {
    for (const auto& r : corpus.train_of(a)) {
      out.push_back({TokenSequence::from_text(r.instruction), TokenSequence::from_text(r.response), a});
    }
  }
  return out;
}

namespace {

SteeringTrainConfig train_config(const ExperimentConfig& cfg) {
  SteeringTrainConfig tc;
  tc.mode = cfg.optimizer_mode;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.grad_accum = cfg.grad_accum;
  tc.lr = cfg.lr;
  tc.head_lr = cfg.head_lr;
  tc.weight_decay = cfg.weight_decay;
  tc.seed = sub_seed(cfg.seed, 9);
  return tc;
}

// Random unit directions in R^d, one per axis, for the objective without
// policy/reference heads.
std::vector<Tensor> direct_anchors(const ExperimentConfig& cfg) {
  return make_axis_anchors(cfg.backbone.d_model, static_cast<int>(kAllAxes.size()), sub_seed(cfg.seed, 10));
}

}  // namespace

TrainingRun run_training(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                         const TrainingOptions& opt) {
  cfg.validate();
  const int layer = opt.layer > 0 ? opt.layer : cfg.resolved_layer();
  const float init_std = opt.init_std >= 0.0f ? opt.init_std : cfg.init_std;
  TrainingRun run;
  if (!opt.resume_from.empty()) {
    std::tie(run.model, run.cursor) = load_training_state(opt.resume_from, cfg, base, layer);
  } else {
    run.model = init_steered(cfg, base, layer, init_std);
  }
  SteeringTrainConfig tc = train_config(cfg);
  if (opt.direct_objective) tc.direct_anchors = direct_anchors(cfg);

  EpochHook hook;
  if (opt.epoch_metrics) {
    hook = [&](const EpochRecord&, const std::vector<SteeringBranch>& branches, const PolicyHead&) {
      run.epoch_scores.push_back(evaluate_full(corpus, branches, base, cfg.max_new_tokens));
      run.epoch_bd.push_back(branches.size() >= 2 ? evaluate_bd(corpus, branches, base) : 0.0);
    };
  }
  run.report = train_branches(training_samples(corpus, cfg.axes), run.model.branches, run.model.f_theta, base.f_phi,
                              base.backbone, tc, hook, &run.cursor, opt.stop_after_epoch);
  if (!opt.save_to.empty()) save_training_state(opt.save_to, run.model, run.cursor);
  return run;
}

namespace {

void add_adam(TensorRefs& refs, std::vector<Tensor>& scratch, const std::string& prefix, const AdamWState& s) {
  if (!s.m.empty()) refs.emplace_back(prefix + ".m", &s.m);
  if (!s.v.empty()) refs.emplace_back(prefix + ".v", &s.v);
  scratch.push_back(Tensor::vector({static_cast<float>(s.step)}));
}

void read_adam(const TensorMap& m, const std::string& prefix, AdamWState& s) {
  if (m.count(prefix + ".m")) s.m = m.at(prefix + ".m");
  if (m.count(prefix + ".v")) s.v = m.at(prefix + ".v");
  Tensor step({1});
  take_tensor(m, prefix + ".step", step);
  s.step = static_cast<long>(step[0]);
}

}  // namespace

void save_training_state(const std::string& path, const SteeredModel& m, const TrainingCursor& cursor) {
  TensorRefs refs;
  std::vector<Tensor> scratch;
  // Scalars live in scratch; reserve so their addresses stay put.
  scratch.reserve(4 + m.branches.size() + cursor.head_states.size());
  for (auto& p : m.f_theta.named("policy")) refs.push_back(p);
  std::vector<std::string> step_names;
  for (const auto& b : m.branches) {
    const std::string p = "branch" + std::to_string(b.branch_id);
    refs.emplace_back(p + ".v", &b.v);
    add_adam(refs, scratch, p + ".adam", b.optimizer);
    step_names.push_back(p + ".adam.step");
  }
  const char* head_names[] = {"w1", "b1", "w2", "b2"};
  for (std::size_t i = 0; i < cursor.head_states.size(); ++i) {
    const std::string p = std::string("policy_adam.") + head_names[i];
    add_adam(refs, scratch, p, cursor.head_states[i]);
    step_names.push_back(p + ".step");
  }
  scratch.push_back(Tensor::vector({static_cast<float>(cursor.next_epoch)}));
  step_names.push_back("cursor.next_epoch");
  scratch.push_back(Tensor::vector({static_cast<float>(cursor.step)}));
  step_names.push_back("cursor.step");
  scratch.push_back(Tensor::vector({static_cast<float>(cursor.head_states.size())}));
  step_names.push_back("cursor.head_states");
  for (std::size_t i = 0; i < scratch.size(); ++i) refs.emplace_back(step_names[i], &scratch[i]);
  save_checkpoint(path, refs);
}

std::pair<SteeredModel, TrainingCursor> load_training_state(const std::string& path, const ExperimentConfig& cfg,
                                                            const BaseModel& base, int layer) {
  const TensorMap m = load_checkpoint(path);
  SteeredModel model = init_steered(cfg, base, layer, cfg.init_std);
  for (auto& [name, t] : model.f_theta.named("policy")) take_tensor(m, name, *t);
  for (auto& b : model.branches) {
    const std::string p = "branch" + std::to_string(b.branch_id);
    take_tensor(m, p + ".v", b.v);
    read_adam(m, p + ".adam", b.optimizer);
  }
  TrainingCursor cur;
  Tensor scalar({1});
  take_tensor(m, "cursor.next_epoch", scalar);
  cur.next_epoch = static_cast<int>(scalar[0]);
  take_tensor(m, "cursor.step", scalar);
  cur.step = static_cast<long>(scalar[0]);
  take_tensor(m, "cursor.head_states", scalar);
  const char* head_names[] = {"w1", "b1", "w2", "b2"};
  for (int i = 0; i < static_cast<int>(scalar[0]); ++i) {
    AdamWState s;
    read_adam(m, std::string("policy_adam.") + head_names[i], s);
    cur.head_states.push_back(std::move(s));
  }
  return {std::move(model), std::move(cur)};
}

// ---------------------------------------------------------------------------
// evaluation

ScoreCounts count_records(const std::vector<CorpusRecord>& records, const SteeringBranch* branch,
                          const BaseModel& base, const JudgeRuleSet& judge, int max_new_tokens) {
  GenerationConfig gc;
  gc.max_new_tokens = max_new_tokens;
  std::vector<JudgedOutput> outputs;
  std::vector<std::string> baselines;
  for (const auto& r : records) {
    const TokenSequence prompt = TokenSequence::from_text(r.instruction);
    const TokenSequence full = generate_branch(prompt, branch, base.backbone, base.head, gc);
    const std::string text = full.text().substr(r.instruction.size());
    outputs.push_back({r.instruction, strip_stop(text)});
    baselines.push_back(strip_stop(r.rejected));
  }
  return score_outputs(outputs, baselines, judge).counts;
}

AlignmentScores evaluate_records(const std::vector<CorpusRecord>& records, const SteeringBranch* branch,
                                 const BaseModel& base, const JudgeRuleSet& judge, int max_new_tokens) {
  return scores_from_counts(count_records(records, branch, base, judge, max_new_tokens));
}

namespace {

ScoreCounts merge(ScoreCounts a, const ScoreCounts& b) {
  a.wins += b.wins;
  a.unsafe += b.unsafe;
  a.truthful += b.truthful;
  a.informative += b.informative;
  a.samples += b.samples;
  return a;
}

const SteeringBranch* branch_for(const std::vector<SteeringBranch>& branches, Axis a) {
  for (const auto& b : branches)
    if (b.axis == a) return &b;
  return nullptr;
}

}  // namespace

AlignmentScores evaluate_full(const Corpus& corpus, const std::vector<SteeringBranch>& branches,
                              const BaseModel& base, int max_new_tokens) {
  ScoreCounts total;
  for (Axis a : kAllAxes) {
    const SteeringBranch* b = branch_for(branches, a);
    total = merge(total, count_records(corpus.test_of(a), b, base, corpus.judge, max_new_tokens));
  }
  return scores_from_counts(total);
}

AlignmentScores evaluate_base(const Corpus& corpus, const BaseModel& base, int max_new_tokens) {
  return evaluate_full(corpus, {}, base, max_new_tokens);
}

double axis_loss(const std::vector<CorpusRecord>& records, const SteeringBranch& branch, const PolicyHead& f_theta,
                 const BaseModel& base) {
  if (records.empty()) throw DataError("axis_loss: no records");
  double sum = 0.0;
  for (const auto& r : records) {
    const HiddenStates h = forward_to_layer(TokenSequence::from_text(r.instruction), base.backbone, branch.inject_layer);
    const Tensor target = reference_embed(encode_reference(TokenSequence::from_text(r.response), base.backbone),
                                          base.f_phi);
    sum += branch_objective(h, branch, &f_theta, target, base.backbone).loss;
  }
  return sum / static_cast<double>(records.size());
}

std::vector<std::vector<double>> cross_axis_losses(const Corpus& corpus, const SteeredModel& m,
                                                   const BaseModel& base) {
  std::vector<std::vector<double>> out;
  for (const auto& b : m.branches) {
    std::vector<double> row;
    for (Axis a : kAllAxes) row.push_back(axis_loss(corpus.test_of(a), b, m.f_theta, base));
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<HiddenStates> branch_states(const TokenSequence& prompt, const std::vector<SteeringBranch>& branches,
                                        const BackboneWeights& w) {
  std::vector<HiddenStates> out;
  for (const auto& b : branches) {
    HiddenStates h = inject(forward_to_layer(prompt, w, b.inject_layer), b);
    for (int l = b.inject_layer + 1; l <= w.cfg.n_layers; ++l) h = decoder_block(h, l, w, false);
    out.push_back(std::move(h));
  }
  return out;
}

double evaluate_bd(const Corpus& corpus, const std::vector<SteeringBranch>& branches, const BaseModel& base) {
  double sum = 0.0;
  long n = 0;
  for (Axis a : kAllAxes) {
    for (const auto& r : corpus.test_of(a)) {
      sum += branch_divergence(branch_states(TokenSequence::from_text(r.instruction), branches, base.backbone));
      ++n;
    }
  }
  if (n == 0) throw DataError("evaluate_bd: empty test sets");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// grids

std::vector<ScoreRow> run_mixing_grid(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                                      const SteeredModel& m, MixingMode mode) {
  std::vector<ScoreRow> rows;
  const int gen = cfg.max_new_tokens;
  if (mode == MixingMode::implicit) {
    for (const auto& b : m.branches) {
      for (Axis a : kAllAxes) {
        if (a == b.axis) continue;
        rows.push_back({"implicit:" + std::string(axis_name(b.axis)), std::string(axis_name(a)),
                        evaluate_records(corpus.test_of(a), &b, base, corpus.judge, gen), std::nullopt});
      }
    }
    return rows;
  }
  for (Axis a : kAllAxes) {
    rows.push_back({"explicit:base", std::string(axis_name(a)),
                    evaluate_records(corpus.test_of(a), nullptr, base, corpus.judge, gen), std::nullopt});
  }
  for (const auto& b : m.branches) {
    rows.push_back({"explicit:" + std::string(axis_name(b.axis)) + "_only", std::string(axis_name(b.axis)),
                    evaluate_records(corpus.test_of(b.axis), &b, base, corpus.judge, gen), std::nullopt});
  }
  std::optional<double> bd;
  if (m.branches.size() >= 2) bd = evaluate_bd(corpus, m.branches, base);
  rows.push_back({"explicit:full", "all", evaluate_full(corpus, m.branches, base, gen), bd});
  return rows;
}

std::vector<ScoreRow> run_ablations(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base) {
  struct Variant {
    const char* name;
    TrainingOptions opt;
  };
  TrainingOptions full, no_ref, random_init;
  full.epoch_metrics = no_ref.epoch_metrics = random_init.epoch_metrics = false;
  no_ref.direct_objective = true;
  random_init.init_std = 1.0f;
  const Variant variants[] = {{"full", full}, {"no_policy_ref", no_ref}, {"random_init", random_init}};
  std::vector<ScoreRow> rows;
  for (const auto& v : variants) {
    TrainingRun run = run_training(cfg, corpus, base, v.opt);
    std::optional<double> bd;
    if (run.model.branches.size() >= 2) bd = evaluate_bd(corpus, run.model.branches, base);
    rows.push_back({v.name, "all", evaluate_full(corpus, run.model.branches, base, cfg.max_new_tokens), bd});
  }
  return rows;
}

std::vector<ScoreRow> run_layer_sweep(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                                      const std::vector<int>& layers) {
  std::vector<ScoreRow> rows;
  for (int l : layers) {
    if (l < 1 || l > cfg.backbone.n_layers) throw ConfigError("layer sweep: layer " + std::to_string(l) + " out of range");
    TrainingOptions opt;
    opt.layer = l;
    opt.epoch_metrics = false;
    TrainingRun run = run_training(cfg, corpus, base, opt);
    std::optional<double> bd;
    if (run.model.branches.size() >= 2) bd = evaluate_bd(corpus, run.model.branches, base);
    rows.push_back({label("layer", l), "all", evaluate_full(corpus, run.model.branches, base, cfg.max_new_tokens), bd});
  }
  return rows;
}

std::vector<ScoreRow> run_magnitude_sweep(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                                          const SteeredModel& m, const std::vector<float>& alphas,
                                          bool include_null) {
  std::vector<ScoreRow> rows;
  const int gen = cfg.max_new_tokens;
  std::vector<float> grid;
  if (include_null) grid.push_back(0.0f);
  for (float a : alphas) {
    if (!(a > 0.0f)) throw ConfigError("magnitude sweep: alpha must be positive");
    grid.push_back(a);
  }
  for (float alpha : grid) {
    std::vector<SteeringBranch> branches = m.branches;
    for (auto& b : branches) b.alpha = alpha;
    const std::string id = label("alpha", alpha);
    ScoreCounts total;
    std::vector<ScoreRow> per_axis;
    for (Axis a : kAllAxes) {
      ScoreCounts c = count_records(corpus.test_of(a), branch_for(branches, a), base, corpus.judge, gen);
      per_axis.push_back({id, std::string(axis_name(a)), scores_from_counts(c), std::nullopt});
      total = merge(total, c);
    }
    std::optional<double> bd;
    if (branches.size() >= 2 && alpha > 0.0f) bd = evaluate_bd(corpus, branches, base);
    rows.push_back({id, "all", scores_from_counts(total), bd});
    rows.insert(rows.end(), per_axis.begin(), per_axis.end());
  }
  return rows;
}

DivergenceComparison compare_divergence(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base) {
  DivergenceComparison out;
  TrainingOptions opt;
  opt.epoch_metrics = false;
  TrainingRun joint = run_training(cfg, corpus, base, opt);
  out.joint_bd = evaluate_bd(corpus, joint.model.branches, base);

  // Same initial vectors and head as the joint run, trained one branch at a
  // time on a bootstrap resample of that branch's prompts. The joint run
  // updates every branch on each mixed chunk, so the per-branch chunk is
  // shrunk until each branch takes as many optimizer steps as it did there.
  std::size_t joint_samples = 0;
  for (Axis a : kAllAxes) joint_samples += corpus.train_of(a).size();
  const std::size_t joint_chunk = static_cast<std::size_t>(cfg.batch_size) * cfg.grad_accum;
  const std::size_t joint_steps = std::max<std::size_t>(1, (joint_samples + joint_chunk - 1) / joint_chunk);
  SteeredModel start = init_steered(cfg, base, cfg.resolved_layer(), cfg.init_std);
  std::vector<SteeringBranch> trained;
  for (std::size_t i = 0; i < start.branches.size(); ++i) {
    SteeringBranch b = start.branches[i];
    PolicyHead head = start.f_theta;
    const auto& pool = corpus.train_of(b.axis);
    std::mt19937_64 rng(sub_seed(cfg.seed, 200 + i));
    std::vector<TrainingSample> samples;
    for (std::size_t k = 0; k < pool.size(); ++k) {
      const auto& r = pool[rng() % pool.size()];
      samples.push_back({TokenSequence::from_text(r.instruction), TokenSequence::from_text(r.response), b.axis});
    }
    SteeringTrainConfig tc = train_config(cfg);
    tc.seed = sub_seed(cfg.seed, 300 + i);
    tc.batch_size = static_cast<int>(std::max<std::size_t>(1, (samples.size() + joint_steps - 1) / joint_steps));
    tc.grad_accum = 1;
    std::vector<SteeringBranch> one{b};
    train_branches(samples, one, head, base.f_phi, base.backbone, tc);
    trained.push_back(one[0]);
  }
  out.independent_bd = evaluate_bd(corpus, trained, base);
  return out;
}

}  // namespace ambs
