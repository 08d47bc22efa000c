#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ambs/checkpoint.hpp"
#include "ambs/config.hpp"
#include "ambs/corpus.hpp"
#include "ambs/decode.hpp"
#include "ambs/metrics.hpp"
#include "ambs/steering.hpp"

// End-to-end runs: base-model pretraining, steering training, evaluation and
// the analysis grids.
namespace ambs {

struct BaseModel {
  BackboneWeights backbone;
  OutputHead head;
  ReferenceHead f_phi;
  std::vector<Tensor> anchors;  // one unit [k] vector per axis
  std::vector<double> lm_loss;
  double ref_loss = 0.0;

  TensorRefs tensors() const;
  static BaseModel from_tensors(const TensorMap& m, const ExperimentConfig& cfg);
};

// Language-model pretraining on the mixed corpus, then the reference head
// fitted on preferred (+anchor) and rejected (-anchor) responses and frozen.
BaseModel build_base_model(const ExperimentConfig& cfg, const Corpus& corpus);

struct SteeredModel {
  PolicyHead f_theta;
  std::vector<SteeringBranch> branches;
};

SteeredModel init_steered(const ExperimentConfig& cfg, const BaseModel& base, int layer, float init_std);
std::vector<TrainingSample> training_samples(const Corpus& corpus, const std::vector<Axis>& axes);

struct TrainingOptions {
  int layer = 0;             // 0: cfg.resolved_layer()
  float init_std = -1.0f;    // < 0: cfg.init_std
  bool direct_objective = false;
  bool epoch_metrics = true;
  std::string resume_from;   // training-state checkpoint
  std::string save_to;       // training-state checkpoint written at the end
  int stop_after_epoch = -1;
};

struct TrainingRun {
  SteeredModel model;
  TrainingReport report;
  std::vector<AlignmentScores> epoch_scores;
  std::vector<double> epoch_bd;
  TrainingCursor cursor;
};

TrainingRun run_training(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                         const TrainingOptions& opt = {});

void save_training_state(const std::string& path, const SteeredModel& m, const TrainingCursor& cursor);
std::pair<SteeredModel, TrainingCursor> load_training_state(const std::string& path, const ExperimentConfig& cfg,
                                                            const BaseModel& base, int layer);

// ---- evaluation ---------------------------------------------------------------
// Greedy continuation of every record, judged against its rejected answer.
// A null branch decodes the unsteered model.
ScoreCounts count_records(const std::vector<CorpusRecord>& records, const SteeringBranch* branch,
                          const BaseModel& base, const JudgeRuleSet& judge, int max_new_tokens);
AlignmentScores evaluate_records(const std::vector<CorpusRecord>& records, const SteeringBranch* branch,
                                 const BaseModel& base, const JudgeRuleSet& judge, int max_new_tokens);
// Every axis's test set decoded by the branch of that axis.
AlignmentScores evaluate_full(const Corpus& corpus, const std::vector<SteeringBranch>& branches,
                              const BaseModel& base, int max_new_tokens);
AlignmentScores evaluate_base(const Corpus& corpus, const BaseModel& base, int max_new_tokens);

// Mean steering loss of `branch` over the records (Stage I cached per record).
double axis_loss(const std::vector<CorpusRecord>& records, const SteeringBranch& branch, const PolicyHead& f_theta,
                 const BaseModel& base);
// [branch][axis] matrix of axis_loss over the test sets.
std::vector<std::vector<double>> cross_axis_losses(const Corpus& corpus, const SteeredModel& m, const BaseModel& base);

// Top-of-stack states of every branch for one prompt.
std::vector<HiddenStates> branch_states(const TokenSequence& prompt, const std::vector<SteeringBranch>& branches,
                                        const BackboneWeights& w);
// Branch divergence averaged over every test prompt.
double evaluate_bd(const Corpus& corpus, const std::vector<SteeringBranch>& branches, const BaseModel& base);

// ---- analysis grids -------------------------------------------------------------
enum class MixingMode { implicit, explicit_ };

std::vector<ScoreRow> run_mixing_grid(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                                      const SteeredModel& m, MixingMode mode);
std::vector<ScoreRow> run_ablations(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base);
std::vector<ScoreRow> run_layer_sweep(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                                      const std::vector<int>& layers);
// Overall row then one row per axis for each α. With include_null an α = 0
// row (the unsteered model) comes first.
std::vector<ScoreRow> run_magnitude_sweep(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base,
                                          const SteeredModel& m, const std::vector<float>& alphas,
                                          bool include_null = false);

struct DivergenceComparison {
  double joint_bd = 0.0;
  double independent_bd = 0.0;
};

// Joint training (one Stage I pass feeding every branch, shared f_θ) against
// one separate run per branch, each with its own f_θ copy and its own
// bootstrap resample of the prompts. Same seeds, same data pool, and the same
// number of optimizer steps per branch as the joint run.
DivergenceComparison compare_divergence(const ExperimentConfig& cfg, const Corpus& corpus, const BaseModel& base);

}  // namespace ambs
