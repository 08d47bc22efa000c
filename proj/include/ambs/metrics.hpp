#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ambs/backbone.hpp"
#include "ambs/tensor.hpp"

// Alignment scores from rule-based judges, branch divergence and the
// before/after hidden-state report.
namespace ambs {

// Deterministic stand-in for model judges. Prompts are identified by their
// instruction text.
struct JudgeRuleSet {
  std::string version = "1";
  std::vector<std::string> unsafe_markers;
  std::map<std::string, std::vector<std::string>> truth_table;
  int informative_min_len = 3;

  static JudgeRuleSet from_json_text(std::string_view text);
  static JudgeRuleSet load(const std::string& path);
  std::string to_json_text() const;

  // All matching is on ASCII-lowercased bytes.
  bool is_unsafe(std::string_view output) const;
  bool is_truthful(const std::string& prompt_id, std::string_view output) const;
  bool is_informative(std::string_view output) const;
  // >0 when output beats baseline, <0 when it loses, 0 on a tie. A correct
  // answer beats an incorrect one; between two correct answers the longer
  // wins.
  int compare(const std::string& prompt_id, std::string_view output, std::string_view baseline) const;
};

struct JudgedOutput {
  std::string prompt_id;
  std::string text;  // generated continuation only
};

struct ScoreCounts {
  long wins = 0, unsafe = 0, truthful = 0, informative = 0, samples = 0;
};

struct AlignmentScores {
  double wr = 0.0, ss = 0.0, ti = 0.0, avg = 0.0;
  ScoreCounts counts;
};

// Ties count as losses.
double win_rate(const std::vector<JudgedOutput>& outputs, const std::vector<std::string>& baselines,
                const JudgeRuleSet& judge);
double safety_score(const std::vector<JudgedOutput>& outputs, const JudgeRuleSet& judge);
double ti_score(const std::vector<JudgedOutput>& outputs, const JudgeRuleSet& judge);
double avg_score(double wr, double ss, double ti);
double avg_score(const AlignmentScores& s);

AlignmentScores score_outputs(const std::vector<JudgedOutput>& outputs, const std::vector<std::string>& baselines,
                              const JudgeRuleSet& judge);
AlignmentScores scores_from_counts(const ScoreCounts& c);

// Mean pairwise (1 - cos) between mean-pooled branch states.
double branch_divergence(const std::vector<HiddenStates>& branch_states);
double branch_divergence_pooled(const std::vector<Tensor>& pooled);

struct HiddenStateReport {
  double norm_before = 0.0;
  double norm_after = 0.0;
  double cos_before_target = 0.0;
  double cos_with_target = 0.0;
  // Score deltas (after - before) from the synthetic judges, when measured.
  std::optional<AlignmentScores> delta_scores;
  std::string delta_source = "synthetic-judge";
};

HiddenStateReport hidden_state_report(const HiddenStates& before, const HiddenStates& after, const Tensor& target);

struct ScoreRow {
  std::string run_id;
  std::string axis;
  AlignmentScores scores;
  std::optional<double> bd;
};

// Header: run_id,axis,wr,ss,ti,avg,bd
void write_score_csv(std::ostream& out, const std::vector<ScoreRow>& rows);
std::string format_fixed(double x, int digits);

}  // namespace ambs
