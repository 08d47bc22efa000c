#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ambs/backbone.hpp"
#include "ambs/decode.hpp"
#include "ambs/steering.hpp"

// Fragmentation measurement: per-branch timing, idle compute ratio and
// block-execution accounting for shared vs independent branch decoding.
namespace ambs {

// Σ (t_max - t_n) / (N · t_max). Throws DataError on an empty list or a
// non-positive time.
double icr(const std::vector<double>& branch_times);
// Population variance.
double time_variance(const std::vector<double>& branch_times);

enum class ExecMode { naive, ambs };
std::string_view exec_mode_name(ExecMode m);
ExecMode parse_exec_mode(std::string_view name);

struct TimingRecord {
  ExecMode mode = ExecMode::ambs;
  int n_branches = 0;
  int prompt_len = 0;  // mean over prompts, rounded down
  int gen_len = 0;     // configured max_new_tokens
  std::vector<double> branch_times;  // seconds, summed over prompts
  double shared_prefix_time = 0.0;
  double total_wall = 0.0;
  std::size_t memory_proxy = 0;  // largest per-prompt live state payload
  long prefix_blocks = 0;
  long total_blocks = 0;

  double it_mean() const;
  double it_var() const { return time_variance(branch_times); }
  double icr_value() const { return icr(branch_times); }
};

TimingRecord measure_generation(const std::vector<TokenSequence>& prompts, const std::vector<SteeringBranch>& branches,
                                const BackboneWeights& w, const OutputHead& head, const GenerationConfig& cfg,
                                ExecMode mode);

// Header: mode,n_branches,prompt_len,gen_len,it_mean,it_var,icr,prefix_blocks,total_blocks,mem_bytes
void write_efficiency_csv(std::ostream& out, const std::vector<TimingRecord>& records);

}  // namespace ambs
