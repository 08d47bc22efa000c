#include "ambs/efficiency.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>

#include "ambs/error.hpp"

namespace ambs {

double icr(const std::vector<double>& branch_times) {
  if (branch_times.empty()) throw DataError("icr: no branch times");
  for (double t : branch_times)
    if (!(t > 0.0)) throw DataError("icr: branch times must be positive");
  const double t_max = *std::max_element(branch_times.begin(), branch_times.end());
  double idle = 0.0;
  for (double t : branch_times) idle += t_max - t;
  return idle / (static_cast<double>(branch_times.size()) * t_max);
}

double time_variance(const std::vector<double>& branch_times) {
  if (branch_times.empty()) throw DataError("time_variance: no branch times");
  double mean = 0.0;
  for (double t : branch_times) mean += t;
  mean /= static_cast<double>(branch_times.size());
  double var = 0.0;
  for (double t : branch_times) var += (t - mean) * (t - mean);
  return var / static_cast<double>(branch_times.size());
}

std::string_view exec_mode_name(ExecMode m) { return m == ExecMode::naive ? "naive" : "ambs"; }

ExecMode parse_exec_mode(std::string_view name) {
  if (name == "naive") return ExecMode::naive;
  if (name == "ambs") return ExecMode::ambs;
  throw ConfigError("unknown execution mode '" + std::string(name) + "'");
}

double TimingRecord::it_mean() const {
  if (branch_times.empty()) return 0.0;
  double s = 0.0;
  for (double t : branch_times) s += t;
  return s / static_cast<double>(branch_times.size());
}

TimingRecord measure_generation(const std::vector<TokenSequence>& prompts, const std::vector<SteeringBranch>& branches,
                                const BackboneWeights& w, const OutputHead& head, const GenerationConfig& cfg,
                                ExecMode mode) {
  if (prompts.empty()) throw DataError("measure_generation: no prompts");
  if (branches.empty()) throw ContractError("measure_generation: no branches");
  TimingRecord rec;
  rec.mode = mode;
  rec.n_branches = static_cast<int>(branches.size());
  rec.gen_len = cfg.max_new_tokens;
  rec.branch_times.assign(branches.size(), 0.0);
  long prompt_tokens = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& p : prompts) {
    GenerateAllResult r = mode == ExecMode::ambs ? generate_all(p, branches, w, head, cfg)
                                                 : generate_independent(p, branches, w, head, cfg);
    for (std::size_t i = 0; i < branches.size(); ++i) rec.branch_times[i] += r.branch_seconds[i];
    rec.shared_prefix_time += r.shared_seconds;
    rec.memory_proxy = std::max(rec.memory_proxy, r.report.mem_bytes);
    rec.prefix_blocks += r.report.prefix_blocks();
    rec.total_blocks += r.report.total_blocks();
    prompt_tokens += p.length();
  }
  rec.total_wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.prompt_len = static_cast<int>(prompt_tokens / static_cast<long>(prompts.size()));
  // A branch that finished below clock resolution still took time.
  for (auto& t : rec.branch_times) t = std::max(t, 1e-9);
  return rec;
}

void write_efficiency_csv(std::ostream& out, const std::vector<TimingRecord>& records) {
  out << "mode,n_branches,prompt_len,gen_len,it_mean,it_var,icr,prefix_blocks,total_blocks,mem_bytes\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.9g,%.9g,%.9g,%ld,%ld,%zu\n", std::string(exec_mode_name(r.mode)).c_str(),
                  r.n_branches, r.prompt_len, r.gen_len, r.it_mean(), r.it_var(), r.icr_value(), r.prefix_blocks,
                  r.total_blocks, r.memory_proxy);
    out << buf;
  }
}

}  // namespace ambs
