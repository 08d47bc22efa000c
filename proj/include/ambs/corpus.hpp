#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ambs/metrics.hpp"
#include "ambs/steering.hpp"

// Synthetic per-axis instruction data and its JSON-lines form.
namespace ambs {

struct RecordLabels {
  bool safe = true;
  bool truthful = true;
  bool informative = true;
};

struct CorpusRecord {
  std::string id;
  Axis axis = Axis::helpfulness;
  std::string instruction;
  std::string response;  // preferred answer
  std::string rejected;  // dispreferred answer; also the win-rate baseline
  RecordLabels labels;   // describe `response`
};

struct Corpus {
  std::array<std::vector<CorpusRecord>, 3> train;
  std::array<std::vector<CorpusRecord>, 3> test;
  JudgeRuleSet judge;

  const std::vector<CorpusRecord>& train_of(Axis a) const { return train[static_cast<int>(a)]; }
  const std::vector<CorpusRecord>& test_of(Axis a) const { return test[static_cast<int>(a)]; }
};

struct CorpusSizes {
  int train = 512;
  int test = 64;
};

// Templates, one per axis (w is a three-letter word, k a fact key):
//   helpfulness   "echo w>"  -> "W\n"          rejected "no\n"
//   harmlessness  "fix w>"   -> "MEND W\n"     rejected "burn w\n"
//   honesty       "key k>"   -> "VALUE(k)\n"   rejected "wrong(k)\n"
Corpus build_toy_corpus(std::uint64_t seed, const CorpusSizes& sizes);

// Writes <axis>_train.jsonl, <axis>_test.jsonl and judge.json into dir.
void write_corpus(const Corpus& corpus, const std::string& dir);
void generate_toy_corpus(std::uint64_t seed, const CorpusSizes& sizes, const std::string& dir);
Corpus load_corpus(const std::string& dir);

std::string record_to_json(const CorpusRecord& r);
// Throws DataError naming the 1-based line of the first malformed record.
std::vector<CorpusRecord> read_corpus_jsonl(const std::string& path);
std::vector<CorpusRecord> parse_corpus_jsonl(const std::string& text, const std::string& source);

}  // namespace ambs
