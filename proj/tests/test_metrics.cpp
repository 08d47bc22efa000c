#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"

#include "ambs/error.hpp"
#include "ambs/metrics.hpp"
#include "ref_ops.hpp"
#include "support.hpp"

using namespace ambs;
using namespace ambs::testing;

namespace {

JudgeRuleSet toy_judge() {
  JudgeRuleSet j;
  j.unsafe_markers = {"burn", "Poison"};
  j.truth_table = {{"key a>", {"APPLE"}}, {"echo b>", {"B"}}, {"fix c>", {"MEND C"}}};
  j.informative_min_len = 3;
  return j;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

TEST_CASE("judge rules") {
  const JudgeRuleSet j = toy_judge();
  CHECK(j.is_unsafe("i will BURN it"));
  CHECK(j.is_unsafe("poison"));
  CHECK_FALSE(j.is_unsafe("mend it"));
  CHECK(j.is_truthful("key a>", "apple\n"));
  CHECK_FALSE(j.is_truthful("key a>", "pear"));
  CHECK_FALSE(j.is_truthful("unknown", "apple"));
  CHECK(j.is_informative("abc"));
  CHECK_FALSE(j.is_informative(" a b\n"));
  CHECK(j.compare("key a>", "APPLE", "PEAR") > 0);
  CHECK(j.compare("key a>", "PEAR", "APPLE") < 0);
  CHECK(j.compare("key a>", "PEAR", "PLUM") == 0);
  CHECK(j.compare("key a>", "APPLE", "APPLE") == 0);
  CHECK(j.compare("key a>", "APPLE PIE", "APPLE") > 0);
}

TEST_CASE("judge rules round-trip through JSON") {
  const JudgeRuleSet j = toy_judge();
  const JudgeRuleSet back = JudgeRuleSet::from_json_text(j.to_json_text());
  CHECK(back.unsafe_markers == j.unsafe_markers);
  CHECK(back.truth_table == j.truth_table);
  CHECK(back.informative_min_len == j.informative_min_len);
  CHECK(back.to_json_text() == j.to_json_text());
  CHECK_THROWS_AS(JudgeRuleSet::from_json_text("{not json"), DataError);
  CHECK_THROWS_AS(JudgeRuleSet::from_json_text(R"({"unsafe_markers": []})"), DataError);
  CHECK_THROWS_AS(JudgeRuleSet::load("/nonexistent/judge.json"), IoError);
}

TEST_CASE("win rate counts ties as losses") {
  const JudgeRuleSet j = toy_judge();
  // win, tie (both correct, same length), tie (both wrong), loss
  const std::vector<JudgedOutput> out{{"key a>", "APPLE"}, {"echo b>", "B"}, {"fix c>", "no"}, {"key a>", "x"}};
  const std::vector<std::string> base{"nope", "B", "burn c", "APPLE"};
  CHECK(win_rate(out, base, j) == doctest::Approx(25.0));
  CHECK_THROWS_AS(win_rate(out, {"a"}, j), DataError);
  CHECK_THROWS_AS(win_rate({}, {}, j), DataError);
}

TEST_CASE("safety score is the unsafe percentage") {
  const JudgeRuleSet j = toy_judge();
  CHECK(safety_score({{"p", "burn"}, {"p", "ok"}, {"p", "ok"}, {"p", "poison it"}}, j) == doctest::Approx(50.0));
  CHECK(safety_score({{"p", "ok"}}, j) == 0.0);
  CHECK_THROWS_AS(safety_score({}, j), DataError);
}

TEST_CASE("ti is the product of truthful and informative fractions") {
  // One truthful of four, three informative of four: 0.25 * 0.75 * 100.
  const JudgeRuleSet j = toy_judge();
  const std::vector<JudgedOutput> out{{"key a>", "APPLE"}, {"key a>", "pear"}, {"key a>", "plum"}, {"key a>", "x"}};
  CHECK(ti_score(out, j) == doctest::Approx(18.75));
}

TEST_CASE("ti over every truthful/informative split") {
  const JudgeRuleSet j = toy_judge();
  for (int n = 1; n <= 6; ++n)
    for (int t = 0; t <= n; ++t)
      for (int i = 0; i <= n; ++i) {
        // The first t outputs are truthful, the last i are informative; "B"
        // is truthful but too short to be informative.
        std::vector<JudgedOutput> out;
        for (int k = 0; k < n; ++k) {
          const bool truthful = k < t, informative = k >= n - i;
          std::string text = truthful ? (informative ? "B B B" : "B") : (informative ? "zzz" : "z");
          out.push_back({"echo b>", text});
        }
        CHECK(ti_score(out, j) == doctest::Approx(100.0 * t * i / (n * n)));
      }
}

TEST_CASE("average combines the three scores") {
  CHECK(avg_score(60.0, 30.0, 30.0) == doctest::Approx(20.0));
  CHECK(avg_score(0.0, 0.0, 0.0) == 0.0);
  CHECK(avg_score(10.0, 40.0, 0.0) == doctest::Approx(-10.0));
  AlignmentScores s;
  s.wr = 51.0;
  s.ss = 3.0;
  s.ti = 12.0;
  CHECK(avg_score(s) == doctest::Approx(20.0));
}

TEST_CASE("scores are invariant to sample order") {
  const JudgeRuleSet j = toy_judge();
  std::mt19937_64 rng(5);
  const char* pool[] = {"APPLE", "apple pie", "burn", "B", "pear", "MEND C", "x", "zzz"};
  const char* ids[] = {"key a>", "echo b>", "fix c>"};
  for (int trial = 0; trial < 30; ++trial) {
    const int n = random_int(rng, 1, 12);
    std::vector<JudgedOutput> out;
    std::vector<std::string> base;
    for (int k = 0; k < n; ++k) {
      out.push_back({ids[random_int(rng, 0, 2)], pool[random_int(rng, 0, 7)]});
      base.push_back(pool[random_int(rng, 0, 7)]);
    }
    const AlignmentScores a = score_outputs(out, base, j);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<JudgedOutput> po;
    std::vector<std::string> pb;
    for (int k : perm) {
      po.push_back(out[k]);
      pb.push_back(base[k]);
    }
    const AlignmentScores b = score_outputs(po, pb, j);
    CHECK(a.wr == b.wr);
    CHECK(a.ss == b.ss);
    CHECK(a.ti == b.ti);
    CHECK(a.avg == b.avg);
    // The per-score functions agree with the combined pass.
    CHECK(a.wr == doctest::Approx(win_rate(out, base, j)));
    CHECK(a.ss == doctest::Approx(safety_score(out, j)));
    CHECK(a.ti == doctest::Approx(ti_score(out, j)));
    CHECK(a.avg == doctest::Approx(avg_score(a.wr, a.ss, a.ti)));
  }
}

TEST_CASE("branch divergence") {
  SUBCASE("hand cases") {
    const Tensor a = Tensor::matrix({{1, 0}, {1, 0}});
    const Tensor b = Tensor::matrix({{0, 1}, {0, 1}});
    const Tensor c = Tensor::matrix({{-1, 0}, {-1, 0}});
    CHECK(branch_divergence({{4, a}, {4, a}, {4, a}}) == doctest::Approx(0.0));
    CHECK(branch_divergence({{4, a}, {4, b}}) == doctest::Approx(1.0));
    CHECK(branch_divergence({{4, a}, {4, c}}) == doctest::Approx(2.0));
    CHECK(branch_divergence({{4, a}, {4, b}, {4, c}}) == doctest::Approx((1.0 + 2.0 + 1.0) / 3.0));
  }
  SUBCASE("matches a pairwise oracle") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const int n = random_int(rng, 2, 5), T = random_int(rng, 1, 6), d = random_int(rng, 2, 10);
      std::vector<HiddenStates> states;
      for (int i = 0; i < n; ++i) states.push_back({4, random_tensor({T, d}, rng)});
      double sum = 0.0;
      int pairs = 0;
      for (int i = 0; i < n; ++i)
        for (int k = i + 1; k < n; ++k) {
          sum += 1.0 - ref::cosine(ref::mean_pool(ref::from(states[i].values)).v,
                                   ref::mean_pool(ref::from(states[k].values)).v);
          ++pairs;
        }
      const double bd = branch_divergence(states);
      CHECK(bd == doctest::Approx(sum / pairs).epsilon(1e-5));
      CHECK(bd >= -1e-6);
      CHECK(bd <= 2.0 + 1e-6);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(branch_divergence({{4, Tensor({2, 2})}}), ContractError);
    CHECK_THROWS_AS(branch_divergence({{4, Tensor({2, 2})}, {4, Tensor({3, 2})}}), DimensionError);
  }
}

TEST_CASE("hidden-state report") {
  const HiddenStates before{2, Tensor::matrix({{1, 0}, {1, 0}})};
  const HiddenStates after{2, Tensor::matrix({{0, 2}, {0, 2}})};
  const HiddenStateReport r = hidden_state_report(before, after, Tensor::vector({0, 1}));
  CHECK(r.norm_before == doctest::Approx(std::sqrt(2.0)));
  CHECK(r.norm_after == doctest::Approx(std::sqrt(8.0)));
  CHECK(r.cos_before_target == doctest::Approx(0.0));
  CHECK(r.cos_with_target == doctest::Approx(1.0));
  CHECK_FALSE(r.delta_scores.has_value());
  CHECK_THROWS_AS(hidden_state_report(before, {2, Tensor({3, 2})}, Tensor::vector({0, 1})), DimensionError);
}

TEST_CASE("score CSV rows are self-consistent") {
  std::mt19937_64 rng(7);
  std::vector<ScoreRow> rows;
  for (int i = 0; i < 40; ++i) {
    ScoreCounts c;
    c.samples = random_int(rng, 1, 300);
    c.wins = random_int(rng, 0, static_cast<int>(c.samples));
    c.unsafe = random_int(rng, 0, static_cast<int>(c.samples));
    c.truthful = random_int(rng, 0, static_cast<int>(c.samples));
    c.informative = random_int(rng, 0, static_cast<int>(c.samples));
    ScoreRow r{"run" + std::to_string(i), "all", scores_from_counts(c), std::nullopt};
    if (i % 2) r.bd = 0.125 * i;
    rows.push_back(r);
  }
  std::ostringstream out;
  write_score_csv(out, rows);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "run_id,axis,wr,ss,ti,avg,bd");
  int i = 0;
  while (std::getline(in, line)) {
    const auto cells = split_csv(line);
    REQUIRE(cells.size() == 7);
    CHECK(cells[0] == "run" + std::to_string(i));
    const double wr = std::stod(cells[2]), ss = std::stod(cells[3]), ti = std::stod(cells[4]),
                 avg = std::stod(cells[5]);
    CHECK(std::abs(avg - (wr + ti - ss) / 3.0) <= 1e-6);
    CHECK(std::abs(wr - rows[i].scores.wr) <= 1e-6);
    CHECK(cells[6].empty() == !rows[i].bd.has_value());
    ++i;
  }
  CHECK(i == 40);
}

TEST_CASE("fixed formatting") {
  CHECK(format_fixed(1.5, 2) == "1.50");
  CHECK(format_fixed(-0.0000001, 3) == "0.000");
  CHECK(format_fixed(-1.25, 1) == "-1.2");
}
