#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"

#include "ambs/checkpoint.hpp"
#include "ambs/config.hpp"
#include "ambs/corpus.hpp"
#include "ambs/error.hpp"
#include "ambs/experiments.hpp"
#include "support.hpp"

using namespace ambs;
using namespace ambs::testing;
namespace fs = std::filesystem;

namespace {

ExperimentConfig quick_config() {
  ExperimentConfig c;
  c.backbone = small_config();
  c.backbone.dropout_p = 0.0f;
  c.train_size = 16;
  c.test_size = 4;
  c.lm_epochs = 2;
  c.ref_epochs = 10;
  c.k = 8;
  c.d_hid = 16;
  c.epochs = 2;
  c.batch_size = 4;
  c.grad_accum = 1;
  c.max_new_tokens = 6;
  c.sweep_layers = {1, 2};
  c.sweep_alphas = {0.5f, 1.0f};
  return c;
}

struct Setup {
  ExperimentConfig cfg = quick_config();
  Corpus corpus = build_toy_corpus(cfg.seed, {cfg.train_size, cfg.test_size});
  BaseModel base = build_base_model(cfg, corpus);
};

const Setup& setup() {
  static const Setup s;
  return s;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ambs_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<float> components(const std::vector<SteeringBranch>& bs) {
  std::vector<float> out;
  for (const auto& b : bs) out.insert(out.end(), b.v.data().begin(), b.v.data().end());
  return out;
}

}  // namespace

TEST_CASE("config defaults validate and round-trip") {
  const ExperimentConfig d;
  CHECK_NOTHROW(d.validate());
  CHECK(d.resolved_layer() == d.backbone.n_layers);
  CHECK(d.resolved_data_dir() == "out/data");
  CHECK(ExperimentConfig::parse(d.serialize()) == d);
}

TEST_CASE("config round-trips under random edits") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    ExperimentConfig c;
    c.seed = rng();
    c.backbone.n_layers = random_int(rng, 1, 6);
    c.alpha = random_uniform({1}, rng, 0.01f, 10.0f)[0];
    c.lr = random_uniform({1}, rng, 1e-5f, 1.0f)[0];
    c.init_std = random_uniform({1}, rng, 0.0f, 1.0f)[0];
    c.policy_from_reference = random_int(rng, 0, 1);
    c.optimizer_mode = random_int(rng, 0, 1) ? OptimizerMode::alg1 : OptimizerMode::paper;
    c.axes.clear();
    for (Axis a : kAllAxes)
      if (random_int(rng, 0, 1)) c.axes.push_back(a);
    if (c.axes.empty()) c.axes.push_back(Axis::honesty);
    c.sweep_alphas = {random_uniform({1}, rng, 0.1f, 4.0f)[0], 3.0f};
    c.out_dir = "runs/t" + std::to_string(trial);
    CHECK(ExperimentConfig::parse(c.serialize()) == c);
  }
}

TEST_CASE("config parsing errors") {
  CHECK(ExperimentConfig::parse("# comment only\n\n  train.epochs = 7  # trailing\n").epochs == 7);
  auto message = [](const std::string& text) {
    try {
      ExperimentConfig::parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("train.epochs = 3\ntrain.bogus = 1\n").find("line 2") != std::string::npos);
  CHECK(message("train.epochs = three\n").find("line 1") != std::string::npos);
  CHECK(message("train.epochs\n").find("key = value") != std::string::npos);
  CHECK(message("steering.axes = helpfulness,kindness\n").find("kindness") != std::string::npos);
  CHECK(message("run.deterministic = maybe\n").find("true or false") != std::string::npos);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/ambs.cfg"), ConfigError);

  ExperimentConfig c;
  c.alpha = 0.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.inject_layer = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.sweep_alphas = {1.0f, -1.0f};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.axes.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("toy corpus") {
  const Corpus a = build_toy_corpus(5, {20, 6});
  const Corpus b = build_toy_corpus(5, {20, 6});
  const Corpus c = build_toy_corpus(6, {20, 6});
  bool differs = false;
  for (Axis ax : kAllAxes) {
    CHECK(a.train_of(ax).size() == 20);
    CHECK(a.test_of(ax).size() == 6);
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(record_to_json(a.train_of(ax)[i]) == record_to_json(b.train_of(ax)[i]));
      differs |= record_to_json(a.train_of(ax)[i]) != record_to_json(c.train_of(ax)[i]);
    }
  }
  CHECK(differs);
  CHECK_THROWS_AS(build_toy_corpus(1, {0, 1}), ConfigError);

  SUBCASE("answers agree with the judge") {
    for (Axis ax : kAllAxes)
      for (const auto* split : {&a.train_of(ax), &a.test_of(ax)})
        for (const auto& r : *split) {
          CHECK(r.axis == ax);
          CHECK(a.judge.is_truthful(r.instruction, r.response));
          CHECK_FALSE(a.judge.is_truthful(r.instruction, r.rejected));
          CHECK_FALSE(a.judge.is_unsafe(r.response));
          CHECK(a.judge.is_informative(r.response));
          CHECK(a.judge.compare(r.instruction, r.response, r.rejected) > 0);
          CHECK(r.response.back() == '\n');
          CHECK(r.instruction.back() == '>');
          if (ax == Axis::harmlessness) CHECK(a.judge.is_unsafe(r.rejected));
        }
  }
  SUBCASE("templates") {
    const auto& h = a.train_of(Axis::helpfulness)[0];
    const std::string w = h.instruction.substr(5, h.instruction.size() - 6);
    std::string up = w;
    for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    CHECK(h.instruction.rfind("echo ", 0) == 0);
    CHECK(h.response == up + "\n");
    CHECK(h.rejected == "no\n");
    const auto& f = a.train_of(Axis::harmlessness)[0];
    CHECK(f.instruction.rfind("fix ", 0) == 0);
    CHECK(f.response.rfind("MEND ", 0) == 0);
    CHECK(f.rejected.rfind("burn ", 0) == 0);
    CHECK(a.train_of(Axis::honesty)[0].instruction.rfind("key ", 0) == 0);
  }
}

TEST_CASE("corpus files round-trip") {
  const fs::path dir = scratch_dir("corpus");
  const Corpus a = build_toy_corpus(9, {5, 2});
  write_corpus(a, dir.string());
  for (Axis ax : kAllAxes) {
    CHECK(fs::exists(dir / (std::string(axis_name(ax)) + "_train.jsonl")));
    CHECK(fs::exists(dir / (std::string(axis_name(ax)) + "_test.jsonl")));
  }
  const Corpus b = load_corpus(dir.string());
  for (Axis ax : kAllAxes)
    for (std::size_t i = 0; i < 5; ++i) CHECK(record_to_json(b.train_of(ax)[i]) == record_to_json(a.train_of(ax)[i]));
  CHECK(b.judge.to_json_text() == a.judge.to_json_text());

  // A record filed under the wrong axis is rejected.
  fs::copy_file(dir / "honesty_test.jsonl", dir / "helpfulness_test.jsonl", fs::copy_options::overwrite_existing);
  CHECK_THROWS_AS(load_corpus(dir.string()), DataError);
  CHECK_THROWS_AS(load_corpus((dir / "missing").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("JSONL errors name the line") {
  const std::string good = R"({"axis":"honesty","instruction":"key a>","response":"B\n","labels":{"truthful":true}})";
  CHECK(parse_corpus_jsonl(good + "\n\n" + good + "\n", "x.jsonl").size() == 2);
  auto message = [](const std::string& text) {
    try {
      parse_corpus_jsonl(text, "x.jsonl");
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(good + "\n" + good + "\n{broken\n").find("x.jsonl:3") != std::string::npos);
  CHECK(message(R"({"axis":"honesty","response":"B","labels":{"truthful":true}})").find("x.jsonl:1") !=
        std::string::npos);
  CHECK(message(R"({"axis":"honesty","instruction":"a","response":"B"})").find("missing labels") !=
        std::string::npos);
  CHECK(message(R"({"axis":"honesty","instruction":"a","response":"B","labels":{"safe":true}})")
            .find("truthful") != std::string::npos);
  CHECK(message(good + "\n" + R"({"axis":"kindness","instruction":"a","response":"B","labels":{}})")
            .find("x.jsonl:2") != std::string::npos);
  CHECK(message("[1,2]").find("not an object") != std::string::npos);
}

TEST_CASE("checkpoint container") {
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({7}, rng), c = Tensor::vector({42.0f});
  const std::string bytes = encode_checkpoint({{"a", &a}, {"b.vec", &b}, {"c", &c}});

  SUBCASE("layout") {
    CHECK(bytes.compare(0, 8, "AMBSCKPT") == 0);
    std::uint32_t version = 0, count = 0;
    std::memcpy(&version, bytes.data() + 8, 4);
    std::memcpy(&count, bytes.data() + 12, 4);
    CHECK(version == kCheckpointVersion);
    CHECK(count == 3);
    // The payload is the last 4·(12 + 7 + 1) bytes, in manifest order.
    float first = 0.0f, last = 0.0f;
    std::memcpy(&first, bytes.data() + bytes.size() - 4 * 20, 4);
    std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
    CHECK(first == a[0]);
    CHECK(last == 42.0f);
  }
  SUBCASE("round trip") {
    const TensorMap m = decode_checkpoint(bytes);
    CHECK(m.size() == 3);
    CHECK(m.at("a") == a);
    CHECK(m.at("b.vec") == b);
    CHECK(m.at("c") == c);
    CHECK(encode_checkpoint({{"a", &m.at("a")}, {"b.vec", &m.at("b.vec")}, {"c", &m.at("c")}}) == bytes);
    Tensor dst({3, 4});
    take_tensor(m, "a", dst);
    CHECK(dst == a);
    Tensor wrong({4, 3});
    CHECK_THROWS_AS(take_tensor(m, "a", wrong), DimensionError);
    CHECK_THROWS_AS(take_tensor(m, "zzz", wrong), DataError);
  }
  SUBCASE("corruption") {
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), DataError);
    bad = bytes;
    bad[8] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bad), DataError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 10)), DataError);
    CHECK_THROWS_AS(encode_checkpoint({{"a", &a}, {"a", &b}}), ContractError);
  }
  SUBCASE("files") {
    const fs::path dir = scratch_dir("ckpt");
    save_checkpoint((dir / "x.ckpt").string(), {{"a", &a}});
    CHECK(load_checkpoint((dir / "x.ckpt").string()).at("a") == a);
    CHECK_THROWS_AS(load_checkpoint((dir / "none.ckpt").string()), IoError);
    fs::remove_all(dir);
  }
}

TEST_CASE("base model") {
  const Setup& s = setup();
  CHECK(s.base.lm_loss.size() == 2);
  CHECK(s.base.lm_loss.back() < s.base.lm_loss.front());
  CHECK(s.base.f_phi.frozen);
  CHECK(s.base.anchors.size() == 3);
  CHECK(std::isfinite(s.base.ref_loss));

  // Checkpoint round trip reproduces every tensor.
  const BaseModel back = BaseModel::from_tensors(decode_checkpoint(encode_checkpoint(s.base.tensors())), s.cfg);
  CHECK(back.backbone.token_emb == s.base.backbone.token_emb);
  CHECK(back.head.w_o == s.base.head.w_o);
  CHECK(back.f_phi.checksum() == s.base.f_phi.checksum());
  CHECK(back.f_phi.frozen);
  for (int i = 0; i < 3; ++i) CHECK(back.anchors[i] == s.base.anchors[i]);

  // Building twice from the same seed gives the same model.
  const BaseModel again = build_base_model(s.cfg, s.corpus);
  CHECK(again.backbone.layers[1].w2 == s.base.backbone.layers[1].w2);
  CHECK(again.f_phi.checksum() == s.base.f_phi.checksum());
}

TEST_CASE("training runs") {
  const Setup& s = setup();
  CHECK(training_samples(s.corpus, {Axis::honesty, Axis::helpfulness}).size() == 32);

  SUBCASE("zero epochs leave the initial vectors") {
    ExperimentConfig cfg = s.cfg;
    cfg.epochs = 0;
    const TrainingRun r = run_training(cfg, s.corpus, s.base);
    CHECK(r.report.epochs.empty());
    CHECK(components(r.model.branches) ==
          components(init_steered(cfg, s.base, cfg.resolved_layer(), cfg.init_std).branches));
  }
  SUBCASE("epoch hooks and learning-rate decay") {
    const TrainingRun r = run_training(s.cfg, s.corpus, s.base);
    CHECK(r.report.epochs.size() == 2);
    CHECK(r.epoch_scores.size() == 2);
    CHECK(r.epoch_bd.size() == 2);
    CHECK(r.report.step_lr.front() == doctest::Approx(s.cfg.lr));
    for (std::size_t i = 1; i < r.report.step_lr.size(); ++i) CHECK(r.report.step_lr[i] < r.report.step_lr[i - 1]);
    CHECK(r.epoch_scores[0].counts.samples == 3 * s.cfg.test_size);
  }
  SUBCASE("resume from a saved state matches a straight run") {
    const fs::path dir = scratch_dir("resume");
    TrainingOptions straight_opt;
    straight_opt.epoch_metrics = false;
    const TrainingRun straight = run_training(s.cfg, s.corpus, s.base, straight_opt);

    TrainingOptions first;
    first.epoch_metrics = false;
    first.stop_after_epoch = 1;
    first.save_to = (dir / "state.ckpt").string();
    const TrainingRun half = run_training(s.cfg, s.corpus, s.base, first);
    CHECK(half.report.epochs.size() == 1);

    TrainingOptions second;
    second.epoch_metrics = false;
    second.resume_from = first.save_to;
    const TrainingRun rest = run_training(s.cfg, s.corpus, s.base, second);
    CHECK(rest.report.epochs.size() == 1);
    CHECK(rest.report.epochs[0].epoch == 2);
    CHECK(components(rest.model.branches) == components(straight.model.branches));
    CHECK(rest.model.f_theta.checksum() == straight.model.f_theta.checksum());
    fs::remove_all(dir);
  }
}

TEST_CASE("evaluation and grids") {
  const Setup& s = setup();
  TrainingOptions opt;
  opt.epoch_metrics = false;
  const TrainingRun run = run_training(s.cfg, s.corpus, s.base, opt);
  const SteeredModel& m = run.model;

  const AlignmentScores base_scores = evaluate_base(s.corpus, s.base, s.cfg.max_new_tokens);
  CHECK(base_scores.counts.samples == 3 * s.cfg.test_size);
  const AlignmentScores full = evaluate_full(s.corpus, m.branches, s.base, s.cfg.max_new_tokens);
  CHECK(full.counts.samples == 3 * s.cfg.test_size);
  CHECK(full.avg == doctest::Approx(avg_score(full.wr, full.ss, full.ti)));

  SUBCASE("per-axis counts add up to the full evaluation") {
    ScoreCounts sum;
    for (const auto& b : m.branches) {
      const ScoreCounts c = count_records(s.corpus.test_of(b.axis), &b, s.base, s.corpus.judge, s.cfg.max_new_tokens);
      sum.wins += c.wins;
      sum.unsafe += c.unsafe;
      sum.truthful += c.truthful;
      sum.informative += c.informative;
      sum.samples += c.samples;
    }
    CHECK(sum.samples == full.counts.samples);
    CHECK(sum.wins == full.counts.wins);
    CHECK(sum.unsafe == full.counts.unsafe);
  }
  SUBCASE("cross-axis losses") {
    const auto loss = cross_axis_losses(s.corpus, m, s.base);
    REQUIRE(loss.size() == 3);
    for (const auto& row : loss) {
      REQUIRE(row.size() == 3);
      for (double l : row) {
        CHECK(l >= 0.0);
        CHECK(l <= 2.0);
      }
    }
  }
  SUBCASE("divergence") {
    const double bd = evaluate_bd(s.corpus, m.branches, s.base);
    CHECK(bd >= 0.0);
    CHECK(bd <= 2.0);
    const auto states = branch_states(TokenSequence::from_text("echo abc>"), m.branches, s.base.backbone);
    CHECK(states.size() == 3);
    for (const auto& h : states) CHECK(h.layer_index == s.cfg.backbone.n_layers);
  }
  SUBCASE("implicit mixing grid scores each vector on the other axes") {
    const auto rows = run_mixing_grid(s.cfg, s.corpus, s.base, m, MixingMode::implicit);
    CHECK(rows.size() == 6);
    CHECK(rows[0].run_id == "implicit:helpfulness");
    CHECK(rows[0].axis == "harmlessness");
    CHECK(rows[1].axis == "honesty");
    for (const auto& r : rows) CHECK(r.run_id != "implicit:" + r.axis);
  }
  SUBCASE("explicit mixing grid") {
    const auto rows = run_mixing_grid(s.cfg, s.corpus, s.base, m, MixingMode::explicit_);
    CHECK(rows.size() == 7);
    CHECK(rows.front().run_id == "explicit:base");
    CHECK(rows.back().run_id == "explicit:full");
    CHECK(rows.back().axis == "all");
    CHECK(rows.back().bd.has_value());
    CHECK(rows.back().scores.counts.wins == full.counts.wins);
  }
  SUBCASE("magnitude sweep with a null row") {
    const auto rows = run_magnitude_sweep(s.cfg, s.corpus, s.base, m, s.cfg.sweep_alphas, true);
    CHECK(rows.size() == 4 * 3);
    CHECK(rows[0].run_id == "alpha=0");
    CHECK(rows[0].axis == "all");
    // α = 0 is exactly the unsteered model.
    CHECK(rows[0].scores.counts.wins == base_scores.counts.wins);
    CHECK(rows[0].scores.counts.unsafe == base_scores.counts.unsafe);
    CHECK(rows[0].scores.counts.truthful == base_scores.counts.truthful);
    CHECK(rows[0].scores.counts.informative == base_scores.counts.informative);
    CHECK(rows[0].scores.avg == doctest::Approx(base_scores.avg));
    CHECK_THROWS_AS(run_magnitude_sweep(s.cfg, s.corpus, s.base, m, {1.0f, -0.5f}), ConfigError);
  }
}

TEST_CASE("sweeps and ablations produce one row per setting") {
  const Setup& s = setup();
  ExperimentConfig cfg = s.cfg;
  cfg.epochs = 1;
  const auto layers = run_layer_sweep(cfg, s.corpus, s.base, {1, 2});
  REQUIRE(layers.size() == 2);
  CHECK(layers[0].run_id == "layer=1");
  CHECK(layers[1].run_id == "layer=2");
  const auto abl = run_ablations(cfg, s.corpus, s.base);
  REQUIRE(abl.size() == 3);
  CHECK(abl[0].run_id == "full");
  CHECK(abl[1].run_id == "no_policy_ref");
  CHECK(abl[2].run_id == "random_init");
  const DivergenceComparison dc = compare_divergence(cfg, s.corpus, s.base);
  CHECK(std::isfinite(dc.joint_bd));
  CHECK(std::isfinite(dc.independent_bd));
}
