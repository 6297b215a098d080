#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "seqrec/errors.hpp"
#include "seqrec/trainer.hpp"
#include "test_support.hpp"

using namespace seqrec;
using namespace seqrec::testing;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(ObjectiveMode mode = ObjectiveMode::kCcql) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = 16;
  c.hidden_size = 8;
  c.num_blocks = 1;
  c.max_len = 5;
  c.steps = 12;
  c.eval_every = 4;
  c.seeds = {1};
  c.negative_samples = 4;
  c.target_update_every = 3;
  return c;
}

const DatasetSplit& tiny_split() {
  static const DatasetSplit split = [] {
    SyntheticParams params;
    params.n_items = 20;
    params.n_sessions = 120;
    params.horizon = 6;
    params.seed = 4;
    const SyntheticDataset data = generate_synthetic(params);
    return split_sessions(data.events, params.n_items, {0.8, 0.1, 0.1}, 0, TransitionConfig{5, 0.2, 1.0});
  }();
  return split;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("seqrec_test_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TraceRow healthy_row(std::size_t step, double hr10) {
  TraceRow row;
  row.step = step;
  row.loss.total = 1.0;
  row.metrics.ks = {5, 10, 20};
  row.metrics.all.count = 10;
  row.metrics.all.hr = {hr10, hr10, hr10};
  row.metrics.all.ndcg = {0.1, 0.1, 0.1};
  row.metrics.reward = {0.0, 0.0, 0.0};
  row.metrics.q_abs_mean = 1.0;
  return row;
}

}  // namespace

TEST_CASE("objective mode names round trip") {
  for (auto mode : {ObjectiveMode::kSupervised, ObjectiveMode::kAc, ObjectiveMode::kCo, ObjectiveMode::kSnqn,
                    ObjectiveMode::kCcql})
    CHECK(parse_objective_mode(to_string(mode)) == mode);
  CHECK_THROWS_AS(parse_objective_mode("dqn"), ConfigError);
}

TEST_CASE("config guards") {
  TrainConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.eval_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.mode = ObjectiveMode::kAc;
  CHECK_NOTHROW(c.validate());
  c = tiny_config();
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(ObjectiveMode::kSnqn);
  c.negative_samples = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(train_seed(tiny_split(), [] {
    TrainConfig bad = tiny_config();
    bad.eval_every = 0;
    return bad;
  }(), 1), ConfigError);
}

TEST_CASE("mode gating keeps disabled terms at exactly zero") {
  const auto& data = tiny_split();
  struct Expect {
    ObjectiveMode mode;
    bool q, co, cql;
  };
  for (const Expect e : {Expect{ObjectiveMode::kSupervised, false, false, false}, Expect{ObjectiveMode::kAc, true, false, false},
                         Expect{ObjectiveMode::kCo, false, true, false}, Expect{ObjectiveMode::kSnqn, true, false, false},
                         Expect{ObjectiveMode::kCcql, true, true, true}}) {
    CAPTURE(to_string(e.mode));
    Trainer trainer(data.n_items, tiny_config(e.mode), 1, data.train);
    for (int s = 0; s < 5; ++s) {
      const StepResult r = trainer.train_step(trainer.next_batch(data.train));
      REQUIRE(r.applied);
      const LossBreakdown& b = r.losses;
      REQUIRE(b.ce > 0.0);
      REQUIRE((b.q != 0.0) == e.q);
      REQUIRE((b.contrastive != 0.0) == e.co);
      REQUIRE((b.cql != 0.0) == e.cql);
      const LossWeights& w = trainer.config().weights;
      REQUIRE(std::abs(b.total - (b.ce + w.omega * b.q + b.contrastive + w.alpha * b.cql)) < 1e-9);
    }
  }
  TrainConfig no_co = tiny_config();
  no_co.contrastive_loss = false;
  Trainer trainer(data.n_items, no_co, 1, data.train);
  const StepResult r = trainer.train_step(trainer.next_batch(data.train));
  CHECK(r.losses.contrastive == 0.0);
  CHECK(r.losses.cql > 0.0);
}

TEST_CASE("pad row stays zero and the step counter advances") {
  const auto& data = tiny_split();
  Trainer trainer(data.n_items, tiny_config(), 2, data.train);
  const std::size_t d = 8;
  for (int s = 1; s <= 6; ++s) {
    trainer.train_step(trainer.next_batch(data.train));
    CHECK(trainer.step() == static_cast<std::size_t>(s));
    const auto emb = trainer.model().item_embedding.data();
    for (std::size_t c = 0; c < d; ++c) REQUIRE(emb[data.n_items * d + c] == 0.0);
  }
}

TEST_CASE("target weights change only on scheduled steps") {
  const auto& data = tiny_split();
  TrainConfig c = tiny_config();
  c.target_update_every = 3;
  Trainer trainer(data.n_items, c, 3, data.train);
  std::uint64_t previous = weights_hash(trainer.target().weights());
  CHECK(previous == weights_hash(trainer.model()));
  for (int s = 1; s <= 10; ++s) {
    trainer.train_step(trainer.next_batch(data.train));
    const std::uint64_t now = weights_hash(trainer.target().weights());
    if (s % 3 == 0) {
      REQUIRE(now != previous);
      REQUIRE(now == weights_hash(trainer.model()));
    } else {
      REQUIRE(now == previous);
      REQUIRE(now != weights_hash(trainer.model()));
    }
    previous = now;
  }
}

TEST_CASE("non-finite losses skip the update") {
  const auto& data = tiny_split();
  Trainer trainer(data.n_items, tiny_config(ObjectiveMode::kAc), 4, data.train);
  for (double& v : trainer.mutable_model().q_bias.mutable_data()) v = std::nan("");
  const std::uint64_t before = weights_hash(trainer.model());
  const StepResult r = trainer.train_step(trainer.next_batch(data.train));
  CHECK_FALSE(r.applied);
  CHECK_FALSE(r.losses.finite());
  CHECK(weights_hash(trainer.model()) == before);
  CHECK(trainer.step() == 1);
}

TEST_CASE("first Adam step moves each weight by the learning rate") {
  CounterRng rng(5);
  EncoderConfig config;
  config.vocab_size = 5;
  config.hidden_size = 4;
  config.num_blocks = 1;
  config.max_len = 3;
  EncoderParams p = randomized_model(config, 6);
  const EncoderParams before = p.clone(false);
  Adam adam(p, 0.01);
  for (auto& nt : p.named()) {
    Tensor t = nt.tensor;
    auto g = t.mutable_grad();
    if (g.empty()) {
      // Leaves allocate gradients on first accumulation; give one via a tape.
      GradientTape tape;
      TapeScope scope(tape);
      tape.backward(weighted_sum(t, rng.next_u64()));
    }
  }
  adam.step(p);
  const auto after_named = p.named();
  const auto before_named = before.named();
  for (std::size_t i = 0; i < after_named.size(); ++i) {
    const auto a = after_named[i].tensor.data();
    const auto b = before_named[i].tensor.data();
    const auto g = after_named[i].tensor.grad();
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double expected = -0.01 * g[j] / (std::abs(g[j]) + 1e-8);
      REQUIRE(std::abs((a[j] - b[j]) - expected) < 1e-12);
    }
  }
}

TEST_CASE("epoch shuffle visits every transition once") {
  const auto& data = tiny_split();
  TrainConfig c = tiny_config();
  c.batch_size = 4;
  Trainer trainer(data.n_items, c, 6, data.train);
  std::vector<Transition> pool(data.train.begin(), data.train.begin() + 20);
  std::multiset<std::pair<std::int64_t, std::size_t>> seen;
  for (int b = 0; b < 5; ++b) {
    const auto batch = trainer.next_batch(pool);
    REQUIRE(batch.size() == 4);
    for (const auto& t : batch) seen.insert({t.session_id, t.state.size() * 100 + static_cast<std::size_t>(t.action)});
  }
  std::multiset<std::pair<std::int64_t, std::size_t>> all;
  for (const auto& t : pool) all.insert({t.session_id, t.state.size() * 100 + static_cast<std::size_t>(t.action)});
  CHECK(seen == all);
  c.batch_size = 50;
  Trainer wide(data.n_items, c, 6, data.train);
  CHECK(wide.next_batch(pool).size() == 20);
}

TEST_CASE("identical seeds give identical trace bytes") {
  const auto& data = tiny_split();
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const TrainConfig c = tiny_config();
  RunOptions oa, ob;
  oa.out_dir = a;
  ob.out_dir = b;
  train_seed(data, c, 7, oa);
  train_seed(data, c, 7, ob);
  CHECK(slurp(a / "seed7_trace.csv") == slurp(b / "seed7_trace.csv"));
  CHECK(slurp(a / "seed7_best.ckpt") == slurp(b / "seed7_best.ckpt"));
  RunOptions oc;
  oc.out_dir = scratch_dir("det_c");
  train_seed(data, c, 8, oc);
  CHECK(slurp(a / "seed7_trace.csv") != slurp(*oc.out_dir / "seed8_trace.csv"));
  for (const auto& dir : {a, b, *oc.out_dir}) fs::remove_all(dir);
}

TEST_CASE("trace structure and checkpoint selection") {
  const auto& data = tiny_split();
  TrainConfig c = tiny_config();
  c.top_checkpoints = 2;
  const SeedResult r = train_seed(data, c, 9);
  REQUIRE(r.trace.evals.size() == 3);
  CHECK(r.trace.step_losses.size() == 12);
  for (std::size_t i = 0; i < r.trace.evals.size(); ++i) CHECK(r.trace.evals[i].step == 4 * (i + 1));
  CHECK(r.top_test.size() == 2);
  double best = 0.0;
  for (const auto& row : r.trace.evals) best = std::max(best, row.metrics.hr_at(10, row.metrics.headline()));
  CHECK(r.best_validation_hr10 == best);
  CHECK_FALSE(r.trace.divergence_step.has_value());
}

TEST_CASE("zero steps leave an empty trace and the initial checkpoint") {
  const auto& data = tiny_split();
  TrainConfig c = tiny_config();
  c.steps = 0;
  const fs::path dir = scratch_dir("zero");
  RunOptions options;
  options.out_dir = dir;
  const SeedResult r = train_seed(data, c, 1, options);
  CHECK(r.trace.evals.empty());
  CHECK(r.trace.step_losses.empty());
  CHECK(fs::exists(dir / "seed1_best.ckpt"));
  CHECK(weights_hash(load_checkpoint(dir / "seed1_best.ckpt")) == weights_hash(r.best_model));
  const auto lines = slurp(dir / "seed1_trace.csv");
  CHECK(lines == std::string(kTraceHeader) + "\n");
  fs::remove_all(dir);
}

TEST_CASE("one trace and checkpoint per seed, parallel equals serial") {
  const auto& data = tiny_split();
  TrainConfig c = tiny_config();
  c.steps = 4;
  c.seeds = {1, 2, 3};
  const fs::path serial = scratch_dir("serial"), parallel = scratch_dir("parallel");
  RunOptions os, op;
  os.out_dir = serial;
  op.out_dir = parallel;
  op.max_parallel = 3;
  const auto rs = run_training(data, c, os);
  const auto rp = run_training(data, c, op);
  REQUIRE(rs.size() == 3);
  for (std::uint64_t s : c.seeds) {
    const std::string stem = "seed" + std::to_string(s);
    CHECK(fs::exists(serial / (stem + "_best.ckpt")));
    CHECK(slurp(serial / (stem + "_trace.csv")) == slurp(parallel / (stem + "_trace.csv")));
  }
  for (std::size_t i = 0; i < rs.size(); ++i) CHECK(rs[i].trace.seed == c.seeds[i]);
  fs::remove_all(serial);
  fs::remove_all(parallel);
}

TEST_CASE("divergence detection rules") {
  TrainingTrace healthy;
  for (std::size_t s = 1; s <= 10; ++s) healthy.evals.push_back(healthy_row(s * 10, 0.5));
  for (std::size_t s = 1; s <= 100; ++s) healthy.step_losses.push_back({s, LossBreakdown{1, 1, 1, 1, 3}});
  CHECK_FALSE(detect_divergence(healthy, 50.0).has_value());

  TrainingTrace nan_loss = healthy;
  nan_loss.step_losses[6].loss.q = std::nan("");
  CHECK(detect_divergence(nan_loss, 50.0) == std::optional<std::size_t>{7});

  TrainingTrace q_blowup = healthy;
  q_blowup.evals[4].metrics.q_abs_mean = 80.0;
  CHECK(detect_divergence(q_blowup, 50.0) == std::optional<std::size_t>{50});

  TrainingTrace drop = healthy;
  for (std::size_t i = 5; i < 8; ++i) drop.evals[i].metrics.all.hr = {0.1, 0.1, 0.1};
  CHECK(detect_divergence(drop, 50.0) == std::optional<std::size_t>{80});

  TrainingTrace blip = healthy;
  for (std::size_t i = 5; i < 7; ++i) blip.evals[i].metrics.all.hr = {0.1, 0.1, 0.1};
  CHECK_FALSE(detect_divergence(blip, 50.0).has_value());
}

TEST_CASE("records average element-wise") {
  TraceRow a = healthy_row(1, 0.2), b = healthy_row(1, 0.6);
  a.metrics.reward = {1, 2, 3};
  b.metrics.reward = {3, 4, 5};
  const std::vector<MetricsRecord> recs{a.metrics, b.metrics};
  const MetricsRecord m = average_records(recs);
  CHECK(m.all.hr[1] == doctest::Approx(0.4));
  CHECK(m.reward == std::vector<double>{2, 3, 4});
}

TEST_CASE("trace csv round trip") {
  const fs::path dir = scratch_dir("trace");
  TrainingTrace trace;
  trace.evals = {healthy_row(10, 0.25), healthy_row(20, 0.5)};
  trace.evals[1].diverged = true;
  write_trace_csv(trace, dir / "t.csv");
  std::ifstream in(dir / "t.csv");
  std::string header, row;
  std::getline(in, header);
  CHECK(header == "step,loss_total,loss_ce,loss_q,loss_co,loss_cql,hr5,ndcg5,hr10,ndcg10,hr20,ndcg20,reward20,q_mean_pos,"
                  "q_mean_neg,diverged");
  const TraceCurve curve = read_trace_curve(dir / "t.csv");
  CHECK(curve.steps == std::vector<double>{10, 20});
  CHECK(curve.hr10 == std::vector<double>{0.25, 0.5});
  std::ofstream(dir / "bad.csv") << header << "\n1,2,3\n";
  try {
    read_trace_curve(dir / "bad.csv");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("bad.csv") != std::string::npos);
  }
  fs::remove_all(dir);
}
