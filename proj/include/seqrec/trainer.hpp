#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqrec/augmentation.hpp"
#include "seqrec/data.hpp"
#include "seqrec/encoder.hpp"
#include "seqrec/eval.hpp"
#include "seqrec/objectives.hpp"
#include "seqrec/sampler.hpp"

namespace seqrec {

// supervised: CE. ac: CE + TD. co: CE + InfoNCE. snqn: CE + TD with negative
// actions. ccql: CE + TD + InfoNCE + conservative penalty.
enum class ObjectiveMode { kSupervised, kAc, kCo, kSnqn, kCcql };

ObjectiveMode parse_objective_mode(const std::string& name);
std::string to_string(ObjectiveMode mode);

struct TrainConfig {
  int batch_size = 256;
  double learning_rate = 0.001;
  int steps = 2000;
  int eval_every = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  ObjectiveMode mode = ObjectiveMode::kCcql;
  LossWeights weights;
  int negative_samples = 10;
  double negative_reward = -1.0;
  int target_update_every = 500;
  double divergence_q_threshold = 50.0;
  AugmentationSpec augmentation;
  bool contrastive_loss = true;  // ccql only; co always keeps its InfoNCE term
  bool popularity_negatives = false;
  bool rank_by_q = false;

  int hidden_size = 64;
  int num_blocks = 2;
  int num_heads = 1;
  int max_len = 10;
  double dropout = 0.1;
  double r_click = 0.2;
  double r_buy = 1.0;

  std::size_t top_checkpoints = 5;
  std::size_t eval_negatives = 10;

  void validate() const;
  EncoderConfig encoder_config(std::size_t n_items) const;
  TransitionConfig transition_config() const;

  bool uses_q() const { return mode == ObjectiveMode::kAc || mode == ObjectiveMode::kSnqn || mode == ObjectiveMode::kCcql; }
  bool uses_negatives() const { return mode == ObjectiveMode::kSnqn || mode == ObjectiveMode::kCcql; }
  bool uses_contrastive() const {
    return mode == ObjectiveMode::kCo || (mode == ObjectiveMode::kCcql && contrastive_loss);
  }
};

class Adam {
 public:
  Adam(const EncoderParams& params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Applies one update from the gradients currently held by `params`.
  void step(EncoderParams& params);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepResult {
  LossBreakdown losses;
  bool applied = false;  // false when a component was non-finite
};

/// Owns the model, target copy, optimizer and every random stream of one seed.
class Trainer {
 public:
  Trainer(std::size_t n_items, const TrainConfig& config, std::uint64_t seed,
          std::span<const Transition> train_data = {});

  // One optimizer update on `batch`; the step counter advances either way.
  StepResult train_step(std::span<const Transition> batch);

  // Next training batch from an epoch-wise shuffle of `data`.
  std::vector<Transition> next_batch(std::span<const Transition> data);

  const EncoderParams& model() const { return model_; }
  EncoderParams& mutable_model() { return model_; }
  const TargetParams& target() const { return target_; }
  std::size_t step() const { return step_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  EncoderParams model_;
  TargetParams target_;
  Adam adam_;
  NegativeSampler sampler_;
  CounterRng batch_rng_, dropout_rng_, negative_rng_, augment_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
};

struct StepLoss {
  std::size_t step = 0;
  LossBreakdown loss;
};

struct TraceRow {
  std::size_t step = 0;
  LossBreakdown loss;  // mean over the steps since the previous evaluation
  MetricsRecord metrics;
  bool diverged = false;
};

struct TrainingTrace {
  std::uint64_t seed = 0;
  std::vector<TraceRow> evals;
  std::vector<StepLoss> step_losses;
  std::optional<std::size_t> divergence_step;
};

/// First step showing divergence: a non-finite loss, an evaluation whose mean
/// |Q| exceeds `q_threshold`, or the third of three consecutive evaluations
/// whose headline HR@10 sits below half its running maximum.
std::optional<std::size_t> detect_divergence(const TrainingTrace& trace, double q_threshold);

struct SeedResult {
  TrainingTrace trace;
  std::vector<MetricsRecord> top_test;  // test metrics at the best validation evaluations
  double best_validation_hr10 = 0.0;
  std::size_t best_step = 0;
  EncoderParams best_model;
};

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // traces and checkpoints when set
  std::size_t max_parallel = 1;
  std::function<void(const std::string&)> log;
};

SeedResult train_seed(const DatasetSplit& data, const TrainConfig& config, std::uint64_t seed,
                      const RunOptions& options = {});

std::vector<SeedResult> run_training(const DatasetSplit& data, const TrainConfig& config,
                                     const RunOptions& options = {});

// Element-wise mean of records that share cutoffs.
MetricsRecord average_records(std::span<const MetricsRecord> records);

extern const char* const kTraceHeader;
std::string trace_row_csv(const TraceRow& row);
void write_trace_csv(const TrainingTrace& trace, const std::filesystem::path& path);

struct TraceCurve {
  std::vector<double> steps;
  std::vector<double> hr10;
};

// Reads the step and hr10 columns; throws ParseError naming the file on malformed rows.
TraceCurve read_trace_curve(const std::filesystem::path& path);

}  // namespace seqrec
