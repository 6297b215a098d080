#include "seqrec/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

constexpr int kTraceCutoffs[] = {5, 10, 20};

// Stream ids for the per-seed generators.
enum Stream : std::uint64_t { kInit = 1, kBatches, kDropout, kNegatives, kAugment, kEval };

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

LossBreakdown mean_losses(std::span<const StepLoss> window) {
  LossBreakdown out;
  if (window.empty()) return out;
  for (const auto& s : window) {
    out.ce += s.loss.ce;
    out.q += s.loss.q;
    out.contrastive += s.loss.contrastive;
    out.cql += s.loss.cql;
    out.total += s.loss.total;
  }
  const auto n = static_cast<double>(window.size());
  out.ce /= n;
  out.q /= n;
  out.contrastive /= n;
  out.cql /= n;
  out.total /= n;
  return out;
}

}  // namespace

ObjectiveMode parse_objective_mode(const std::string& name) {
  if (name == "supervised") return ObjectiveMode::kSupervised;
  if (name == "ac") return ObjectiveMode::kAc;
  if (name == "co") return ObjectiveMode::kCo;
  if (name == "snqn") return ObjectiveMode::kSnqn;
  if (name == "ccql") return ObjectiveMode::kCcql;
  throw ConfigError("unknown objective_mode '" + name + "' (expected supervised, ac, co, snqn or ccql)");
}

std::string to_string(ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::kSupervised: return "supervised";
    case ObjectiveMode::kAc: return "ac";
    case ObjectiveMode::kCo: return "co";
    case ObjectiveMode::kSnqn: return "snqn";
    case ObjectiveMode::kCcql: return "ccql";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (uses_contrastive() && batch_size < 2) throw ConfigError("batch_size must be at least 2 with a contrastive term");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (uses_negatives() && negative_samples < 1) throw ConfigError("negative_samples must be positive");
  if (target_update_every < 1) throw ConfigError("target_update_every must be positive");
  if (!(divergence_q_threshold > 0.0)) throw ConfigError("divergence_q_threshold must be positive");
  if (!std::isfinite(negative_reward)) throw ConfigError("negative_reward must be finite");
  if (top_checkpoints < 1) throw ConfigError("top_checkpoints must be positive");
  weights.validate();
  augmentation.validate();
  encoder_config(1).validate();
}

EncoderConfig TrainConfig::encoder_config(std::size_t n_items) const {
  EncoderConfig c;
  c.vocab_size = static_cast<int>(n_items);
  c.hidden_size = hidden_size;
  c.num_blocks = num_blocks;
  c.num_heads = num_heads;
  c.max_len = max_len;
  c.dropout = dropout;
  return c;
}

TransitionConfig TrainConfig::transition_config() const {
  return TransitionConfig{static_cast<std::size_t>(max_len), r_click, r_buy};
}

Adam::Adam(const EncoderParams& params, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& nt : params.named()) {
    m_.emplace_back(nt.tensor.numel(), 0.0);
    v_.emplace_back(nt.tensor.numel(), 0.0);
  }
}

void Adam::step(EncoderParams& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto named = params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor& p = named[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

Trainer::Trainer(std::size_t n_items, const TrainConfig& config, std::uint64_t seed,
                 std::span<const Transition> train_data)
    : config_(config),
      model_(EncoderParams::init(config.encoder_config(n_items), CounterRng(seed).fork(kInit).next_u64())),
      target_(model_),
      adam_(model_, config.learning_rate),
      sampler_(n_items, static_cast<std::size_t>(std::max(config.negative_samples, 0))),
      batch_rng_(CounterRng(seed).fork(kBatches)),
      dropout_rng_(CounterRng(seed).fork(kDropout)),
      negative_rng_(CounterRng(seed).fork(kNegatives)),
      augment_rng_(CounterRng(seed ^ config.augmentation.seed).fork(kAugment)) {
  config_.validate();
  if (config_.popularity_negatives) {
    std::vector<double> counts(n_items, 0.0);
    for (const auto& tr : train_data) counts[static_cast<std::size_t>(tr.action)] += 1.0;
    sampler_.use_popularity(counts);
  }
}

std::vector<Transition> Trainer::next_batch(std::span<const Transition> data) {
  if (data.empty()) throw ContractError("next_batch: no training transitions");
  const std::size_t B = std::min(static_cast<std::size_t>(config_.batch_size), data.size());
  if (order_.size() != data.size()) {
    order_.resize(data.size());
    cursor_ = data.size();
  }
  if (cursor_ + B > order_.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[batch_rng_.below(i)]);
    cursor_ = 0;
  }
  std::vector<Transition> batch;
  batch.reserve(B);
  for (std::size_t i = 0; i < B; ++i) batch.push_back(data[order_[cursor_ + i]]);
  cursor_ += B;
  return batch;
}

StepResult Trainer::train_step(std::span<const Transition> batch) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  ++step_;
  const std::size_t B = batch.size();
  const auto L = static_cast<std::size_t>(config_.max_len);
  const ItemId pad = model_.config.pad_id();

  std::vector<std::vector<ItemId>> states, next_states;
  std::vector<ItemId> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> done;
  states.reserve(B);
  for (const auto& tr : batch) {
    states.push_back(tr.state);
    next_states.push_back(tr.next_state);
    actions.push_back(tr.action);
    rewards.push_back(tr.reward);
    done.push_back(tr.done ? 1 : 0);
  }

  StepResult result;
  GradientTape tape;
  TapeScope scope(tape);
  const EncodeOptions train{true, &dropout_rng_};
  try {
    const Tensor s = encode(model_, SequenceBatch::from_sequences(states, L, pad), train);
    LossParts parts;
    parts.ce = cross_entropy(logits(model_, s), actions);
    if (config_.uses_q()) {
      const Tensor q = q_values(model_, s);
      const EncoderParams& frozen = target_.weights();
      const Tensor q_next = q_values(frozen, encode(frozen, SequenceBatch::from_sequences(next_states, L, pad)));
      std::vector<std::vector<ItemId>> negatives;
      if (config_.uses_negatives()) {
        negatives.reserve(B);
        for (const auto& tr : batch) {
          std::span<const ItemId> seen;
          if (tr.session_items) seen = *tr.session_items;
          negatives.push_back(sampler_.sample(seen, negative_rng_));
        }
      }
      if (config_.mode == ObjectiveMode::kSnqn) {
        parts.q = snqn_negative_td(q, actions, negatives, config_.negative_reward, rewards, q_next, done,
                                   config_.weights.gamma);
      } else {
        parts.q = td_q_loss(q, actions, rewards, q_next, done, config_.weights.gamma);
      }
      if (config_.mode == ObjectiveMode::kCcql) {
        parts.cql = cql_penalty(q, actions, negatives, config_.weights.cql_temperature);
      }
    }
    if (config_.uses_contrastive()) {
      const ViewPair views = make_views(states, config_.augmentation, augment_rng_, pad);
      const Tensor a = encode(model_, SequenceBatch::from_sequences(views.first, L, pad), train);
      const Tensor b = encode(model_, SequenceBatch::from_sequences(views.second, L, pad), train);
      parts.contrastive = info_nce(a, b, config_.weights.contrastive_temperature);
    }
    const CombinedLoss loss = combined_loss(parts, config_.weights);
    result.losses = loss.breakdown;
    if (loss.breakdown.finite()) {
      tape.backward(loss.total);
      adam_.step(model_);
      result.applied = true;
    }
  } catch (const NumericError&) {
    const double nan = std::nan("");
    result.losses = LossBreakdown{nan, nan, nan, nan, nan};
  }
  tape.clear();
  model_.zero_grad();
  if (result.applied) model_.zero_pad_row();
  if (step_ % static_cast<std::size_t>(config_.target_update_every) == 0) hard_update_target(model_, target_);
  return result;
}

std::optional<std::size_t> detect_divergence(const TrainingTrace& trace, double q_threshold) {
  std::optional<std::size_t> flag;
  auto consider = [&flag](std::size_t step) {
    if (!flag || step < *flag) flag = step;
  };
  for (const auto& s : trace.step_losses) {
    if (!s.loss.finite()) {
      consider(s.step);
      break;
    }
  }
  double running_max = 0.0;
  int below = 0;
  for (const auto& row : trace.evals) {
    if (!row.loss.finite()) consider(row.step);
    if (!(row.metrics.q_abs_mean <= q_threshold)) consider(row.step);
    const double hr10 = row.metrics.hr_at(10, row.metrics.headline());
    if (running_max > 0.0 && hr10 < 0.5 * running_max) {
      if (++below == 3) consider(row.step);
    } else {
      below = 0;
    }
    running_max = std::max(running_max, hr10);
    if (flag && *flag <= row.step) break;
  }
  return flag;
}

MetricsRecord average_records(std::span<const MetricsRecord> records) {
  if (records.empty()) throw ContractError("average_records: nothing to average");
  MetricsRecord out = records.front();
  const auto n = static_cast<double>(records.size());
  auto avg_slice = [&](SliceMetrics MetricsRecord::*slice) {
    SliceMetrics& dst = out.*slice;
    std::fill(dst.hr.begin(), dst.hr.end(), 0.0);
    std::fill(dst.ndcg.begin(), dst.ndcg.end(), 0.0);
    for (const auto& r : records) {
      for (std::size_t j = 0; j < dst.hr.size(); ++j) {
        dst.hr[j] += (r.*slice).hr[j] / n;
        dst.ndcg[j] += (r.*slice).ndcg[j] / n;
      }
    }
  };
  avg_slice(&MetricsRecord::all);
  avg_slice(&MetricsRecord::purchase);
  avg_slice(&MetricsRecord::click);
  std::fill(out.reward.begin(), out.reward.end(), 0.0);
  out.q_mean_pos = out.q_mean_neg = out.q_std_pos = out.q_std_neg = out.q_abs_mean = 0.0;
  for (const auto& r : records) {
    for (std::size_t j = 0; j < out.reward.size(); ++j) out.reward[j] += r.reward[j] / n;
    out.q_mean_pos += r.q_mean_pos / n;
    out.q_mean_neg += r.q_mean_neg / n;
    out.q_std_pos += r.q_std_pos / n;
    out.q_std_neg += r.q_std_neg / n;
    out.q_abs_mean += r.q_abs_mean / n;
  }
  return out;
}

const char* const kTraceHeader =
    "step,loss_total,loss_ce,loss_q,loss_co,loss_cql,hr5,ndcg5,hr10,ndcg10,hr20,ndcg20,reward20,q_mean_pos,"
    "q_mean_neg,diverged";

std::string trace_row_csv(const TraceRow& row) {
  const MetricsRecord& m = row.metrics;
  const SliceMetrics& h = m.headline();
  std::ostringstream os;
  os << row.step << ',' << fmt(row.loss.total) << ',' << fmt(row.loss.ce) << ',' << fmt(row.loss.q) << ','
     << fmt(row.loss.contrastive) << ',' << fmt(row.loss.cql);
  for (int k : kTraceCutoffs) os << ',' << fmt(m.hr_at(k, h)) << ',' << fmt(m.ndcg_at(k, h));
  os << ',' << fmt(m.reward_at(20)) << ',' << fmt(m.q_mean_pos) << ',' << fmt(m.q_mean_neg) << ','
     << (row.diverged ? 1 : 0);
  return os.str();
}

void write_trace_csv(const TrainingTrace& trace, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write trace: " + path.string());
  os << kTraceHeader << '\n';
  for (const auto& row : trace.evals) os << trace_row_csv(row) << '\n';
  if (!os) throw IoError("failed writing trace: " + path.string());
}

TraceCurve read_trace_curve(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open trace: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kTraceHeader) {
    throw ParseError(1, path.string() + ": missing or unexpected trace header");
  }
  TraceCurve curve;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 16) {
      throw ParseError(line_no, path.string() + ": truncated trace row (" + std::to_string(fields.size()) + " fields)");
    }
    try {
      curve.steps.push_back(std::stod(fields[0]));
      curve.hr10.push_back(std::stod(fields[8]));
    } catch (const std::exception&) {
      throw ParseError(line_no, path.string() + ": non-numeric trace field");
    }
  }
  if (curve.steps.empty()) throw ParseError(line_no, path.string() + ": trace has no rows");
  return curve;
}

SeedResult train_seed(const DatasetSplit& data, const TrainConfig& config, std::uint64_t seed,
                      const RunOptions& options) {
  config.validate();
  Trainer trainer(data.n_items, config, seed, data.train);
  SeedResult result;
  result.trace.seed = seed;
  result.best_model = trainer.model().clone(false);
  std::optional<std::filesystem::path> ckpt;
  if (options.out_dir) {
    ckpt = *options.out_dir / ("seed" + std::to_string(seed) + "_best.ckpt");
    save_checkpoint(trainer.model(), *ckpt);
  }
  const EvalOptions eval_opts{config.rank_by_q, 256, config.eval_negatives, CounterRng(seed).fork(kEval).next_u64()};
  struct Kept {
    double hr10;
    std::size_t step;
    MetricsRecord test;
  };
  std::vector<Kept> kept;
  double best = -1.0;
  std::size_t window_start = 0;

  for (int s = 1; s <= config.steps; ++s) {
    const auto batch = trainer.next_batch(data.train);
    const StepResult step = trainer.train_step(batch);
    result.trace.step_losses.push_back({trainer.step(), step.losses});
    if (s % config.eval_every != 0) continue;

    TraceRow row;
    row.step = trainer.step();
    row.loss = mean_losses(std::span(result.trace.step_losses).subspan(window_start));
    window_start = result.trace.step_losses.size();
    row.metrics = evaluate(trainer.model(), data.validation, kTraceCutoffs, eval_opts);
    result.trace.evals.push_back(row);
    result.trace.divergence_step = detect_divergence(result.trace, config.divergence_q_threshold);
    result.trace.evals.back().diverged = result.trace.divergence_step.has_value();

    const double hr10 = row.metrics.hr_at(10, row.metrics.headline());
    if (hr10 > best) {
      best = hr10;
      result.best_validation_hr10 = hr10;
      result.best_step = row.step;
      result.best_model = trainer.model().clone(false);
      if (ckpt) save_checkpoint(trainer.model(), *ckpt);
    }
    if (!data.test.empty()) {
      const bool room = kept.size() < config.top_checkpoints;
      const auto worst = std::min_element(kept.begin(), kept.end(),
                                          [](const Kept& a, const Kept& b) { return a.hr10 < b.hr10; });
      if (room || hr10 > worst->hr10) {
        Kept entry{hr10, row.step, evaluate(trainer.model(), data.test, kTraceCutoffs, eval_opts)};
        if (room) {
          kept.push_back(std::move(entry));
        } else {
          *worst = std::move(entry);
        }
      }
    }
    if (options.log) {
      std::ostringstream os;
      os << "seed " << seed << " step " << row.step << " loss " << fmt(row.loss.total) << " hr10 " << fmt(hr10)
         << " |q| " << fmt(row.metrics.q_abs_mean);
      options.log(os.str());
    }
  }
  std::sort(kept.begin(), kept.end(), [](const Kept& a, const Kept& b) { return a.step < b.step; });
  for (auto& k : kept) result.top_test.push_back(std::move(k.test));
  if (options.out_dir) {
    write_trace_csv(result.trace, *options.out_dir / ("seed" + std::to_string(seed) + "_trace.csv"));
  }
  return result;
}

std::vector<SeedResult> run_training(const DatasetSplit& data, const TrainConfig& config, const RunOptions& options) {
  config.validate();
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
  std::vector<SeedResult> results(config.seeds.size());
  const std::size_t workers = std::clamp<std::size_t>(options.max_parallel, 1, config.seeds.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) results[i] = train_seed(data, config, config.seeds[i], options);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  RunOptions shared = options;
  std::mutex log_mutex;
  if (options.log) {
    shared.log = [&](const std::string& msg) {
      std::lock_guard<std::mutex> lock(log_mutex);
      options.log(msg);
    };
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
        try {
          results[i] = train_seed(data, config, config.seeds[i], shared);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return results;
}

}  // namespace seqrec
