#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "seqrec/tensor.hpp"

namespace seqrec {

struct LossWeights {
  double omega = 0.5;  // TD loss weight
  double alpha = 0.1;  // conservative penalty weight
  double gamma = 0.5;
  double cql_temperature = 1.0;
  double contrastive_temperature = 1.0;

  void validate() const;
};

// Tape scalars for each objective term; an absent term is disabled.
struct LossParts {
  std::optional<Tensor> ce;
  std::optional<Tensor> q;
  std::optional<Tensor> contrastive;
  std::optional<Tensor> cql;
};

struct LossBreakdown {
  double ce = 0.0;
  double q = 0.0;
  double contrastive = 0.0;
  double cql = 0.0;
  double total = 0.0;

  bool finite() const;
};

struct CombinedLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const ItemId> targets);

// Mean squared one-step TD error. `q_next_target` is read as a constant.
Tensor td_q_loss(const Tensor& q_now, std::span<const ItemId> actions, std::span<const double> rewards,
                 const Tensor& q_next_target, std::span<const std::uint8_t> done, double gamma);

/// Conservative penalty restricted to sampled negatives:
///   mean_b [ tau * logsumexp({q[neg], q[pos]} / tau) - q[pos] ]
/// The support always contains the logged action, so the result is >= 0.
Tensor cql_penalty(const Tensor& q_now, std::span<const ItemId> positives,
                   std::span<const std::vector<ItemId>> negatives, double temperature);

// TD loss on the logged action plus one TD term per negative action, each
// scored with `negative_reward` and the same next state. Negative terms are
// summed per row; rows are averaged.
Tensor snqn_negative_td(const Tensor& q_now, std::span<const ItemId> positives,
                        std::span<const std::vector<ItemId>> negatives, double negative_reward,
                        std::span<const double> rewards, const Tensor& q_next_target,
                        std::span<const std::uint8_t> done, double gamma);

// Batch InfoNCE with cosine similarity; row j of `positives` pairs with row j
// of `anchors` and every other row serves as a negative.
Tensor info_nce(const Tensor& anchors, const Tensor& positives, double temperature);

// total = ce + omega * q + contrastive + alpha * cql. A non-finite term shows
// up in the breakdown (see LossBreakdown::finite) rather than throwing.
CombinedLoss combined_loss(const LossParts& parts, const LossWeights& weights);

// Values of `x[b, columns[b]]` as a [B] tensor.
Tensor select_columns(const Tensor& x, std::span<const ItemId> columns);

}  // namespace seqrec
