#include "seqrec/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

constexpr double kOutsideSupport = -1e30;

void require_matrix(const Tensor& t, const char* what) {
  if (t.ndim() != 2) throw DimensionError(std::string(what) + " must be [B x n], got " + shape_string(t.shape()));
}

void check_ids(std::span<const ItemId> ids, std::size_t n, const char* what) {
  for (ItemId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw IndexError(std::string(what) + ": id " + std::to_string(id) + " outside [0, " + std::to_string(n) + ")");
    }
  }
}

void check_rows(std::size_t expected, std::size_t got, const char* what) {
  if (expected != got) {
    throw DimensionError(std::string(what) + ": " + std::to_string(got) + " entries for " + std::to_string(expected) +
                         " rows");
  }
}

// r + gamma * (1 - done) * max_a q_next[a], per row.
std::vector<double> bootstrap_targets(const Tensor& q_next_target, std::span<const double> rewards,
                                      std::span<const std::uint8_t> done, double gamma) {
  const std::size_t B = q_next_target.dim(0);
  const std::size_t n = q_next_target.dim(1);
  const auto qd = q_next_target.data();
  std::vector<double> targets(B);
  for (std::size_t b = 0; b < B; ++b) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) best = std::max(best, qd[b * n + a]);
    targets[b] = rewards[b] + (done[b] ? 0.0 : gamma * best);
  }
  return targets;
}

void check_negatives(std::span<const ItemId> positives, std::span<const std::vector<ItemId>> negatives, std::size_t n,
                     bool allow_empty) {
  for (std::size_t b = 0; b < negatives.size(); ++b) {
    const auto& row = negatives[b];
    if (row.empty() && !allow_empty) throw ContractError("negative action set is empty for row " + std::to_string(b));
    check_ids(row, n, "negative action");
    std::vector<ItemId> sorted(row);
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ContractError("duplicate negative action in row " + std::to_string(b));
    }
    if (std::binary_search(sorted.begin(), sorted.end(), positives[b])) {
      throw ContractError("negative actions of row " + std::to_string(b) + " contain the logged action");
    }
  }
}

}  // namespace

void LossWeights::validate() const {
  if (!(omega >= 0.0)) throw ConfigError("q_loss_weight must be non-negative");
  if (!(alpha >= 0.0)) throw ConfigError("cql_min_q_weight must be non-negative");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("discount must lie in [0, 1]");
  if (!(cql_temperature > 0.0)) throw ConfigError("cql_temperature must be positive");
  if (!(contrastive_temperature > 0.0)) throw ConfigError("contrastive_temperature must be positive");
}

bool LossBreakdown::finite() const {
  return std::isfinite(ce) && std::isfinite(q) && std::isfinite(contrastive) && std::isfinite(cql) &&
         std::isfinite(total);
}

Tensor select_columns(const Tensor& x, std::span<const ItemId> columns) {
  require_matrix(x, "select_columns input");
  const std::size_t B = x.dim(0);
  const std::size_t n = x.dim(1);
  check_rows(B, columns.size(), "select_columns");
  check_ids(columns, n, "select_columns");
  std::vector<double> onehot(B * n, 0.0);
  for (std::size_t b = 0; b < B; ++b) onehot[b * n + static_cast<std::size_t>(columns[b])] = 1.0;
  return sum(x * Tensor::from({B, n}, std::move(onehot)), 1);
}

Tensor cross_entropy(const Tensor& logits, std::span<const ItemId> targets) {
  require_matrix(logits, "cross_entropy logits");
  check_rows(logits.dim(0), targets.size(), "cross_entropy targets");
  check_ids(targets, logits.dim(1), "cross_entropy target");
  return neg(mean(select_columns(log_softmax(logits, 1), targets)));
}

Tensor td_q_loss(const Tensor& q_now, std::span<const ItemId> actions, std::span<const double> rewards,
                 const Tensor& q_next_target, std::span<const std::uint8_t> done, double gamma) {
  return snqn_negative_td(q_now, actions, {}, 0.0, rewards, q_next_target, done, gamma);
}

Tensor snqn_negative_td(const Tensor& q_now, std::span<const ItemId> positives,
                        std::span<const std::vector<ItemId>> negatives, double negative_reward,
                        std::span<const double> rewards, const Tensor& q_next_target,
                        std::span<const std::uint8_t> done, double gamma) {
  require_matrix(q_now, "q_now");
  require_matrix(q_next_target, "q_next_target");
  if (q_now.shape() != q_next_target.shape()) {
    throw DimensionError("td loss: q_now " + shape_string(q_now.shape()) + " vs q_next_target " +
                         shape_string(q_next_target.shape()));
  }
  const std::size_t B = q_now.dim(0);
  const std::size_t n = q_now.dim(1);
  check_rows(B, positives.size(), "td loss actions");
  check_rows(B, rewards.size(), "td loss rewards");
  check_rows(B, done.size(), "td loss done flags");
  check_ids(positives, n, "td loss action");
  for (double r : rewards) {
    if (!std::isfinite(r)) throw NumericError("td loss: non-finite reward");
  }
  const std::vector<double> targets = bootstrap_targets(q_next_target, rewards, done, gamma);
  const Tensor residual = select_columns(q_now, positives) - Tensor::from({B}, targets);
  Tensor loss = mean(residual * residual);
  if (negatives.empty()) return loss;

  check_rows(B, negatives.size(), "snqn negatives");
  check_negatives(positives, negatives, n, true);
  // Same bootstrap, negative reward, summed over each row's negatives.
  std::vector<double> neg_targets(B);
  std::vector<double> selected(B * n, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    neg_targets[b] = targets[b] - rewards[b] + negative_reward;
    for (ItemId a : negatives[b]) selected[b * n + static_cast<std::size_t>(a)] = 1.0;
  }
  const Tensor neg_residual = q_now - Tensor::from({B, 1}, std::move(neg_targets));
  const Tensor per_row = sum(neg_residual * neg_residual * Tensor::from({B, n}, std::move(selected)), 1);
  return loss + mean(per_row);
}

Tensor cql_penalty(const Tensor& q_now, std::span<const ItemId> positives,
                   std::span<const std::vector<ItemId>> negatives, double temperature) {
  require_matrix(q_now, "q_now");
  const std::size_t B = q_now.dim(0);
  const std::size_t n = q_now.dim(1);
  if (!(temperature > 0.0)) throw ContractError("cql temperature must be positive");
  check_rows(B, positives.size(), "cql positives");
  check_rows(B, negatives.size(), "cql negatives");
  check_ids(positives, n, "cql positive");
  check_negatives(positives, negatives, n, false);
  Mask outside(B * n, 1);
  for (std::size_t b = 0; b < B; ++b) {
    outside[b * n + static_cast<std::size_t>(positives[b])] = 0;
    for (ItemId a : negatives[b]) outside[b * n + static_cast<std::size_t>(a)] = 0;
  }
  const Tensor scaled = masked_fill(mul_scalar(q_now, 1.0 / temperature), outside, kOutsideSupport);
  const Tensor soft_max = mul_scalar(logsumexp(scaled, 1), temperature);
  return mean(soft_max - select_columns(q_now, positives));
}

Tensor info_nce(const Tensor& anchors, const Tensor& positives, double temperature) {
  require_matrix(anchors, "info_nce anchors");
  if (anchors.shape() != positives.shape()) {
    throw DimensionError("info_nce: " + shape_string(anchors.shape()) + " vs " + shape_string(positives.shape()));
  }
  const std::size_t B = anchors.dim(0);
  if (B < 2) throw ContractError("info_nce needs at least 2 rows for in-batch negatives");
  if (!(temperature > 0.0)) throw ContractError("contrastive temperature must be positive");
  auto normalize = [](const Tensor& x) {
    const Tensor sq = sum(x * x, 1, true);
    for (double v : sq.data()) {
      if (!(v > 0.0) || !std::isfinite(v)) throw NumericError("info_nce: zero-norm or non-finite state");
    }
    return x * pow_scalar(sq, -0.5);
  };
  const Tensor sim = mul_scalar(matmul(normalize(anchors), transpose(normalize(positives))), 1.0 / temperature);
  std::vector<double> eye(B * B, 0.0);
  for (std::size_t j = 0; j < B; ++j) eye[j * B + j] = 1.0;
  const Tensor matched = sum(sim * Tensor::from({B, B}, std::move(eye)), 1);
  return mean(logsumexp(sim, 1) - matched);
}

CombinedLoss combined_loss(const LossParts& parts, const LossWeights& weights) {
  LossBreakdown br;
  std::optional<Tensor> total;
  auto take = [&](const std::optional<Tensor>& part, double weight, double& slot) {
    if (!part) return;
    slot = part->item();
    const Tensor term = weight == 1.0 ? *part : mul_scalar(*part, weight);
    total = total ? add(*total, term) : term;
  };
  take(parts.ce, 1.0, br.ce);
  take(parts.q, weights.omega, br.q);
  take(parts.contrastive, 1.0, br.contrastive);
  take(parts.cql, weights.alpha, br.cql);
  if (!total) total = Tensor::scalar(0.0);
  br.total = total->item();
  return CombinedLoss{*total, br};
}

}  // namespace seqrec
