#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "seqrec/data.hpp"
#include "seqrec/encoder.hpp"
#include "seqrec/sampler.hpp"

namespace seqrec {

// 1 iff `truth` is in `ranked`; `ranked` must hold distinct ids.
int hr_at_k(std::span<const ItemId> ranked, ItemId truth);

// 1 / log2(1 + rank) for a 1-based rank inside `ranked`, else 0.
double ndcg_at_k(std::span<const ItemId> ranked, ItemId truth);

// `reward_of_truth` when `truth` is among the first k of `ranked`, else 0.
double reward_at_k(std::span<const ItemId> ranked, ItemId truth, double reward_of_truth, std::size_t k);

// Ids of the k largest scores, best first; ties go to the lower id and NaN ranks last.
std::vector<ItemId> top_k(std::span<const double> scores, std::size_t k);

struct SliceMetrics {
  std::size_t count = 0;
  std::vector<double> hr;    // aligned with MetricsRecord::ks
  std::vector<double> ndcg;
};

struct MetricsRecord {
  std::vector<int> ks;
  SliceMetrics all, purchase, click;
  std::vector<double> reward;  // total reward captured in the top k, per cutoff
  double q_mean_pos = 0.0, q_std_pos = 0.0;
  double q_mean_neg = 0.0, q_std_neg = 0.0;
  double q_abs_mean = 0.0;  // mean |Q| over every evaluated (state, action)

  // Purchase slice when it is non-empty, else all transitions.
  const SliceMetrics& headline() const { return purchase.count > 0 ? purchase : all; }
  double hr_at(int k, const SliceMetrics& slice) const;
  double ndcg_at(int k, const SliceMetrics& slice) const;
  double reward_at(int k) const;
};

struct EvalOptions {
  bool rank_by_q = false;
  std::size_t batch_size = 256;
  std::size_t q_negatives = 10;  // sampled negatives per transition for Q statistics
  std::uint64_t seed = 0;
};

// Full-catalogue ranking of every transition's next item. Throws
// ContractError on an empty transition set.
MetricsRecord evaluate(const EncoderParams& params, std::span<const Transition> transitions, std::span<const int> ks,
                       const EvalOptions& options = {});

struct QGroupStats {
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
};

struct QDistributionReport {
  std::vector<double> edges;  // bins + 1 edges
  QGroupStats positive;       // logged actions
  QGroupStats negative;       // sampled non-interacted actions
};

QDistributionReport q_distribution_report(const EncoderParams& params, std::span<const Transition> transitions,
                                          const NegativeSampler& sampler, std::size_t bins, std::uint64_t seed);

// `group,bin_low,bin_high,count` rows, then one `<group>_moments,mean,std,count` row per group.
void write_q_report_csv(const QDistributionReport& report, const std::filesystem::path& path);

}  // namespace seqrec
