#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "seqrec/rng.hpp"
#include "seqrec/tensor.hpp"

namespace seqrec {

struct NegativeSampleSet {
  std::vector<std::vector<ItemId>> rows;
  std::size_t k = 0;
};

/// k distinct ids drawn uniformly from [0, n) minus `user_items`.
///
/// Uses rejection sampling, switching to enumeration of the complement when
/// it holds fewer than 4k ids. Throws InfeasibleSamplingError when the
/// complement is smaller than k.
std::vector<ItemId> sample_negatives(std::span<const ItemId> user_items, std::size_t k, std::size_t n,
                                     CounterRng& rng);

class NegativeSampler {
 public:
  NegativeSampler(std::size_t n_items, std::size_t k);

  // Draw proportionally to `counts` (e.g. training popularity) instead of uniformly.
  void use_popularity(std::span<const double> counts);
  bool popularity_weighted() const { return !cumulative_.empty(); }

  std::size_t k() const { return k_; }
  std::size_t n_items() const { return n_; }

  std::vector<ItemId> sample(std::span<const ItemId> user_items, CounterRng& rng) const;

  // One row per interaction set.
  NegativeSampleSet sample_batch(std::span<const std::span<const ItemId>> user_items, CounterRng& rng) const;

 private:
  std::size_t n_;
  std::size_t k_;
  std::vector<double> cumulative_;
};

}  // namespace seqrec
