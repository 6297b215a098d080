#include "seqrec/sampler.hpp"

#include <algorithm>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

std::vector<ItemId> sorted_unique_in_range(std::span<const ItemId> items, std::size_t n) {
  std::vector<ItemId> out;
  out.reserve(items.size());
  for (ItemId id : items) {
    if (id >= 0 && static_cast<std::size_t>(id) < n) out.push_back(id);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

bool contains(const std::vector<ItemId>& sorted, ItemId id) { return std::binary_search(sorted.begin(), sorted.end(), id); }

std::vector<ItemId> from_complement(const std::vector<ItemId>& excluded, std::size_t k, std::size_t n,
                                    CounterRng& rng) {
  std::vector<ItemId> pool;
  pool.reserve(n - excluded.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = static_cast<ItemId>(i);
    if (!contains(excluded, id)) pool.push_back(id);
  }
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(k);
  return pool;
}

std::size_t check_feasible(const std::vector<ItemId>& excluded, std::size_t k, std::size_t n) {
  const std::size_t complement = n - excluded.size();
  if (complement < k) {
    throw InfeasibleSamplingError("cannot draw " + std::to_string(k) + " negatives from " +
                                  std::to_string(complement) + " non-interacted items");
  }
  return complement;
}

}  // namespace

std::vector<ItemId> sample_negatives(std::span<const ItemId> user_items, std::size_t k, std::size_t n,
                                     CounterRng& rng) {
  const std::vector<ItemId> excluded = sorted_unique_in_range(user_items, n);
  const std::size_t complement = check_feasible(excluded, k, n);
  if (complement < 4 * k) return from_complement(excluded, k, n, rng);
  std::vector<ItemId> out;
  out.reserve(k);
  while (out.size() < k) {
    const auto id = static_cast<ItemId>(rng.below(n));
    if (contains(excluded, id) || std::find(out.begin(), out.end(), id) != out.end()) continue;
    out.push_back(id);
  }
  return out;
}

NegativeSampler::NegativeSampler(std::size_t n_items, std::size_t k) : n_(n_items), k_(k) {}

void NegativeSampler::use_popularity(std::span<const double> counts) {
  if (counts.size() != n_) throw DimensionError("popularity counts must cover every item");
  cumulative_.resize(n_);
  double running = 0.0;
  for (std::size_t i = 0; i < n_; ++i) {
    // +1 smoothing keeps never-seen items reachable.
    running += std::max(counts[i], 0.0) + 1.0;
    cumulative_[i] = running;
  }
}

std::vector<ItemId> NegativeSampler::sample(std::span<const ItemId> user_items, CounterRng& rng) const {
  if (cumulative_.empty()) return sample_negatives(user_items, k_, n_, rng);
  const std::vector<ItemId> excluded = sorted_unique_in_range(user_items, n_);
  const std::size_t complement = check_feasible(excluded, k_, n_);
  if (complement < 4 * k_) return from_complement(excluded, k_, n_, rng);
  std::vector<ItemId> out;
  out.reserve(k_);
  const double total = cumulative_.back();
  std::size_t attempts = 0;
  while (out.size() < k_) {
    if (++attempts > 64 * k_ + 64) {
      // Heavy mass on excluded items; finish uniformly over what is left.
      std::vector<ItemId> extra_excluded = excluded;
      extra_excluded.insert(extra_excluded.end(), out.begin(), out.end());
      std::sort(extra_excluded.begin(), extra_excluded.end());
      for (ItemId id : from_complement(extra_excluded, k_ - out.size(), n_, rng)) out.push_back(id);
      break;
    }
    const double u = rng.uniform() * total;
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const auto id = static_cast<ItemId>(std::min<std::ptrdiff_t>(it - cumulative_.begin(), n_ - 1));
    if (contains(excluded, id) || std::find(out.begin(), out.end(), id) != out.end()) continue;
    out.push_back(id);
  }
  return out;
}

NegativeSampleSet NegativeSampler::sample_batch(std::span<const std::span<const ItemId>> user_items,
                                                CounterRng& rng) const {
  NegativeSampleSet set;
  set.k = k_;
  set.rows.reserve(user_items.size());
  for (const auto& items : user_items) set.rows.push_back(sample(items, rng));
  return set;
}

}  // namespace seqrec
