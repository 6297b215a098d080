#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seqrec/rng.hpp"
#include "seqrec/tensor.hpp"

namespace seqrec {

enum class AugmentationKind { kPermutation, kMask, kCrop };

struct AugmentationSpec {
  AugmentationKind kind = AugmentationKind::kPermutation;
  double ratio = 0.5;  // fraction of the valid sequence affected, in (0, 1]
  std::uint64_t seed = 0;

  void validate() const;
};

AugmentationKind parse_augmentation_kind(const std::string& name);
std::string to_string(AugmentationKind kind);

// ceil(ratio * len), at least 1 and at most len (len > 0).
std::size_t augmentation_window(std::size_t len, double ratio);

// Shuffles one contiguous window of augmentation_window(len, ratio) items.
std::vector<ItemId> permute_subsequence(std::span<const ItemId> seq, double ratio, CounterRng& rng);

// Replaces augmentation_window(len, ratio) distinct positions with `mask_id`.
std::vector<ItemId> mask_items(std::span<const ItemId> seq, double ratio, CounterRng& rng, ItemId mask_id);

// Keeps one contiguous window of augmentation_window(len, ratio) items.
std::vector<ItemId> crop(std::span<const ItemId> seq, double ratio, CounterRng& rng);

std::vector<ItemId> augment(std::span<const ItemId> seq, const AugmentationSpec& spec, CounterRng& rng, ItemId mask_id);

struct ViewPair {
  std::vector<std::vector<ItemId>> first;
  std::vector<std::vector<ItemId>> second;
};

// Two independent augmentations per sequence; first[j] and second[j] are a positive pair.
ViewPair make_views(std::span<const std::vector<ItemId>> batch, const AugmentationSpec& spec, CounterRng& rng,
                    ItemId mask_id);

// Same, drawing each view from its own stream.
ViewPair make_views(std::span<const std::vector<ItemId>> batch, const AugmentationSpec& spec, CounterRng& rng_first,
                    CounterRng& rng_second, ItemId mask_id);

}  // namespace seqrec
