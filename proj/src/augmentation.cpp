#include "seqrec/augmentation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "seqrec/errors.hpp"

namespace seqrec {

void AugmentationSpec::validate() const {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("augmentation_ratio must lie in (0, 1]");
}

AugmentationKind parse_augmentation_kind(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "permutation") return AugmentationKind::kPermutation;
  if (lower == "mask") return AugmentationKind::kMask;
  if (lower == "crop") return AugmentationKind::kCrop;
  throw ConfigError("unknown augmentation '" + name + "' (expected Permutation, Mask or Crop)");
}

std::string to_string(AugmentationKind kind) {
  switch (kind) {
    case AugmentationKind::kPermutation: return "Permutation";
    case AugmentationKind::kMask: return "Mask";
    case AugmentationKind::kCrop: return "Crop";
  }
  return "?";
}

std::size_t augmentation_window(std::size_t len, double ratio) {
  if (len == 0) return 0;
  // The small offset keeps products like 0.1 * 30 from rounding up to 4.
  const auto raw = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(len) - 1e-9));
  return std::clamp<std::size_t>(raw, 1, len);
}

std::vector<ItemId> permute_subsequence(std::span<const ItemId> seq, double ratio, CounterRng& rng) {
  std::vector<ItemId> out(seq.begin(), seq.end());
  const std::size_t w = augmentation_window(out.size(), ratio);
  if (w <= 1) return out;
  const std::size_t start = rng.below(out.size() - w + 1);
  for (std::size_t i = w - 1; i > 0; --i) {
    const std::size_t j = rng.below(i + 1);
    std::swap(out[start + i], out[start + j]);
  }
  return out;
}

std::vector<ItemId> mask_items(std::span<const ItemId> seq, double ratio, CounterRng& rng, ItemId mask_id) {
  std::vector<ItemId> out(seq.begin(), seq.end());
  const std::size_t w = augmentation_window(out.size(), ratio);
  std::vector<std::size_t> positions(out.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  for (std::size_t i = 0; i < w; ++i) {
    const std::size_t j = i + rng.below(positions.size() - i);
    std::swap(positions[i], positions[j]);
    out[positions[i]] = mask_id;
  }
  return out;
}

std::vector<ItemId> crop(std::span<const ItemId> seq, double ratio, CounterRng& rng) {
  const std::size_t w = augmentation_window(seq.size(), ratio);
  if (w == seq.size()) return {seq.begin(), seq.end()};
  const std::size_t start = rng.below(seq.size() - w + 1);
  return {seq.begin() + static_cast<std::ptrdiff_t>(start), seq.begin() + static_cast<std::ptrdiff_t>(start + w)};
}

std::vector<ItemId> augment(std::span<const ItemId> seq, const AugmentationSpec& spec, CounterRng& rng, ItemId mask_id) {
  switch (spec.kind) {
    case AugmentationKind::kPermutation: return permute_subsequence(seq, spec.ratio, rng);
    case AugmentationKind::kMask: return mask_items(seq, spec.ratio, rng, mask_id);
    case AugmentationKind::kCrop: return crop(seq, spec.ratio, rng);
  }
  return {seq.begin(), seq.end()};
}

ViewPair make_views(std::span<const std::vector<ItemId>> batch, const AugmentationSpec& spec, CounterRng& rng,
                    ItemId mask_id) {
  return make_views(batch, spec, rng, rng, mask_id);
}

ViewPair make_views(std::span<const std::vector<ItemId>> batch, const AugmentationSpec& spec, CounterRng& rng_first,
                    CounterRng& rng_second, ItemId mask_id) {
  if (batch.empty()) throw ContractError("make_views: empty batch");
  spec.validate();
  ViewPair views;
  views.first.reserve(batch.size());
  views.second.reserve(batch.size());
  for (const auto& seq : batch) {
    views.first.push_back(augment(seq, spec, rng_first, mask_id));
    views.second.push_back(augment(seq, spec, rng_second, mask_id));
  }
  return views;
}

}  // namespace seqrec
