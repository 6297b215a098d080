#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "seqrec/rng.hpp"
#include "seqrec/tensor.hpp"

namespace seqrec {

struct EncoderConfig {
  int vocab_size = 0;  // real items; the pad slot sits one past the end
  int hidden_size = 64;
  int num_blocks = 2;
  int num_heads = 1;
  int max_len = 10;
  double dropout = 0.1;

  ItemId pad_id() const { return static_cast<ItemId>(vocab_size); }
  int ff_size() const { return hidden_size; }

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct BlockParams {
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor w_query, w_key, w_value, w_out;
  Tensor ffn_norm_gain, ffn_norm_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Shared state encoder plus the two heads that read its output.
struct EncoderParams {
  EncoderConfig config;
  Tensor item_embedding;        // [(n+1) x d], last row is the pad slot
  Tensor positional_embedding;  // [L x d]
  std::vector<BlockParams> blocks;
  Tensor final_norm_gain, final_norm_bias;
  Tensor logits_head;  // [d x n]
  Tensor q_head;       // [d x n]
  Tensor q_bias;       // [n]

  // Uniform(-1/sqrt(d), 1/sqrt(d)) embeddings and projections, zero biases,
  // unit norm gains. The Q head starts at zero so every action shares one
  // initial value.
  static EncoderParams init(const EncoderConfig& config, std::uint64_t seed);

  // All tensors in declaration order; this order defines the checkpoint layout.
  std::vector<NamedTensor> named() const;

  // Deep copy. `trainable = false` yields tensors that never collect gradients.
  EncoderParams clone(bool trainable) const;

  void zero_grad();
  void zero_pad_row();
};

/// Frozen copy used for bootstrapped TD targets.
class TargetParams {
 public:
  explicit TargetParams(const EncoderParams& source) : weights_(source.clone(false)) {}

  // Hard update: overwrite with a deep copy of `source`.
  void copy_from(const EncoderParams& source);

  const EncoderParams& weights() const { return weights_; }

 private:
  EncoderParams weights_;
};

/// Right-padded id matrix. Row b holds `lengths[b]` valid ids followed by pad.
struct SequenceBatch {
  std::vector<ItemId> ids;
  std::vector<int> lengths;
  std::size_t batch = 0;
  std::size_t max_len = 0;

  // Keeps the most recent `max_len` items of each sequence.
  static SequenceBatch from_sequences(std::span<const std::vector<ItemId>> sequences, std::size_t max_len,
                                      ItemId pad_id);
};

struct EncodeOptions {
  bool training = false;
  CounterRng* rng = nullptr;  // required when training with dropout > 0
};

// Hidden states at every position: [B x L x d].
Tensor encode_positions(const EncoderParams& params, const SequenceBatch& batch, const EncodeOptions& options = {});

// State at each row's last valid position: [B x d].
Tensor encode(const EncoderParams& params, const SequenceBatch& batch, const EncodeOptions& options = {});

// [B x n] logits of the recommendation head (no bias, no softmax).
Tensor logits(const EncoderParams& params, const Tensor& states);

// [B x n] per-action values.
Tensor q_values(const EncoderParams& params, const Tensor& states);

void hard_update_target(const EncoderParams& params, TargetParams& target);

// FNV-1a over every weight's bytes; used to check when the target changes.
std::uint64_t weights_hash(const EncoderParams& params);

void save_checkpoint(const EncoderParams& params, const std::filesystem::path& path);
EncoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace seqrec
