#include "seqrec/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

// Large finite fill for disallowed attention scores; exp() of it underflows to 0.
constexpr double kMaskedScore = -1e30;

constexpr char kMagic[4] = {'S', 'R', 'Q', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor uniform_parameter(Shape shape, double bound, CounterRng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = (2.0 * rng.uniform() - 1.0) * bound;
  return Tensor::parameter(std::move(shape), std::move(values));
}

Tensor constant_parameter(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

Tensor copy_tensor(const Tensor& t, bool trainable) {
  Tensor out = t.detach();
  return trainable ? Tensor::parameter(out.shape(), std::vector<double>(out.data().begin(), out.data().end())) : out;
}

template <class T>
void write_raw(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_raw(std::istream& is, const std::filesystem::path& path) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw IoError("truncated checkpoint: " + path.string());
  return value;
}

// One attention head over [B x L x dh] projections.
Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Mask& mask, double scale) {
  Tensor scores = mul_scalar(matmul(q, transpose(k)), scale);
  scores = masked_fill(scores, mask, kMaskedScore);
  return matmul(softmax(scores, -1), v);
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  if (hidden_size <= 0) throw ConfigError("hidden_size must be positive");
  if (num_blocks <= 0) throw ConfigError("num_blocks must be positive");
  if (num_heads <= 0) throw ConfigError("num_heads must be positive");
  if (max_len <= 0) throw ConfigError("max_len must be positive");
  if (hidden_size % num_heads != 0) throw ConfigError("hidden_size must be divisible by num_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

EncoderParams EncoderParams::init(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  CounterRng rng(seed);
  const auto n = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.hidden_size);
  const auto ff = static_cast<std::size_t>(config.ff_size());
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));

  EncoderParams p;
  p.config = config;
  p.item_embedding = uniform_parameter({n + 1, d}, bound, rng);
  p.positional_embedding = uniform_parameter({static_cast<std::size_t>(config.max_len), d}, bound, rng);
  for (int b = 0; b < config.num_blocks; ++b) {
    BlockParams blk;
    blk.attn_norm_gain = constant_parameter({d}, 1.0);
    blk.attn_norm_bias = constant_parameter({d}, 0.0);
    blk.w_query = uniform_parameter({d, d}, bound, rng);
    blk.w_key = uniform_parameter({d, d}, bound, rng);
    blk.w_value = uniform_parameter({d, d}, bound, rng);
    blk.w_out = uniform_parameter({d, d}, bound, rng);
    blk.ffn_norm_gain = constant_parameter({d}, 1.0);
    blk.ffn_norm_bias = constant_parameter({d}, 0.0);
    blk.ffn_w1 = uniform_parameter({d, ff}, bound, rng);
    blk.ffn_b1 = constant_parameter({ff}, 0.0);
    blk.ffn_w2 = uniform_parameter({ff, d}, 1.0 / std::sqrt(static_cast<double>(ff)), rng);
    blk.ffn_b2 = constant_parameter({d}, 0.0);
    p.blocks.push_back(std::move(blk));
  }
  p.final_norm_gain = constant_parameter({d}, 1.0);
  p.final_norm_bias = constant_parameter({d}, 0.0);
  p.logits_head = uniform_parameter({d, n}, bound, rng);
  p.q_head = constant_parameter({d, n}, 0.0);
  p.q_bias = constant_parameter({n}, 0.0);
  p.zero_pad_row();
  return p;
}

std::vector<NamedTensor> EncoderParams::named() const {
  std::vector<NamedTensor> out;
  out.push_back({"item_embedding", item_embedding});
  out.push_back({"positional_embedding", positional_embedding});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    const BlockParams& blk = blocks[b];
    out.push_back({prefix + "attn_norm_gain", blk.attn_norm_gain});
    out.push_back({prefix + "attn_norm_bias", blk.attn_norm_bias});
    out.push_back({prefix + "w_query", blk.w_query});
    out.push_back({prefix + "w_key", blk.w_key});
    out.push_back({prefix + "w_value", blk.w_value});
    out.push_back({prefix + "w_out", blk.w_out});
    out.push_back({prefix + "ffn_norm_gain", blk.ffn_norm_gain});
    out.push_back({prefix + "ffn_norm_bias", blk.ffn_norm_bias});
    out.push_back({prefix + "ffn_w1", blk.ffn_w1});
    out.push_back({prefix + "ffn_b1", blk.ffn_b1});
    out.push_back({prefix + "ffn_w2", blk.ffn_w2});
    out.push_back({prefix + "ffn_b2", blk.ffn_b2});
  }
  out.push_back({"final_norm_gain", final_norm_gain});
  out.push_back({"final_norm_bias", final_norm_bias});
  out.push_back({"logits_head", logits_head});
  out.push_back({"q_head", q_head});
  out.push_back({"q_bias", q_bias});
  return out;
}

EncoderParams EncoderParams::clone(bool trainable) const {
  EncoderParams p;
  p.config = config;
  auto c = [trainable](const Tensor& t) { return copy_tensor(t, trainable); };
  p.item_embedding = c(item_embedding);
  p.positional_embedding = c(positional_embedding);
  for (const BlockParams& blk : blocks) {
    p.blocks.push_back(BlockParams{c(blk.attn_norm_gain), c(blk.attn_norm_bias), c(blk.w_query), c(blk.w_key),
                                   c(blk.w_value), c(blk.w_out), c(blk.ffn_norm_gain), c(blk.ffn_norm_bias),
                                   c(blk.ffn_w1), c(blk.ffn_b1), c(blk.ffn_w2), c(blk.ffn_b2)});
  }
  p.final_norm_gain = c(final_norm_gain);
  p.final_norm_bias = c(final_norm_bias);
  p.logits_head = c(logits_head);
  p.q_head = c(q_head);
  p.q_bias = c(q_bias);
  return p;
}

void EncoderParams::zero_grad() {
  for (auto& nt : named()) nt.tensor.zero_grad();
}

void EncoderParams::zero_pad_row() {
  const auto d = static_cast<std::size_t>(config.hidden_size);
  auto data = item_embedding.mutable_data();
  std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(config.pad_id()) * d), d, 0.0);
}

void TargetParams::copy_from(const EncoderParams& source) { weights_ = source.clone(false); }

SequenceBatch SequenceBatch::from_sequences(std::span<const std::vector<ItemId>> sequences, std::size_t max_len,
                                            ItemId pad_id) {
  SequenceBatch batch;
  batch.batch = sequences.size();
  batch.max_len = max_len;
  batch.ids.assign(sequences.size() * max_len, pad_id);
  batch.lengths.resize(sequences.size());
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const auto& seq = sequences[b];
    const std::size_t keep = std::min(seq.size(), max_len);
    const std::size_t skip = seq.size() - keep;
    std::copy(seq.begin() + static_cast<std::ptrdiff_t>(skip), seq.end(),
              batch.ids.begin() + static_cast<std::ptrdiff_t>(b * max_len));
    batch.lengths[b] = static_cast<int>(keep);
  }
  return batch;
}

Tensor encode_positions(const EncoderParams& params, const SequenceBatch& batch, const EncodeOptions& options) {
  const EncoderConfig& cfg = params.config;
  const std::size_t B = batch.batch;
  const std::size_t L = batch.max_len;
  const auto d = static_cast<std::size_t>(cfg.hidden_size);
  if (batch.ids.size() != B * L || batch.lengths.size() != B) {
    throw DimensionError("encode: batch of " + std::to_string(B) + " rows x " + std::to_string(L) +
                         " has inconsistent buffers");
  }
  if (L == 0 || L > static_cast<std::size_t>(cfg.max_len)) {
    throw ContractError("encode: sequence width " + std::to_string(L) + " outside [1, " +
                        std::to_string(cfg.max_len) + "]");
  }
  for (ItemId id : batch.ids) {
    if (id < 0 || id > cfg.pad_id()) {
      throw VocabularyError("encode: item id " + std::to_string(id) + " outside [0, " + std::to_string(cfg.pad_id()) +
                            "]");
    }
  }
  for (int len : batch.lengths) {
    if (len < 1 || static_cast<std::size_t>(len) > L) {
      throw ContractError("encode: row length " + std::to_string(len) + " outside [1, " + std::to_string(L) + "]");
    }
  }
  const bool train = options.training && cfg.dropout > 0.0;
  if (train && options.rng == nullptr) throw ContractError("encode: training with dropout needs a generator");
  auto drop = [&](const Tensor& x) { return train ? dropout(x, cfg.dropout, *options.rng, true) : x; };

  // Valid positions and the attention mask: query i may see key j iff j <= i and j is not padding.
  std::vector<double> timeline(B * L, 0.0);
  Mask attn_mask(B * L * L, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto len = static_cast<std::size_t>(batch.lengths[b]);
    for (std::size_t i = 0; i < L; ++i) {
      timeline[b * L + i] = i < len ? 1.0 : 0.0;
      for (std::size_t j = 0; j < L; ++j) attn_mask[(b * L + i) * L + j] = (j > i || j >= len) ? 1 : 0;
    }
  }
  const Tensor keep = Tensor::from({B, L, 1}, std::move(timeline));

  Tensor h = reshape(gather_rows(params.item_embedding, batch.ids), {B, L, d});
  h = h + slice(params.positional_embedding, 0, 0, L);
  h = drop(h) * keep;

  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const BlockParams& blk : params.blocks) {
    const Tensor x = layer_norm(h, blk.attn_norm_gain, blk.attn_norm_bias);
    const Tensor q = matmul(x, blk.w_query);
    const Tensor k = matmul(x, blk.w_key);
    const Tensor v = matmul(x, blk.w_value);
    Tensor attended;
    if (heads == 1) {
      attended = attention_head(q, k, v, attn_mask, scale);
    } else {
      std::vector<Tensor> outs;
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t lo = hd * dh, hi = lo + dh;
        outs.push_back(attention_head(slice(q, 2, lo, hi), slice(k, 2, lo, hi), slice(v, 2, lo, hi), attn_mask, scale));
      }
      attended = concat(outs, 2);
    }
    h = h + drop(matmul(attended, blk.w_out));

    const Tensor y = layer_norm(h, blk.ffn_norm_gain, blk.ffn_norm_bias);
    const Tensor hidden = relu(matmul(y, blk.ffn_w1) + blk.ffn_b1);
    h = (h + drop(matmul(hidden, blk.ffn_w2) + blk.ffn_b2)) * keep;
  }
  return layer_norm(h, params.final_norm_gain, params.final_norm_bias);
}

Tensor encode(const EncoderParams& params, const SequenceBatch& batch, const EncodeOptions& options) {
  const Tensor positions = encode_positions(params, batch, options);
  const std::size_t B = batch.batch;
  const std::size_t L = batch.max_len;
  const auto d = static_cast<std::size_t>(params.config.hidden_size);
  std::vector<ItemId> last(B);
  for (std::size_t b = 0; b < B; ++b) last[b] = static_cast<ItemId>(b * L + static_cast<std::size_t>(batch.lengths[b]) - 1);
  return gather_rows(reshape(positions, {B * L, d}), last);
}

Tensor logits(const EncoderParams& params, const Tensor& states) { return matmul(states, params.logits_head); }

Tensor q_values(const EncoderParams& params, const Tensor& states) {
  return matmul(states, params.q_head) + params.q_bias;
}

void hard_update_target(const EncoderParams& params, TargetParams& target) {
  const auto a = params.named();
  const auto b = target.weights().named();
  if (a.size() != b.size()) throw DimensionError("hard_update_target: parameter count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tensor.shape() != b[i].tensor.shape()) {
      throw DimensionError("hard_update_target: " + a[i].name + " " + shape_string(a[i].tensor.shape()) + " vs " +
                           shape_string(b[i].tensor.shape()));
    }
  }
  target.copy_from(params);
}

std::uint64_t weights_hash(const EncoderParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& nt : params.named()) {
    const auto data = nt.tensor.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
    for (std::size_t i = 0; i < data.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void save_checkpoint(const EncoderParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  const EncoderConfig& c = params.config;
  os.write(kMagic, 4);
  write_raw<std::uint32_t>(os, kCheckpointVersion);
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.vocab_size));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.hidden_size));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.num_blocks));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.num_heads));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.max_len));
  write_raw<double>(os, c.dropout);
  const auto tensors = params.named();
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(nt.tensor.ndim()));
    for (std::size_t dim : nt.tensor.shape()) write_raw<std::uint64_t>(os, dim);
    const auto data = nt.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

EncoderParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a checkpoint (bad magic): " + path.string());
  const auto version = read_raw<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CompatibilityError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  EncoderConfig c;
  c.vocab_size = static_cast<int>(read_raw<std::uint32_t>(is, path));
  c.hidden_size = static_cast<int>(read_raw<std::uint32_t>(is, path));
  c.num_blocks = static_cast<int>(read_raw<std::uint32_t>(is, path));
  c.num_heads = static_cast<int>(read_raw<std::uint32_t>(is, path));
  c.max_len = static_cast<int>(read_raw<std::uint32_t>(is, path));
  c.dropout = read_raw<double>(is, path);
  EncoderParams params = EncoderParams::init(c, 0);
  auto expected = params.named();
  const auto count = read_raw<std::uint32_t>(is, path);
  if (count != expected.size()) {
    throw CompatibilityError("checkpoint holds " + std::to_string(count) + " arrays, expected " +
                             std::to_string(expected.size()) + ": " + path.string());
  }
  for (auto& nt : expected) {
    const auto name_len = read_raw<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || name != nt.name) throw CompatibilityError("checkpoint array '" + name + "', expected '" + nt.name + "'");
    const auto rank = read_raw<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& dim : shape) dim = static_cast<std::size_t>(read_raw<std::uint64_t>(is, path));
    if (shape != nt.tensor.shape()) {
      throw CompatibilityError("checkpoint array " + name + " has shape " + shape_string(shape) + ", expected " +
                               shape_string(nt.tensor.shape()));
    }
    auto data = nt.tensor.mutable_data();
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint: " + path.string());
  }
  return params;
}

}  // namespace seqrec
