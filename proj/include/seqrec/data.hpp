#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "seqrec/tensor.hpp"

namespace seqrec {

struct SessionEvent {
  std::int64_t session_id = 0;
  ItemId item_id = 0;
  std::int64_t timestamp = 0;
  bool is_buy = false;

  bool operator==(const SessionEvent&) const = default;
};

// Dense id <-> raw id mapping; dense ids follow ascending raw id.
class IdMap {
 public:
  IdMap() = default;
  explicit IdMap(std::vector<std::int64_t> raw_ids);

  std::size_t size() const { return raw_.size(); }
  std::int64_t raw(ItemId dense) const { return raw_.at(static_cast<std::size_t>(dense)); }
  ItemId dense(std::int64_t raw) const;  // throws IndexError for unknown ids
  const std::vector<std::int64_t>& raw_ids() const { return raw_; }

  void save(const std::filesystem::path& path) const;
  static IdMap load(const std::filesystem::path& path);

 private:
  std::vector<std::int64_t> raw_;
  std::unordered_map<std::int64_t, ItemId> index_;
};

struct SessionLog {
  // Grouped by session (ascending session id), ordered by timestamp within a
  // session with ties kept in file order. Item ids are dense.
  std::vector<SessionEvent> events;
  IdMap id_map;
  std::size_t n_items = 0;
};

SessionLog parse_sessions(std::istream& in);
SessionLog parse_sessions(const std::filesystem::path& path);

void write_sessions(const std::vector<SessionEvent>& events, const std::filesystem::path& path);

struct Transition {
  std::vector<ItemId> state;       // most recent <= L items, oldest first
  ItemId action = 0;
  double reward = 0.0;
  std::vector<ItemId> next_state;  // state with action appended, truncated to L
  bool done = false;
  bool is_buy = false;
  std::int64_t session_id = 0;
  // Every item of the session, sorted and unique; negatives avoid these.
  std::shared_ptr<const std::vector<ItemId>> session_items;
};

struct TransitionConfig {
  std::size_t max_len = 10;
  double r_click = 0.2;
  double r_buy = 1.0;
};

struct TransitionBuild {
  std::vector<Transition> transitions;
  std::size_t kept_sessions = 0;
  std::size_t dropped_sessions = 0;  // fewer than 2 events
};

// Events must be grouped by session as produced by parse_sessions.
TransitionBuild build_transitions(std::span<const SessionEvent> events, const TransitionConfig& config);

struct DatasetSplit {
  std::vector<Transition> train;
  std::vector<Transition> validation;
  std::vector<Transition> test;
  std::size_t n_items = 0;
  std::array<std::size_t, 3> session_counts{};
  std::size_t dropped_sessions = 0;
};

/// Seeded shuffle of session ids, then partition by `fractions`.
/// Throws ConfigError unless the fractions sum to 1 within 1e-9.
DatasetSplit split_sessions(std::span<const SessionEvent> events, std::size_t n_items,
                            const std::array<double, 3>& fractions, std::uint64_t seed,
                            const TransitionConfig& config);

// Sparse first-order chain: successors[i] lists (to, prob) pairs of item i.
struct MarkovChain {
  std::size_t n_items = 0;
  std::vector<std::vector<std::pair<ItemId, double>>> successors;

  std::vector<double> dense() const;  // row-major n x n
  void save(const std::filesystem::path& path) const;
  static MarkovChain load(const std::filesystem::path& path, std::size_t n_items);
};

struct SyntheticParams {
  std::size_t n_items = 200;
  std::size_t n_sessions = 2000;
  std::size_t horizon = 12;
  double buy_prob = 0.2;
  double dominance = 0.6;
  std::size_t extra_successors = 4;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  std::vector<SessionEvent> events;
  MarkovChain chain;
};

/// Sessions of `horizon` events from a planted chain. Each item has one
/// dominant successor carrying `dominance` of the mass; the rest is spread
/// evenly over `extra_successors` other items.
SyntheticDataset generate_synthetic(const SyntheticParams& params);

// FNV-1a 64 of a file's bytes.
std::uint64_t file_fingerprint(const std::filesystem::path& path);

}  // namespace seqrec
