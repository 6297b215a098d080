#include "seqrec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <sstream>
#include <string>

#include "seqrec/errors.hpp"
#include "seqrec/rng.hpp"

namespace seqrec {

namespace {

constexpr const char* kSessionHeader = "session_id,item_id,timestamp,is_buy";

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

template <class Int>
Int parse_int(std::string_view field, std::size_t line, const char* name) {
  Int value{};
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw TypeError(line, std::string("field ") + name + " is not an integer: '" + std::string(field) + "'");
  }
  return value;
}

double parse_double(std::string_view field, std::size_t line, const char* name) {
  std::string s(field);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError(line, std::string("field ") + name + " is not a number: '" + s + "'");
  }
  return v;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

IdMap::IdMap(std::vector<std::int64_t> raw_ids) : raw_(std::move(raw_ids)) {
  index_.reserve(raw_.size());
  for (std::size_t i = 0; i < raw_.size(); ++i) index_.emplace(raw_[i], static_cast<ItemId>(i));
}

ItemId IdMap::dense(std::int64_t raw) const {
  const auto it = index_.find(raw);
  if (it == index_.end()) throw IndexError("unknown raw item id " + std::to_string(raw));
  return it->second;
}

void IdMap::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write id map: " + path.string());
  os << "raw_item_id,dense_id\n";
  for (std::size_t i = 0; i < raw_.size(); ++i) os << raw_[i] << ',' << i << '\n';
  if (!os) throw IoError("failed writing id map: " + path.string());
}

IdMap IdMap::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open id map: " + path.string());
  std::string line;
  std::getline(is, line);
  strip_cr(line);
  if (line != "raw_item_id,dense_id") throw ParseError(1, "id map header must be raw_item_id,dense_id");
  std::vector<std::pair<std::int64_t, std::int64_t>> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 2) throw ParseError(line_no, "expected 2 fields");
    rows.emplace_back(parse_int<std::int64_t>(f[1], line_no, "dense_id"), parse_int<std::int64_t>(f[0], line_no, "raw_item_id"));
  }
  std::sort(rows.begin(), rows.end());
  std::vector<std::int64_t> raw;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != static_cast<std::int64_t>(i)) throw ParseError(0, "id map dense ids are not 0..n-1");
    raw.push_back(rows[i].second);
  }
  return IdMap(std::move(raw));
}

SessionLog parse_sessions(std::istream& in) {
  SessionLog log;
  std::string line;
  if (!std::getline(in, line)) return log;
  strip_cr(line);
  if (line != kSessionHeader) throw ParseError(1, std::string("header must be ") + kSessionHeader);

  struct RawEvent {
    std::int64_t session, item, timestamp;
    bool buy;
  };
  std::vector<RawEvent> raw;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 4) throw ParseError(line_no, "expected 4 fields, got " + std::to_string(f.size()));
    RawEvent e{parse_int<std::int64_t>(f[0], line_no, "session_id"), parse_int<std::int64_t>(f[1], line_no, "item_id"),
               parse_int<std::int64_t>(f[2], line_no, "timestamp"), false};
    const auto buy = parse_int<int>(f[3], line_no, "is_buy");
    if (buy != 0 && buy != 1) throw ParseError(line_no, "is_buy must be 0 or 1");
    e.buy = buy == 1;
    raw.push_back(e);
  }
  std::stable_sort(raw.begin(), raw.end(), [](const RawEvent& a, const RawEvent& b) {
    return a.session != b.session ? a.session < b.session : a.timestamp < b.timestamp;
  });
  std::vector<std::int64_t> items;
  items.reserve(raw.size());
  for (const auto& e : raw) items.push_back(e.item);
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  log.id_map = IdMap(std::move(items));
  log.n_items = log.id_map.size();
  log.events.reserve(raw.size());
  for (const auto& e : raw) log.events.push_back({e.session, log.id_map.dense(e.item), e.timestamp, e.buy});
  return log;
}

SessionLog parse_sessions(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open session log: " + path.string());
  return parse_sessions(is);
}

void write_sessions(const std::vector<SessionEvent>& events, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write session log: " + path.string());
  os << kSessionHeader << '\n';
  for (const auto& e : events) os << e.session_id << ',' << e.item_id << ',' << e.timestamp << ',' << (e.is_buy ? 1 : 0) << '\n';
  if (!os) throw IoError("failed writing session log: " + path.string());
}

TransitionBuild build_transitions(std::span<const SessionEvent> events, const TransitionConfig& config) {
  if (config.max_len == 0) throw ConfigError("max_len must be positive");
  TransitionBuild out;
  const std::size_t L = config.max_len;
  std::size_t begin = 0;
  while (begin < events.size()) {
    std::size_t end = begin + 1;
    while (end < events.size() && events[end].session_id == events[begin].session_id) ++end;
    const std::size_t m = end - begin;
    if (m < 2) {
      ++out.dropped_sessions;
      begin = end;
      continue;
    }
    ++out.kept_sessions;
    std::vector<ItemId> items(m);
    for (std::size_t i = 0; i < m; ++i) items[i] = events[begin + i].item_id;
    auto unique_items = std::make_shared<std::vector<ItemId>>(items);
    std::sort(unique_items->begin(), unique_items->end());
    unique_items->erase(std::unique(unique_items->begin(), unique_items->end()), unique_items->end());
    for (std::size_t t = 1; t < m; ++t) {
      const SessionEvent& ev = events[begin + t];
      Transition tr;
      tr.state.assign(items.begin() + static_cast<std::ptrdiff_t>(t > L ? t - L : 0),
                      items.begin() + static_cast<std::ptrdiff_t>(t));
      tr.action = ev.item_id;
      tr.is_buy = ev.is_buy;
      tr.reward = ev.is_buy ? config.r_buy : config.r_click;
      tr.next_state.assign(items.begin() + static_cast<std::ptrdiff_t>(t + 1 > L ? t + 1 - L : 0),
                           items.begin() + static_cast<std::ptrdiff_t>(t + 1));
      tr.done = t + 1 == m;
      tr.session_id = ev.session_id;
      tr.session_items = unique_items;
      out.transitions.push_back(std::move(tr));
    }
    begin = end;
  }
  return out;
}

DatasetSplit split_sessions(std::span<const SessionEvent> events, std::size_t n_items,
                            const std::array<double, 3>& fractions, std::uint64_t seed,
                            const TransitionConfig& config) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(fractions.begin(), fractions.end()) < 0.0) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  // Contiguous [begin, end) runs per session.
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  std::size_t begin = 0;
  while (begin < events.size()) {
    std::size_t end = begin + 1;
    while (end < events.size() && events[end].session_id == events[begin].session_id) ++end;
    runs.emplace_back(begin, end);
    begin = end;
  }
  std::vector<std::size_t> order(runs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const std::size_t n = runs.size();
  std::size_t n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  std::size_t n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);

  DatasetSplit split;
  split.n_items = n_items;
  split.session_counts = {n_train, n_val, n - n_train - n_val};
  auto collect = [&](std::size_t from, std::size_t to) {
    std::vector<std::size_t> picked(order.begin() + static_cast<std::ptrdiff_t>(from),
                                    order.begin() + static_cast<std::ptrdiff_t>(to));
    std::sort(picked.begin(), picked.end());
    std::vector<SessionEvent> part;
    for (std::size_t idx : picked) part.insert(part.end(), events.begin() + static_cast<std::ptrdiff_t>(runs[idx].first),
                                               events.begin() + static_cast<std::ptrdiff_t>(runs[idx].second));
    TransitionBuild built = build_transitions(part, config);
    split.dropped_sessions += built.dropped_sessions;
    return std::move(built.transitions);
  };
  split.train = collect(0, n_train);
  split.validation = collect(n_train, n_train + n_val);
  split.test = collect(n_train + n_val, n);
  return split;
}

std::vector<double> MarkovChain::dense() const {
  std::vector<double> m(n_items * n_items, 0.0);
  for (std::size_t i = 0; i < successors.size(); ++i)
    for (const auto& [to, p] : successors[i]) m[i * n_items + static_cast<std::size_t>(to)] += p;
  return m;
}

void MarkovChain::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write chain: " + path.string());
  os << "from_item,to_item,prob\n";
  for (std::size_t i = 0; i < successors.size(); ++i)
    for (const auto& [to, p] : successors[i]) os << i << ',' << to << ',' << format_double(p) << '\n';
  if (!os) throw IoError("failed writing chain: " + path.string());
}

MarkovChain MarkovChain::load(const std::filesystem::path& path, std::size_t n_items) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open chain: " + path.string());
  MarkovChain chain;
  chain.n_items = n_items;
  chain.successors.resize(n_items);
  std::string line;
  std::getline(is, line);
  strip_cr(line);
  if (line != "from_item,to_item,prob") throw ParseError(1, "chain header must be from_item,to_item,prob");
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 3) throw ParseError(line_no, "expected 3 fields");
    const auto from = parse_int<std::int64_t>(f[0], line_no, "from_item");
    const auto to = parse_int<std::int64_t>(f[1], line_no, "to_item");
    if (from < 0 || to < 0 || static_cast<std::size_t>(from) >= n_items || static_cast<std::size_t>(to) >= n_items) {
      throw ParseError(line_no, "chain item outside [0, " + std::to_string(n_items) + ")");
    }
    chain.successors[static_cast<std::size_t>(from)].emplace_back(static_cast<ItemId>(to),
                                                                  parse_double(f[2], line_no, "prob"));
  }
  return chain;
}

SyntheticDataset generate_synthetic(const SyntheticParams& params) {
  const std::size_t n = params.n_items;
  if (n < 2) throw ConfigError("synthetic data needs at least 2 items");
  if (params.horizon < 1) throw ConfigError("horizon must be positive");
  if (!(params.dominance > 0.0 && params.dominance <= 1.0)) throw ConfigError("dominance must lie in (0, 1]");
  if (!(params.buy_prob >= 0.0 && params.buy_prob <= 1.0)) throw ConfigError("buy_prob must lie in [0, 1]");

  CounterRng chain_rng = CounterRng(params.seed).fork(1);
  CounterRng session_rng = CounterRng(params.seed).fork(2);

  SyntheticDataset out;
  out.chain.n_items = n;
  out.chain.successors.resize(n);
  const std::size_t extras = params.dominance < 1.0 ? std::min(params.extra_successors, n - 2) : 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<ItemId> picked;
    while (picked.size() < 1 + extras) {
      const auto cand = static_cast<ItemId>(chain_rng.below(n));
      if (static_cast<std::size_t>(cand) == i || std::find(picked.begin(), picked.end(), cand) != picked.end()) continue;
      picked.push_back(cand);
    }
    auto& row = out.chain.successors[i];
    row.emplace_back(picked[0], extras > 0 ? params.dominance : 1.0);
    for (std::size_t e = 1; e < picked.size(); ++e) {
      row.emplace_back(picked[e], (1.0 - params.dominance) / static_cast<double>(extras));
    }
  }

  out.events.reserve(params.n_sessions * params.horizon);
  std::int64_t clock = 0;
  for (std::size_t s = 0; s < params.n_sessions; ++s) {
    auto item = static_cast<ItemId>(session_rng.below(n));
    for (std::size_t t = 0; t < params.horizon; ++t) {
      if (t > 0) {
        const auto& row = out.chain.successors[static_cast<std::size_t>(item)];
        const double u = session_rng.uniform();
        double acc = 0.0;
        ItemId next = row.back().first;
        for (const auto& [to, p] : row) {
          acc += p;
          if (u < acc) {
            next = to;
            break;
          }
        }
        item = next;
      }
      out.events.push_back({static_cast<std::int64_t>(s), item, clock++, session_rng.bernoulli(params.buy_prob)});
    }
  }
  return out;
}

std::uint64_t file_fingerprint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for fingerprint: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 15];
  while (is) {
    is.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace seqrec
