#include "seqrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

void require_distinct(std::span<const ItemId> ranked) {
  std::vector<ItemId> sorted(ranked.begin(), ranked.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractError("ranked list contains duplicate ids");
  }
}

std::size_t index_of(const std::vector<int>& ks, int k) {
  const auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw ContractError("cutoff @" + std::to_string(k) + " was not evaluated");
  return static_cast<std::size_t>(it - ks.begin());
}

struct Moments {
  double sum = 0.0, sum_sq = 0.0, min = std::numeric_limits<double>::infinity(),
         max = -std::numeric_limits<double>::infinity();
  std::size_t count = 0;

  void add(double v) {
    sum += v;
    sum_sq += v * v;
    min = std::min(min, v);
    max = std::max(max, v);
    ++count;
  }
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
  double stddev() const {
    if (count == 0) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - m * m));
  }
};

// Scores per transition, computed in fixed-size batches without a tape.
template <class Fn>
void for_each_scored(const EncoderParams& params, std::span<const Transition> transitions, std::size_t batch_size,
                     Fn&& fn) {
  const auto L = static_cast<std::size_t>(params.config.max_len);
  for (std::size_t start = 0; start < transitions.size(); start += batch_size) {
    const std::size_t end = std::min(transitions.size(), start + batch_size);
    std::vector<std::vector<ItemId>> states;
    states.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) states.push_back(transitions[i].state);
    const SequenceBatch batch = SequenceBatch::from_sequences(states, L, params.config.pad_id());
    const Tensor s = encode(params, batch);
    fn(start, end, s);
  }
}

// Up to k negatives; small catalogues yield whatever the complement holds.
std::vector<ItemId> diagnostic_negatives(const NegativeSampler& sampler, const Transition& tr, CounterRng& rng) {
  std::span<const ItemId> seen;
  if (tr.session_items) seen = *tr.session_items;
  const std::size_t n = sampler.n_items();
  const auto in_range = static_cast<std::size_t>(
      std::count_if(seen.begin(), seen.end(), [n](ItemId a) { return a >= 0 && static_cast<std::size_t>(a) < n; }));
  const std::size_t complement = n - std::min(n, in_range);
  if (complement < sampler.k()) return sample_negatives(seen, complement, n, rng);
  return sampler.sample(seen, rng);
}

}  // namespace

int hr_at_k(std::span<const ItemId> ranked, ItemId truth) {
  require_distinct(ranked);
  return std::find(ranked.begin(), ranked.end(), truth) != ranked.end() ? 1 : 0;
}

double ndcg_at_k(std::span<const ItemId> ranked, ItemId truth) {
  require_distinct(ranked);
  const auto it = std::find(ranked.begin(), ranked.end(), truth);
  if (it == ranked.end()) return 0.0;
  const auto rank = static_cast<double>(it - ranked.begin() + 1);
  return 1.0 / std::log2(1.0 + rank);
}

double reward_at_k(std::span<const ItemId> ranked, ItemId truth, double reward_of_truth, std::size_t k) {
  const auto head = ranked.first(std::min(k, ranked.size()));
  return hr_at_k(head, truth) ? reward_of_truth : 0.0;
}

std::vector<ItemId> top_k(std::span<const double> scores, std::size_t k) {
  k = std::min(k, scores.size());
  std::vector<ItemId> ids(scores.size());
  std::iota(ids.begin(), ids.end(), ItemId{0});
  auto key = [&](ItemId id) {
    const double s = scores[static_cast<std::size_t>(id)];
    return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](ItemId a, ItemId b) {
    const double ka = key(a), kb = key(b);
    return ka != kb ? ka > kb : a < b;
  });
  ids.resize(k);
  return ids;
}

double MetricsRecord::hr_at(int k, const SliceMetrics& slice) const { return slice.hr.at(index_of(ks, k)); }
double MetricsRecord::ndcg_at(int k, const SliceMetrics& slice) const { return slice.ndcg.at(index_of(ks, k)); }
double MetricsRecord::reward_at(int k) const { return reward.at(index_of(ks, k)); }

MetricsRecord evaluate(const EncoderParams& params, std::span<const Transition> transitions, std::span<const int> ks,
                       const EvalOptions& options) {
  if (transitions.empty()) throw ContractError("evaluate: empty transition set");
  if (ks.empty()) throw ContractError("evaluate: no cutoffs requested");
  MetricsRecord rec;
  rec.ks.assign(ks.begin(), ks.end());
  for (int k : rec.ks) {
    if (k <= 0) throw ContractError("evaluate: cutoffs must be positive");
  }
  const auto kmax = static_cast<std::size_t>(*std::max_element(rec.ks.begin(), rec.ks.end()));
  const std::size_t nk = rec.ks.size();
  for (SliceMetrics* s : {&rec.all, &rec.purchase, &rec.click}) {
    s->hr.assign(nk, 0.0);
    s->ndcg.assign(nk, 0.0);
  }
  rec.reward.assign(nk, 0.0);

  const auto n = static_cast<std::size_t>(params.config.vocab_size);
  const NegativeSampler sampler(n, options.q_negatives);
  CounterRng rng(options.seed);
  Moments pos, negm;
  double abs_total = 0.0;
  std::size_t abs_count = 0;

  for_each_scored(params, transitions, std::max<std::size_t>(options.batch_size, 1),
                  [&](std::size_t start, std::size_t end, const Tensor& states) {
    const Tensor scores = logits(params, states);
    const Tensor q = q_values(params, states);
    const auto sd = options.rank_by_q ? q.data() : scores.data();
    const auto qd = q.data();
    for (std::size_t i = start; i < end; ++i) {
      const Transition& tr = transitions[i];
      const std::size_t row = i - start;
      const auto ranked = top_k(sd.subspan(row * n, n), kmax);
      for (SliceMetrics* s : {&rec.all, tr.is_buy ? &rec.purchase : &rec.click}) {
        ++s->count;
        for (std::size_t j = 0; j < nk; ++j) {
          const auto head = std::span<const ItemId>(ranked).first(std::min<std::size_t>(rec.ks[j], ranked.size()));
          s->hr[j] += hr_at_k(head, tr.action);
          s->ndcg[j] += ndcg_at_k(head, tr.action);
        }
      }
      for (std::size_t j = 0; j < nk; ++j) {
        rec.reward[j] += reward_at_k(ranked, tr.action, tr.reward, static_cast<std::size_t>(rec.ks[j]));
      }
      const auto qrow = qd.subspan(row * n, n);
      pos.add(qrow[static_cast<std::size_t>(tr.action)]);
      if (options.q_negatives > 0) {
        for (ItemId a : diagnostic_negatives(sampler, tr, rng)) negm.add(qrow[static_cast<std::size_t>(a)]);
      }
      for (double v : qrow) abs_total += std::abs(v);
      abs_count += n;
    }
  });

  for (SliceMetrics* s : {&rec.all, &rec.purchase, &rec.click}) {
    if (s->count == 0) continue;
    for (std::size_t j = 0; j < nk; ++j) {
      s->hr[j] /= static_cast<double>(s->count);
      s->ndcg[j] /= static_cast<double>(s->count);
    }
  }
  rec.q_mean_pos = pos.mean();
  rec.q_std_pos = pos.stddev();
  rec.q_mean_neg = negm.mean();
  rec.q_std_neg = negm.stddev();
  rec.q_abs_mean = abs_count ? abs_total / static_cast<double>(abs_count) : 0.0;
  return rec;
}

QDistributionReport q_distribution_report(const EncoderParams& params, std::span<const Transition> transitions,
                                          const NegativeSampler& sampler, std::size_t bins, std::uint64_t seed) {
  if (bins == 0) throw ContractError("q_distribution_report: bins must be positive");
  const auto n = static_cast<std::size_t>(params.config.vocab_size);
  std::vector<double> pos_values, neg_values;
  CounterRng rng(seed);
  for_each_scored(params, transitions, 256, [&](std::size_t start, std::size_t end, const Tensor& states) {
    const Tensor q = q_values(params, states);
    const auto qd = q.data();
    for (std::size_t i = start; i < end; ++i) {
      const Transition& tr = transitions[i];
      const auto qrow = qd.subspan((i - start) * n, n);
      pos_values.push_back(qrow[static_cast<std::size_t>(tr.action)]);
      for (ItemId a : diagnostic_negatives(sampler, tr, rng)) neg_values.push_back(qrow[static_cast<std::size_t>(a)]);
    }
  });

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* values : {&pos_values, &neg_values})
    for (double v : *values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(lo < hi)) {
    const double centre = std::isfinite(lo) ? lo : 0.0;
    lo = centre - 0.5;
    hi = centre + 0.5;
  }
  QDistributionReport report;
  report.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) report.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  auto fill = [&](const std::vector<double>& values, QGroupStats& g) {
    g.counts.assign(bins, 0);
    Moments m;
    for (double v : values) {
      auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      ++g.counts[std::min(b, bins - 1)];
      m.add(v);
    }
    g.total = values.size();
    g.mean = m.mean();
    g.std = m.stddev();
    g.min = values.empty() ? 0.0 : m.min;
    g.max = values.empty() ? 0.0 : m.max;
  };
  fill(pos_values, report.positive);
  fill(neg_values, report.negative);
  return report;
}

void write_q_report_csv(const QDistributionReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write Q report: " + path.string());
  os.precision(10);
  os << "group,bin_low,bin_high,count\n";
  const std::size_t bins = report.edges.size() - 1;
  for (const auto& [name, g] : {std::pair{"positive", &report.positive}, std::pair{"negative", &report.negative}}) {
    for (std::size_t b = 0; b < bins; ++b) {
      os << name << ',' << report.edges[b] << ',' << report.edges[b + 1] << ',' << g->counts[b] << '\n';
    }
  }
  for (const auto& [name, g] : {std::pair{"positive", &report.positive}, std::pair{"negative", &report.negative}}) {
    os << name << "_moments," << g->mean << ',' << g->std << ',' << g->total << '\n';
  }
  if (!os) throw IoError("failed writing Q report: " + path.string());
}

}  // namespace seqrec
