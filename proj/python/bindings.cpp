#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "seqrec/augmentation.hpp"
#include "seqrec/config.hpp"
#include "seqrec/data.hpp"
#include "seqrec/encoder.hpp"
#include "seqrec/errors.hpp"
#include "seqrec/eval.hpp"
#include "seqrec/objectives.hpp"
#include "seqrec/sampler.hpp"
#include "seqrec/trainer.hpp"
#include "seqrec/version.hpp"

namespace py = pybind11;
using namespace seqrec;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IdArray = py::array_t<ItemId, py::array::c_style | py::array::forcecast>;

Tensor to_parameter(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::parameter(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t, bool grad = false) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  const auto src = grad ? t.grad() : t.data();
  if (grad && src.empty()) {
    std::fill(out.mutable_data(), out.mutable_data() + out.size(), 0.0);
  } else {
    std::copy(src.begin(), src.end(), out.mutable_data());
  }
  return out;
}

std::vector<ItemId> to_ids(const IdArray& a) { return {a.data(), a.data() + a.size()}; }

// Evaluates `fn` on a tape and returns (value, d value / d x).
template <class Fn>
py::tuple value_and_grad(const Array& x, Fn&& fn) {
  GradientTape tape;
  TapeScope scope(tape);
  Tensor p = to_parameter(x);
  const Tensor loss = fn(p);
  tape.backward(loss);
  return py::make_tuple(loss.item(), to_array(p, true));
}

py::dict metrics_dict(const MetricsRecord& m) {
  py::dict d;
  d["ks"] = m.ks;
  for (const auto& [name, s] :
       {std::pair{"all", &m.all}, std::pair{"purchase", &m.purchase}, std::pair{"click", &m.click}}) {
    py::dict slice;
    slice["count"] = s->count;
    slice["hr"] = s->hr;
    slice["ndcg"] = s->ndcg;
    d[name] = slice;
  }
  d["reward"] = m.reward;
  d["q_mean_pos"] = m.q_mean_pos;
  d["q_std_pos"] = m.q_std_pos;
  d["q_mean_neg"] = m.q_mean_neg;
  d["q_std_neg"] = m.q_std_neg;
  d["q_abs_mean"] = m.q_abs_mean;
  return d;
}

SequenceBatch to_batch(const EncoderParams& p, const std::vector<std::vector<ItemId>>& seqs) {
  return SequenceBatch::from_sequences(seqs, static_cast<std::size_t>(p.config.max_len), p.config.pad_id());
}

DatasetSplit load_dataset(const std::filesystem::path& data, const TrainConfig& config, std::uint64_t split_seed) {
  const SessionLog log = parse_sessions(data);
  return split_sessions(log.events, log.n_items, {0.8, 0.1, 0.1}, split_seed, config.transition_config());
}

}  // namespace

PYBIND11_MODULE(_seqrec, m) {
  m.doc() = "Sequential recommendation with conservative Q-learning and contrastive objectives";
  m.attr("__version__") = kVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<CompatibilityError>(m, "CompatibilityError", PyExc_RuntimeError);
  py::register_exception<InfeasibleSamplingError>(m, "InfeasibleSamplingError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("hr_at_k", [](const std::vector<ItemId>& ranked, ItemId truth) { return hr_at_k(ranked, truth); },
        py::arg("ranked"), py::arg("truth"));
  m.def("ndcg_at_k", [](const std::vector<ItemId>& ranked, ItemId truth) { return ndcg_at_k(ranked, truth); },
        py::arg("ranked"), py::arg("truth"));
  m.def("reward_at_k",
        [](const std::vector<ItemId>& ranked, ItemId truth, double reward, std::size_t k) {
          return reward_at_k(ranked, truth, reward, k);
        },
        py::arg("ranked"), py::arg("truth"), py::arg("reward"), py::arg("k"));
  m.def("top_k", [](const Array& scores, std::size_t k) {
    return top_k(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), k);
  }, py::arg("scores"), py::arg("k"));

  m.def("cross_entropy", [](const Array& logits, const IdArray& targets) {
    const auto t = to_ids(targets);
    return value_and_grad(logits, [&](const Tensor& x) { return cross_entropy(x, t); });
  }, py::arg("logits"), py::arg("targets"), "Returns (loss, d loss / d logits).");
  m.def("td_q_loss",
        [](const Array& q, const IdArray& actions, const std::vector<double>& rewards, const Array& q_next,
           const std::vector<std::uint8_t>& done, double gamma) {
          const auto a = to_ids(actions);
          const Tensor next = to_tensor(q_next);
          return value_and_grad(q, [&](const Tensor& x) { return td_q_loss(x, a, rewards, next, done, gamma); });
        },
        py::arg("q"), py::arg("actions"), py::arg("rewards"), py::arg("q_next"), py::arg("done"), py::arg("gamma"),
        "Returns (loss, d loss / d q).");
  m.def("cql_penalty",
        [](const Array& q, const IdArray& positives, const std::vector<std::vector<ItemId>>& negatives,
           double temperature) {
          const auto p = to_ids(positives);
          return value_and_grad(q, [&](const Tensor& x) { return cql_penalty(x, p, negatives, temperature); });
        },
        py::arg("q"), py::arg("positives"), py::arg("negatives"), py::arg("temperature") = 1.0,
        "Returns (penalty, d penalty / d q).");
  m.def("info_nce",
        [](const Array& anchors, const Array& positives, double temperature) {
          const Tensor pos = to_tensor(positives);
          return value_and_grad(anchors, [&](const Tensor& x) { return info_nce(x, pos, temperature); });
        },
        py::arg("anchors"), py::arg("positives"), py::arg("temperature") = 1.0,
        "Returns (loss, d loss / d anchors).");

  m.def("sample_negatives",
        [](const std::vector<ItemId>& user_items, std::size_t k, std::size_t n, std::uint64_t seed) {
          CounterRng rng(seed);
          return sample_negatives(user_items, k, n, rng);
        },
        py::arg("user_items"), py::arg("k"), py::arg("n"), py::arg("seed") = 0);
  m.def("augment",
        [](const std::vector<ItemId>& seq, const std::string& kind, double ratio, std::uint64_t seed, ItemId mask_id) {
          AugmentationSpec spec{parse_augmentation_kind(kind), ratio, seed};
          spec.validate();
          CounterRng rng(seed);
          return augment(seq, spec, rng, mask_id);
        },
        py::arg("seq"), py::arg("kind"), py::arg("ratio") = 0.5, py::arg("seed") = 0, py::arg("mask_id") = -1);

  m.def("generate_synthetic",
        [](std::size_t items, std::size_t sessions, std::size_t horizon, double buy_prob, double dominance,
           std::uint64_t seed, const std::filesystem::path& out) {
          SyntheticParams p;
          p.n_items = items;
          p.n_sessions = sessions;
          p.horizon = horizon;
          p.buy_prob = buy_prob;
          p.dominance = dominance;
          p.seed = seed;
          const SyntheticDataset ds = generate_synthetic(p);
          write_sessions(ds.events, out);
          ds.chain.save(out.string() + ".chain.csv");
          return ds.events.size();
        },
        py::arg("items") = 200, py::arg("sessions") = 2000, py::arg("horizon") = 12, py::arg("buy_prob") = 0.2,
        py::arg("dominance") = 0.6, py::arg("seed") = 0, py::arg("out"));
  m.def("load_sessions", [](const std::filesystem::path& path) {
    const SessionLog log = parse_sessions(path);
    py::dict d;
    std::vector<std::int64_t> sessions, timestamps;
    std::vector<ItemId> items;
    std::vector<bool> buys;
    for (const auto& e : log.events) {
      sessions.push_back(e.session_id);
      items.push_back(e.item_id);
      timestamps.push_back(e.timestamp);
      buys.push_back(e.is_buy);
    }
    d["session_id"] = sessions;
    d["item_id"] = items;
    d["timestamp"] = timestamps;
    d["is_buy"] = buys;
    d["n_items"] = log.n_items;
    return d;
  }, py::arg("path"));

  m.def("normalize_config", [](const std::string& text) { return config_to_json(parse_config(text)); },
        py::arg("json_text"), "Parses a JSON config and returns it with every key filled in.");

  py::class_<EncoderParams>(m, "Model")
      .def(py::init([](int items, int hidden, int blocks, int heads, int max_len, double dropout, std::uint64_t seed) {
             EncoderConfig c{items, hidden, blocks, heads, max_len, dropout};
             return EncoderParams::init(c, seed);
           }),
           py::arg("items"), py::arg("hidden_size") = 64, py::arg("num_blocks") = 2, py::arg("num_heads") = 1,
           py::arg("max_len") = 10, py::arg("dropout") = 0.1, py::arg("seed") = 0)
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const EncoderParams& p, const std::filesystem::path& path) { save_checkpoint(p, path); },
           py::arg("path"))
      .def_property_readonly("items", [](const EncoderParams& p) { return p.config.vocab_size; })
      .def_property_readonly("hidden_size", [](const EncoderParams& p) { return p.config.hidden_size; })
      .def_property_readonly("max_len", [](const EncoderParams& p) { return p.config.max_len; })
      .def("encode", [](const EncoderParams& p, const std::vector<std::vector<ItemId>>& seqs) {
        return to_array(encode(p, to_batch(p, seqs)));
      }, py::arg("sequences"))
      .def("logits", [](const EncoderParams& p, const std::vector<std::vector<ItemId>>& seqs) {
        return to_array(logits(p, encode(p, to_batch(p, seqs))));
      }, py::arg("sequences"))
      .def("q_values", [](const EncoderParams& p, const std::vector<std::vector<ItemId>>& seqs) {
        return to_array(q_values(p, encode(p, to_batch(p, seqs))));
      }, py::arg("sequences"))
      .def("weights_hash", [](const EncoderParams& p) { return weights_hash(p); });

  m.def("evaluate",
        [](const EncoderParams& model, const std::filesystem::path& data, const std::string& split,
           const std::vector<int>& ks, const std::string& config_json, std::uint64_t split_seed) {
          TrainConfig config = config_json.empty() ? TrainConfig{} : parse_config(config_json);
          config.max_len = model.config.max_len;
          const DatasetSplit ds = load_dataset(data, config, split_seed);
          if (static_cast<std::size_t>(model.config.vocab_size) != ds.n_items) {
            throw CompatibilityError("model vocabulary does not match the data");
          }
          if (split != "validation" && split != "test") throw ConfigError("split must be validation or test");
          const auto& rows = split == "validation" ? ds.validation : ds.test;
          EvalOptions opts;
          opts.rank_by_q = config.rank_by_q;
          return metrics_dict(evaluate(model, rows, ks, opts));
        },
        py::arg("model"), py::arg("data"), py::arg("split") = "test", py::arg("ks") = std::vector<int>{5, 10, 20},
        py::arg("config_json") = "", py::arg("split_seed") = 0);

  m.def("train",
        [](const std::filesystem::path& data, const std::string& config_json,
           std::optional<std::filesystem::path> out_dir, std::uint64_t split_seed) {
          const TrainConfig config = parse_config(config_json);
          const DatasetSplit ds = load_dataset(data, config, split_seed);
          RunOptions opts;
          opts.out_dir = std::move(out_dir);
          std::vector<SeedResult> results;
          {
            py::gil_scoped_release release;
            results = run_training(ds, config, opts);
          }
          py::list out;
          for (const auto& r : results) {
            py::dict d;
            d["seed"] = r.trace.seed;
            d["best_step"] = r.best_step;
            d["best_validation_hr10"] = r.best_validation_hr10;
            d["divergence_step"] = r.trace.divergence_step;
            py::list rows;
            for (const auto& row : r.trace.evals) rows.append(trace_row_csv(row));
            d["trace"] = rows;
            if (!r.top_test.empty()) d["test"] = metrics_dict(average_records(r.top_test));
            d["model"] = r.best_model;
            out.append(d);
          }
          return out;
        },
        py::arg("data"), py::arg("config_json"), py::arg("out_dir") = py::none(), py::arg("split_seed") = 0,
        "Trains one model per configured seed; returns per-seed results with trace rows as CSV strings.");
  m.attr("TRACE_HEADER") = kTraceHeader;
}
