#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <glob.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqrec/config.hpp"
#include "seqrec/data.hpp"
#include "seqrec/encoder.hpp"
#include "seqrec/errors.hpp"
#include "seqrec/eval.hpp"
#include "seqrec/sampler.hpp"
#include "seqrec/svg.hpp"
#include "seqrec/trainer.hpp"
#include "seqrec/version.hpp"

namespace fs = std::filesystem;
using namespace seqrec;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

constexpr std::array<double, 3> kSplitFractions{0.8, 0.1, 0.1};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path.string());
}

std::size_t thread_cap() {
  if (const char* env = std::getenv("SEQREC_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SEQREC_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<int> parse_cutoffs(const std::string& text) {
  std::vector<int> ks;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const int k = std::stoi(tok, &used);
      if (used != tok.size() || k <= 0) throw std::invalid_argument(tok);
      ks.push_back(k);
    } catch (const std::exception&) {
      throw UsageError("--k expects positive integers separated by commas, got '" + text + "'");
    }
  }
  if (ks.empty()) throw UsageError("--k must list at least one cutoff");
  return ks;
}

// Metric names and values in a fixed order, shared by the CSV header and rows.
std::vector<std::pair<std::string, double>> metric_columns(const MetricsRecord& m) {
  std::vector<std::pair<std::string, double>> cols;
  for (const auto& [name, slice] :
       {std::pair{"all", &m.all}, std::pair{"purchase", &m.purchase}, std::pair{"click", &m.click}}) {
    cols.emplace_back(std::string(name) + "_count", static_cast<double>(slice->count));
    for (std::size_t j = 0; j < m.ks.size(); ++j) {
      cols.emplace_back(std::string(name) + "_hr" + std::to_string(m.ks[j]), slice->hr[j]);
      cols.emplace_back(std::string(name) + "_ndcg" + std::to_string(m.ks[j]), slice->ndcg[j]);
    }
  }
  for (std::size_t j = 0; j < m.ks.size(); ++j) cols.emplace_back("reward" + std::to_string(m.ks[j]), m.reward[j]);
  cols.emplace_back("q_mean_pos", m.q_mean_pos);
  cols.emplace_back("q_std_pos", m.q_std_pos);
  cols.emplace_back("q_mean_neg", m.q_mean_neg);
  cols.emplace_back("q_std_neg", m.q_std_neg);
  return cols;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void print_table(const MetricsRecord& m) {
  std::printf("%-10s %8s", "slice", "count");
  for (int k : m.ks) std::printf("   HR@%-4d NDCG@%-4d", k, k);
  std::printf("\n");
  for (const auto& [name, s] :
       {std::pair{"all", &m.all}, std::pair{"purchase", &m.purchase}, std::pair{"click", &m.click}}) {
    std::printf("%-10s %8zu", name, s->count);
    for (std::size_t j = 0; j < m.ks.size(); ++j) std::printf("   %.4f  %.4f   ", s->hr[j], s->ndcg[j]);
    std::printf("\n");
  }
  for (std::size_t j = 0; j < m.ks.size(); ++j) std::printf("Reward@%d: %.4f\n", m.ks[j], m.reward[j]);
  std::printf("Q mean (logged / negative): %.4f / %.4f\n", m.q_mean_pos, m.q_mean_neg);
}

struct LoadedSplit {
  DatasetSplit split;
  SessionLog log;
};

LoadedSplit load_split(const fs::path& data, const TransitionConfig& tc, std::uint64_t split_seed) {
  require_file(data, "data file");
  LoadedSplit out;
  out.log = parse_sessions(data);
  out.split = split_sessions(out.log.events, out.log.n_items, kSplitFractions, split_seed, tc);
  return out;
}

const std::vector<Transition>& pick_split(const DatasetSplit& split, const std::string& name) {
  if (name == "validation") return split.validation;
  if (name == "test") return split.test;
  throw UsageError("--split must be 'validation' or 'test', got '" + name + "'");
}

EncoderParams load_compatible(const fs::path& checkpoint, std::size_t n_items) {
  require_file(checkpoint, "checkpoint");
  EncoderParams params = load_checkpoint(checkpoint);
  if (static_cast<std::size_t>(params.config.vocab_size) != n_items) {
    throw CompatibilityError("checkpoint vocabulary has " + std::to_string(params.config.vocab_size) +
                             " items but the data has " + std::to_string(n_items));
  }
  return params;
}

struct TrainArgs {
  std::string config, data, out;
  bool force = false;
  std::uint64_t split_seed = 0;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  require_file(a.config, "config file");
  const TrainConfig config = load_config(a.config);
  const fs::path out = a.out;
  if (fs::exists(out) && !fs::is_empty(out) && !a.force) {
    throw UsageError("output directory " + out.string() + " is not empty; pass --force to overwrite");
  }
  const LoadedSplit data = load_split(a.data, config.transition_config(), a.split_seed);
  fs::create_directories(out);

  nlohmann::json manifest = {
      {"tool", "seqrec"},
      {"tool_version", kVersion},
      {"created_at", utc_now()},
      {"config", nlohmann::json::parse(config_to_json(config))},
      {"data", {{"path", a.data}, {"fingerprint", hex64(file_fingerprint(a.data))}, {"n_items", data.log.n_items}}},
      {"split",
       {{"seed", a.split_seed},
        {"fractions", kSplitFractions},
        {"sessions", data.split.session_counts},
        {"transitions", {data.split.train.size(), data.split.validation.size(), data.split.test.size()}}}},
      {"seeds", config.seeds},
      {"output_dir", out.string()},
  };
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  data.log.id_map.save(out / "id_map.csv");

  RunOptions opts;
  opts.out_dir = out;
  opts.max_parallel = thread_cap();
  if (!a.quiet) opts.log = [](const std::string& msg) { std::cerr << msg << '\n'; };
  const auto results = run_training(data.split, config, opts);

  std::vector<MetricsRecord> per_seed;
  for (const auto& r : results) {
    if (!r.top_test.empty()) per_seed.push_back(average_records(r.top_test));
  }
  std::ostringstream summary;
  summary << "metric,mean,std,seeds\n";
  if (!per_seed.empty()) {
    const auto names = metric_columns(per_seed.front());
    for (std::size_t c = 0; c < names.size(); ++c) {
      double mean = 0.0, sq = 0.0;
      for (const auto& m : per_seed) mean += metric_columns(m)[c].second;
      mean /= static_cast<double>(per_seed.size());
      for (const auto& m : per_seed) sq += std::pow(metric_columns(m)[c].second - mean, 2);
      const double std = std::sqrt(sq / static_cast<double>(per_seed.size()));
      summary << names[c].first << ',' << fmt(mean) << ',' << fmt(std) << ',' << per_seed.size() << '\n';
    }
  }
  std::size_t diverged = 0;
  for (const auto& r : results) diverged += r.trace.divergence_step.has_value();
  summary << "diverged_seeds," << diverged << ",0," << results.size() << '\n';
  write_text(out / "summary.csv", summary.str());
  std::cout << summary.str();
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data, split = "test", k = "5,10,20", out, config;
  std::uint64_t split_seed = 0;
  bool rank_by_q = false;
};

TrainConfig optional_config(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  require_file(path, "config file");
  return load_config(path);
}

int cmd_evaluate(const EvalArgs& a) {
  const std::vector<int> ks = parse_cutoffs(a.k);
  require_file(a.checkpoint, "checkpoint");
  TrainConfig config = optional_config(a.config);
  const EncoderParams probe = load_checkpoint(a.checkpoint);
  config.max_len = probe.config.max_len;
  const LoadedSplit data = load_split(a.data, config.transition_config(), a.split_seed);
  const EncoderParams params = load_compatible(a.checkpoint, data.log.n_items);
  const auto& transitions = pick_split(data.split, a.split);
  EvalOptions opts;
  opts.rank_by_q = a.rank_by_q || config.rank_by_q;
  opts.q_negatives = config.eval_negatives;
  const MetricsRecord m = evaluate(params, transitions, ks, opts);
  print_table(m);

  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).replace_extension("." + a.split + ".csv") : fs::path(a.out);
  std::ostringstream csv;
  const auto cols = metric_columns(m);
  csv << "checkpoint,split";
  for (const auto& [name, v] : cols) csv << ',' << name;
  csv << '\n' << fs::path(a.checkpoint).filename().string() << ',' << a.split;
  for (const auto& [name, v] : cols) csv << ',' << fmt(v);
  csv << '\n';
  write_text(out, csv.str());
  std::cout << "wrote " << out.string() << '\n';
  return kOk;
}

struct DiagnoseArgs {
  std::string checkpoint, data, split = "test", out, config;
  std::size_t bins = 20;
  std::size_t negatives = 10;
  std::uint64_t split_seed = 0, seed = 0;
};

int cmd_diagnose(const DiagnoseArgs& a) {
  if (a.bins == 0) throw UsageError("--bins must be positive");
  require_file(a.checkpoint, "checkpoint");
  TrainConfig config = optional_config(a.config);
  config.max_len = load_checkpoint(a.checkpoint).config.max_len;
  const LoadedSplit data = load_split(a.data, config.transition_config(), a.split_seed);
  const EncoderParams params = load_compatible(a.checkpoint, data.log.n_items);
  const auto& transitions = pick_split(data.split, a.split);
  const NegativeSampler sampler(data.log.n_items, a.negatives);
  const QDistributionReport report = q_distribution_report(params, transitions, sampler, a.bins, a.seed);

  const fs::path prefix = a.out.empty() ? fs::path(fs::path(a.checkpoint).replace_extension("").string() + "_qdist") : fs::path(a.out);
  const fs::path csv = prefix.string() + ".csv", svg = prefix.string() + ".svg";
  write_q_report_csv(report, csv);
  write_text(svg, q_histogram_svg(report, "Q values: logged vs negative actions"));
  std::printf("logged actions:   n=%zu mean=%.4f std=%.4f\n", report.positive.total, report.positive.mean,
              report.positive.std);
  std::printf("negative actions: n=%zu mean=%.4f std=%.4f\n", report.negative.total, report.negative.mean,
              report.negative.std);
  std::cout << "wrote " << csv.string() << " and " << svg.string() << '\n';
  return kOk;
}

int cmd_synth(const SyntheticParams& p, const std::string& out) {
  const SyntheticDataset ds = generate_synthetic(p);
  const fs::path path = out;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  write_sessions(ds.events, path);
  const fs::path chain = path.string() + ".chain.csv";
  ds.chain.save(chain);
  std::cout << "wrote " << ds.events.size() << " events to " << path.string() << " and chain to " << chain.string()
            << '\n';
  return kOk;
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<fs::path> paths;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) paths.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  return paths;
}

int cmd_plot(const std::vector<std::string>& patterns, const std::string& out, const std::string& title) {
  std::vector<fs::path> files;
  for (const auto& p : patterns) {
    for (auto& f : expand_glob(p)) files.push_back(std::move(f));
  }
  if (files.empty()) throw UsageError("no trace files matched");
  std::vector<Curve> curves;
  for (const auto& f : files) {
    const TraceCurve tc = read_trace_curve(f);
    curves.push_back(Curve{f.stem().string(), tc.steps, tc.hr10});
  }
  write_text(out, line_chart_svg(curves, title, "training step", "HR@10"));
  std::cout << "plotted " << curves.size() << " trace(s) to " << out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential recommendation with conservative Q-learning and contrastive objectives"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train one model per seed and write traces, checkpoints and a summary");
  train_cmd->add_option("--config", train.config, "JSON config")->required();
  train_cmd->add_option("--data", train.data, "Session CSV")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_flag("--force", train.force, "Write into a non-empty output directory");
  train_cmd->add_option("--split-seed", train.split_seed, "Seed of the session split");
  train_cmd->add_flag("--quiet", train.quiet, "Suppress progress lines");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a data split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--data", ev.data)->required();
  eval_cmd->add_option("--split", ev.split, "validation or test")->capture_default_str();
  eval_cmd->add_option("--k", ev.k, "Comma-separated cutoffs")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Metrics CSV path");
  eval_cmd->add_option("--config", ev.config, "Config supplying rewards and evaluation options");
  eval_cmd->add_option("--split-seed", ev.split_seed);
  eval_cmd->add_flag("--rank-by-q", ev.rank_by_q, "Rank by Q-values instead of logits");

  DiagnoseArgs dg;
  auto* diag_cmd = app.add_subcommand("diagnose", "Histogram Q-values of logged versus negative actions");
  diag_cmd->add_option("--checkpoint", dg.checkpoint)->required();
  diag_cmd->add_option("--data", dg.data)->required();
  diag_cmd->add_option("--split", dg.split)->capture_default_str();
  diag_cmd->add_option("--bins", dg.bins)->capture_default_str();
  diag_cmd->add_option("--negatives", dg.negatives, "Negative actions per transition")->capture_default_str();
  diag_cmd->add_option("--out", dg.out, "Output prefix for .csv and .svg");
  diag_cmd->add_option("--config", dg.config);
  diag_cmd->add_option("--split-seed", dg.split_seed);
  diag_cmd->add_option("--seed", dg.seed, "Seed of the negative sampler");

  SyntheticParams sp;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate sessions from a planted Markov chain");
  synth_cmd->add_option("--items", sp.n_items)->capture_default_str();
  synth_cmd->add_option("--sessions", sp.n_sessions)->capture_default_str();
  synth_cmd->add_option("--horizon", sp.horizon)->capture_default_str();
  synth_cmd->add_option("--buy-prob", sp.buy_prob)->capture_default_str();
  synth_cmd->add_option("--dominance", sp.dominance)->capture_default_str();
  synth_cmd->add_option("--extra-successors", sp.extra_successors)->capture_default_str();
  synth_cmd->add_option("--seed", sp.seed)->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Session CSV; the chain goes to <out>.chain.csv")->required();

  std::vector<std::string> patterns;
  std::string plot_out, plot_title = "HR@10 across seeds";
  auto* plot_cmd = app.add_subcommand("plot", "Draw HR@10 curves from trace files");
  plot_cmd->add_option("--traces", patterns, "Trace files or glob patterns")->required();
  plot_cmd->add_option("--out", plot_out, "SVG path")->required();
  plot_cmd->add_option("--title", plot_title)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_evaluate(ev);
    if (*diag_cmd) return cmd_diagnose(dg);
    if (*synth_cmd) return cmd_synth(sp, synth_out);
    if (*plot_cmd) return cmd_plot(patterns, plot_out, plot_title);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const CompatibilityError& e) {
    std::cerr << "compatibility error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
