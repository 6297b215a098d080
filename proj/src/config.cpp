#include "seqrec/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"
#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

using nlohmann::json;
using Setter = std::function<void(TrainConfig&, const json&)>;

template <class T>
T value_of(const std::string& key, const json& v) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has a value of the wrong type: " + v.dump());
  }
}

template <class T, class F>
std::pair<const std::string, Setter> field(const std::string& key, F&& assign) {
  return {key, [key, assign](TrainConfig& c, const json& v) { assign(c, value_of<T>(key, v)); }};
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      field<int>("batch_size", [](TrainConfig& c, int v) { c.batch_size = v; }),
      field<int>("hidden_size", [](TrainConfig& c, int v) { c.hidden_size = v; }),
      field<double>("learning_rate", [](TrainConfig& c, double v) { c.learning_rate = v; }),
      field<double>("discount", [](TrainConfig& c, double v) { c.weights.gamma = v; }),
      field<bool>("contrastive_loss", [](TrainConfig& c, bool v) { c.contrastive_loss = v; }),
      field<std::string>("augmentation",
                         [](TrainConfig& c, const std::string& v) { c.augmentation.kind = parse_augmentation_kind(v); }),
      field<double>("augmentation_ratio", [](TrainConfig& c, double v) { c.augmentation.ratio = v; }),
      field<std::uint64_t>("augmentation_seed", [](TrainConfig& c, std::uint64_t v) { c.augmentation.seed = v; }),
      field<double>("negative_reward", [](TrainConfig& c, double v) { c.negative_reward = v; }),
      field<int>("negative_samples", [](TrainConfig& c, int v) { c.negative_samples = v; }),
      field<double>("cql_temperature", [](TrainConfig& c, double v) { c.weights.cql_temperature = v; }),
      field<double>("cql_min_q_weight", [](TrainConfig& c, double v) { c.weights.alpha = v; }),
      field<double>("q_loss_weight", [](TrainConfig& c, double v) { c.weights.omega = v; }),
      field<double>("contrastive_temperature", [](TrainConfig& c, double v) { c.weights.contrastive_temperature = v; }),
      field<std::string>("objective_mode",
                         [](TrainConfig& c, const std::string& v) { c.mode = parse_objective_mode(v); }),
      field<int>("max_len", [](TrainConfig& c, int v) { c.max_len = v; }),
      field<int>("num_blocks", [](TrainConfig& c, int v) { c.num_blocks = v; }),
      field<int>("num_heads", [](TrainConfig& c, int v) { c.num_heads = v; }),
      field<double>("dropout", [](TrainConfig& c, double v) { c.dropout = v; }),
      field<double>("r_click", [](TrainConfig& c, double v) { c.r_click = v; }),
      field<double>("r_buy", [](TrainConfig& c, double v) { c.r_buy = v; }),
      field<int>("steps", [](TrainConfig& c, int v) { c.steps = v; }),
      field<int>("eval_every", [](TrainConfig& c, int v) { c.eval_every = v; }),
      field<int>("target_update_every", [](TrainConfig& c, int v) { c.target_update_every = v; }),
      field<std::vector<std::uint64_t>>("seeds", [](TrainConfig& c, std::vector<std::uint64_t> v) { c.seeds = v; }),
      field<double>("divergence_q_threshold", [](TrainConfig& c, double v) { c.divergence_q_threshold = v; }),
      field<bool>("popularity_negatives", [](TrainConfig& c, bool v) { c.popularity_negatives = v; }),
      field<bool>("rank_by_q", [](TrainConfig& c, bool v) { c.rank_by_q = v; }),
      field<std::size_t>("top_checkpoints", [](TrainConfig& c, std::size_t v) { c.top_checkpoints = v; }),
      field<std::size_t>("eval_negatives", [](TrainConfig& c, std::size_t v) { c.eval_negatives = v; }),
  };
  return table;
}

}  // namespace

TrainConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig config;
  const auto& table = setters();
  for (const auto& [key, value] : doc.items()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(config, value);
  }
  config.validate();
  return config;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const TrainConfig& c) {
  json doc = {
      {"batch_size", c.batch_size},
      {"hidden_size", c.hidden_size},
      {"learning_rate", c.learning_rate},
      {"discount", c.weights.gamma},
      {"contrastive_loss", c.contrastive_loss},
      {"augmentation", to_string(c.augmentation.kind)},
      {"augmentation_ratio", c.augmentation.ratio},
      {"augmentation_seed", c.augmentation.seed},
      {"negative_reward", c.negative_reward},
      {"negative_samples", c.negative_samples},
      {"cql_temperature", c.weights.cql_temperature},
      {"cql_min_q_weight", c.weights.alpha},
      {"q_loss_weight", c.weights.omega},
      {"contrastive_temperature", c.weights.contrastive_temperature},
      {"objective_mode", to_string(c.mode)},
      {"max_len", c.max_len},
      {"num_blocks", c.num_blocks},
      {"num_heads", c.num_heads},
      {"dropout", c.dropout},
      {"r_click", c.r_click},
      {"r_buy", c.r_buy},
      {"steps", c.steps},
      {"eval_every", c.eval_every},
      {"target_update_every", c.target_update_every},
      {"seeds", c.seeds},
      {"divergence_q_threshold", c.divergence_q_threshold},
      {"popularity_negatives", c.popularity_negatives},
      {"rank_by_q", c.rank_by_q},
      {"top_checkpoints", c.top_checkpoints},
      {"eval_negatives", c.eval_negatives},
  };
  return doc.dump(2);
}

}  // namespace seqrec
