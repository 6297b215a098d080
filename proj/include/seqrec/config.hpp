#pragma once

#include <filesystem>
#include <string>

#include "seqrec/trainer.hpp"

namespace seqrec {

// Flat JSON object; keys absent from the object keep their defaults. An
// unknown key or a value of the wrong type throws ConfigError naming the key.
TrainConfig parse_config(const std::string& json_text);
TrainConfig load_config(const std::filesystem::path& path);

// Every key, pretty-printed; parse_config(config_to_json(c)) reproduces c.
std::string config_to_json(const TrainConfig& config);

}  // namespace seqrec
