#pragma once

// key=value application config with dotted sections:
// objective.*, search.*, train.*, runtime.*, data.*

#include <cstdint>
#include <string>
#include <string_view>

#include "tdn/genesis.hpp"
#include "tdn/objective.hpp"
#include "tdn/runtime.hpp"
#include "tdn/train.hpp"

namespace tdn {

struct DataConfig {
  /// "synthetic" or a dataset directory.
  std::string source = "synthetic";
  int per_class = 300;
  int size = 200;
  std::uint64_t seed = 42;
  double train_fraction = 0.8;
};

struct AppConfig {
  ObjectiveParams objective;
  SearchConfig search;
  TrainConfig train;
  RuntimeConfig runtime;
  DataConfig data;
};

/// Parses config text over the defaults. Unknown keys and malformed values
/// raise ConfigError with the line number.
AppConfig parse_config(std::string_view text, AppConfig base = {});
/// Reads a file (empty path: defaults only), then applies TDN_* environment overrides to runtime.*.
AppConfig load_config(const std::string& path);
/// Sets one key; line is used for error messages.
void set_config_value(AppConfig& cfg, std::string_view key, std::string_view value, int line = 0);

}  // namespace tdn
