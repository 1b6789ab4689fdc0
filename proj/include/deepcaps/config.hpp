#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "deepcaps/data_io.hpp"
#include "deepcaps/losses.hpp"
#include "deepcaps/model.hpp"

namespace deepcaps {

using Json = nlohmann::json;

struct DatasetConfig {
  std::string name = "mnist";
  std::string format = "idx";  // idx | cifar10 | raw
  std::filesystem::path dir = "data/mnist";
  std::size_t train_limit = 0;  // 0 = whole split
  std::size_t test_limit = 0;
  std::size_t resize = 0;  // square output side, 0 = keep
  AugmentOptions augment;
  // raw format only
  std::size_t raw_height = 32, raw_width = 32, raw_channels = 3, raw_classes = 10;
};

struct OptimizerConfig {
  std::string kind = "adam";
  double learning_rate = 1e-3;
  double decay = 0.96;  // per epoch
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

struct RunConfig {
  DatasetConfig dataset;
  ArchitectureSpec architecture;
  MarginParams loss;
  OptimizerConfig optimizer;
  std::size_t epochs = 3;
  std::size_t batch_size = 128;
  std::size_t eval_batch_size = 256;
  std::uint64_t seed = 1;
  bool deterministic = true;
  std::filesystem::path out_dir = "runs/default";
  std::size_t log_every = 0;  // batches between progress lines, 0 = off
};

ArchitectureSpec architecture_from_json(const Json& j);
Json architecture_to_json(const ArchitectureSpec& spec);

// Missing fields keep their defaults; unknown keys raise ConfigError so typos
// do not pass silently.
RunConfig run_config_from_json(const Json& j);
Json run_config_to_json(const RunConfig& config);

RunConfig load_run_config(const std::filesystem::path& path);

// Loads the configured split (train or test), applying the limit and resize.
Dataset load_dataset(const DatasetConfig& config, bool train);

}  // namespace deepcaps
