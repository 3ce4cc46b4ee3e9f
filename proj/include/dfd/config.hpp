#pragma once

#include "dfd/data.hpp"
#include "dfd/model.hpp"
#include "dfd/preprocess.hpp"
#include "dfd/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dfd {

struct PathsConfig {
  /// CSV with path,label,split (optional id), or a prepared manifest.
  std::string manifest;
  /// Base for relative manifest paths; empty means the manifest's directory.
  std::string data_root;
  /// Empty means $DFD_CACHE_ROOT, else "cache".
  std::string cache_dir;
  std::string output_dir = "runs";

  std::filesystem::path resolved_cache_dir() const;
  std::filesystem::path resolved_data_root() const;
};

struct RunConfig {
  SplitSpec split;
  PreprocessConfig preprocess;
  DetectorConfig model;
  TrainConfig train;
  PathsConfig paths;

  /// Cross-section checks (input sides agree).
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Strict: unknown keys anywhere are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Leaf keys of a config object in dotted form with their current values,
/// e.g. ("train.lr0", 1e-4). Arrays are leaves.
std::vector<std::pair<std::string, nlohmann::json>> flatten_config(const nlohmann::json& j);

/// Sets the dotted key to `text`, parsed by the type of the value already
/// there (bool, integer, number, string, or comma-separated array).
void set_config_value(nlohmann::json& j, const std::string& dotted_key, const std::string& text);

/// Reads a JSON config file; ValidationError on syntax errors.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Merges `overlay` into `base` recursively (objects merge, other values replace).
void merge_config(nlohmann::json& base, const nlohmann::json& overlay);

}  // namespace dfd
