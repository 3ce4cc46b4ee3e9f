#pragma once

#include "dfd/preprocess.hpp"
#include "dfd/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dfd {

struct LabeledImage {
  std::string id;
  std::filesystem::path path;
  Label label = Label::real;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<LabeledImage> records;
  std::map<Split, std::int64_t> split_counts;
  std::map<std::pair<Split, Label>, std::int64_t> class_counts;

  /// Recomputes both count maps from `records`.
  void recount();
  bool counts_consistent() const;
  std::int64_t count(Split s) const;
  std::int64_t count(Split s, Label l) const;
  std::vector<const LabeledImage*> in_split(Split s) const;
};

/// Builds a manifest from records, validating id uniqueness.
DatasetManifest make_manifest(std::vector<LabeledImage> records);

struct SplitSpec {
  double val_fraction_of_train = 0.10;
  std::uint64_t seed = 20240101;
  bool stratified = true;

  void validate() const;
};

nlohmann::json to_json(const SplitSpec& s);
SplitSpec split_spec_from_json(const nlohmann::json& j);

/// Reads a `path,label,split` CSV (optional `id` column; default id is the
/// path without extension). Relative paths resolve against `root`.
/// Throws ValidationError with the offending row number. `allow_val`
/// accepts already-derived validation rows (resolved manifests).
DatasetManifest load_manifest(const std::filesystem::path& manifest_file, const std::filesystem::path& root,
                              bool validate_images = false, bool allow_val = false);
/// Writes `id,path,label,split` with absolute paths.
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// floor(x + 1/2), tolerant of representation error just below .5.
std::int64_t round_half_up(double x);

/// Moves round(fraction * |train|) train records to val. Stratified
/// allocation uses largest remainders so each class's share is within one
/// record of its train share.
DatasetManifest derive_validation_split(const DatasetManifest& manifest, const SplitSpec& spec);

/// Test accuracy of always predicting the train-split majority (ties: fake).
double no_skill_baseline(const DatasetManifest& manifest);
Label train_majority(const DatasetManifest& manifest);

/// Hash of the sorted (id, split) assignment.
std::string splits_hash(const DatasetManifest& m);
void save_splits(const DatasetManifest& m, const SplitSpec& spec, const std::filesystem::path& path);
/// Applies a persisted id -> split assignment; ids must match exactly.
DatasetManifest apply_splits(const DatasetManifest& m, const std::filesystem::path& path);

/// Writes `<cache_dir>/<id>.png` for every record (downscaled to the cache
/// short side), `cache_meta.json`, and returns the manifest re-pointed at
/// the cached files. Existing entries are reused when the metadata matches.
DatasetManifest prepare_cache(const DatasetManifest& m, const std::filesystem::path& cache_dir, int short_side);

}  // namespace dfd
