#include "dfd/data.hpp"

#include "dfd/archive.hpp"
#include "dfd/config_fields.hpp"
#include "dfd/csv.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace dfd {
namespace fs = std::filesystem;

void DatasetManifest::recount() {
  split_counts.clear();
  class_counts.clear();
  for (Split s : {Split::train, Split::val, Split::test}) {
    split_counts[s] = 0;
    for (Label l : {Label::real, Label::fake}) class_counts[{s, l}] = 0;
  }
  for (const auto& r : records) {
    ++split_counts[r.split];
    ++class_counts[{r.split, r.label}];
  }
}

bool DatasetManifest::counts_consistent() const {
  DatasetManifest copy;
  copy.records = records;
  copy.recount();
  return copy.split_counts == split_counts && copy.class_counts == class_counts;
}

std::int64_t DatasetManifest::count(Split s) const {
  auto it = split_counts.find(s);
  return it == split_counts.end() ? 0 : it->second;
}

std::int64_t DatasetManifest::count(Split s, Label l) const {
  auto it = class_counts.find({s, l});
  return it == class_counts.end() ? 0 : it->second;
}

std::vector<const LabeledImage*> DatasetManifest::in_split(Split s) const {
  std::vector<const LabeledImage*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

DatasetManifest make_manifest(std::vector<LabeledImage> records) {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (!ids.insert(r.id).second) throw ValidationError("duplicate id '" + r.id + "'");
  }
  DatasetManifest m;
  m.records = std::move(records);
  m.recount();
  return m;
}

void SplitSpec::validate() const {
  require(val_fraction_of_train > 0.0 && val_fraction_of_train < 1.0, "split.val_fraction_of_train must be in (0, 1)");
}

nlohmann::json to_json(const SplitSpec& s) {
  return {{"val_fraction_of_train", s.val_fraction_of_train}, {"seed", s.seed}, {"stratified", s.stratified}};
}

SplitSpec split_spec_from_json(const nlohmann::json& j) {
  SplitSpec s;
  FieldReader r(j, "split");
  r.get("val_fraction_of_train", s.val_fraction_of_train);
  r.get("seed", s.seed);
  r.get("stratified", s.stratified);
  r.finish();
  s.validate();
  return s;
}

DatasetManifest load_manifest(const fs::path& manifest_file, const fs::path& root, bool validate_images, bool allow_val) {
  if (!fs::exists(manifest_file)) throw ValidationError("manifest not found: " + manifest_file.string());
  std::istringstream in(read_file(manifest_file));
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(manifest_file.string() + ": no records");
  const auto header = parse_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"path", "label", "split"}) {
    if (!col.count(need)) throw ValidationError(manifest_file.string() + ": header lacks column '" + need + "'");
  }
  const bool has_id = col.count("id") != 0;

  std::vector<LabeledImage> records;
  std::set<std::string> ids;
  for (int row = 2; std::getline(in, line); ++row) {
    if (line.empty() || line == "\r") continue;
    const std::string where = manifest_file.string() + ": row " + std::to_string(row);
    std::vector<std::string> f;
    try {
      f = parse_csv_line(line);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (f.size() != header.size()) {
      throw ValidationError(where + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    }
    LabeledImage r;
    const fs::path rel = f[col["path"]];
    if (rel.empty()) throw ValidationError(where + ": empty path");
    r.path = rel.is_absolute() ? rel : root / rel;
    r.id = has_id ? f[col["id"]] : (rel.parent_path() / rel.stem()).generic_string();
    try {
      r.label = parse_label(f[col["label"]]);
      r.split = parse_split(f[col["split"]]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (r.split == Split::val && !allow_val) throw ValidationError(where + ": split must be train or test (val is derived)");
    if (!ids.insert(r.id).second) throw ValidationError(where + ": duplicate id '" + r.id + "'");
    if (validate_images) {
      try {
        read_image(r.path);
      } catch (const ImageError& e) {
        throw ValidationError(where + ": " + e.what());
      }
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw ValidationError(manifest_file.string() + ": no records");
  return make_manifest(std::move(records));
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ostringstream out;
  out << "id,path,label,split\n";
  for (const auto& r : m.records) {
    out << csv_field(r.id) << ',' << csv_field(fs::absolute(r.path).lexically_normal().string()) << ',' << to_string(r.label) << ','
        << to_string(r.split) << '\n';
  }
  write_file_atomic(path, out.str());
}

std::int64_t round_half_up(double x) { return static_cast<std::int64_t>(std::floor(x + 0.5 + 1e-9)); }

DatasetManifest derive_validation_split(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate();
  if (manifest.count(Split::val) != 0) throw ValidationError("validation split is already populated");
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].split == Split::train) train.push_back(i);
  }
  if (train.empty()) throw ValidationError("train split is empty");
  const std::int64_t n_val = round_half_up(spec.val_fraction_of_train * static_cast<double>(train.size()));

  // Sort by id so the draw depends on the seed only, not on manifest order.
  std::sort(train.begin(), train.end(), [&](auto a, auto b) { return manifest.records[a].id < manifest.records[b].id; });
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> chosen;
  if (spec.stratified) {
    std::map<Label, std::vector<std::size_t>> by_class;
    for (auto i : train) by_class[manifest.records[i].label].push_back(i);
    // Largest-remainder allocation of n_val across classes.
    std::map<Label, std::int64_t> quota;
    std::vector<std::pair<double, Label>> remainders;
    std::int64_t assigned = 0;
    for (auto& [label, idx] : by_class) {
      const double exact = static_cast<double>(n_val) * static_cast<double>(idx.size()) / static_cast<double>(train.size());
      quota[label] = static_cast<std::int64_t>(std::floor(exact));
      assigned += quota[label];
      remainders.emplace_back(exact - std::floor(exact), label);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n_val; ++k, ++assigned) ++quota[remainders[k % remainders.size()].second];
    for (auto& [label, idx] : by_class) {
      if (quota[label] < 1) {
        throw ValidationError("train split too small to reserve a " + to_string(label) + " validation record at fraction " +
                              format_number(spec.val_fraction_of_train));
      }
      std::shuffle(idx.begin(), idx.end(), rng);
      chosen.insert(chosen.end(), idx.begin(), idx.begin() + quota[label]);
    }
  } else {
    std::shuffle(train.begin(), train.end(), rng);
    chosen.assign(train.begin(), train.begin() + n_val);
  }
  DatasetManifest out = manifest;
  for (auto i : chosen) out.records[i].split = Split::val;
  out.recount();
  return out;
}

Label train_majority(const DatasetManifest& manifest) {
  const auto real = manifest.count(Split::train, Label::real), fake = manifest.count(Split::train, Label::fake);
  if (real + fake == 0) throw ValidationError("no_skill_baseline: train split is empty");
  return real > fake ? Label::real : Label::fake;
}

double no_skill_baseline(const DatasetManifest& manifest) {
  const Label majority = train_majority(manifest);
  const auto n_test = manifest.count(Split::test);
  if (n_test == 0) throw ValidationError("no_skill_baseline: test split is empty");
  return static_cast<double>(manifest.count(Split::test, majority)) / static_cast<double>(n_test);
}

std::string splits_hash(const DatasetManifest& m) {
  std::vector<std::string> lines;
  for (const auto& r : m.records) lines.push_back(r.id + "\t" + to_string(r.split));
  std::sort(lines.begin(), lines.end());
  std::string joined;
  for (const auto& l : lines) joined += l + "\n";
  return fnv1a_hex(joined);
}

void save_splits(const DatasetManifest& m, const SplitSpec& spec, const fs::path& path) {
  nlohmann::json assignments = nlohmann::json::object();
  for (const auto& r : m.records) assignments[r.id] = to_string(r.split);
  const nlohmann::json j = {{"spec", to_json(spec)}, {"hash", splits_hash(m)}, {"assignments", assignments}};
  write_file_atomic(path, j.dump(1) + "\n");
}

DatasetManifest apply_splits(const DatasetManifest& m, const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  const auto& assignments = j.at("assignments");
  if (assignments.size() != m.records.size()) throw ValidationError(path.string() + ": record count differs from the manifest");
  DatasetManifest out = m;
  for (auto& r : out.records) {
    auto it = assignments.find(r.id);
    if (it == assignments.end()) throw ValidationError(path.string() + ": no assignment for id '" + r.id + "'");
    r.split = parse_split(it->get<std::string>());
  }
  out.recount();
  if (j.contains("hash") && j["hash"] != splits_hash(out)) throw ValidationError(path.string() + ": hash mismatch");
  return out;
}

DatasetManifest prepare_cache(const DatasetManifest& m, const fs::path& cache_dir, int short_side) {
  fs::create_directories(cache_dir);
  const nlohmann::json meta = {{"cache_short_side", short_side}, {"interpolation", kCacheInterpolation}};
  const fs::path meta_path = cache_dir / "cache_meta.json";
  bool reuse = false;
  if (fs::exists(meta_path)) {
    try {
      reuse = nlohmann::json::parse(read_file(meta_path)) == meta;
    } catch (const nlohmann::json::exception&) {
      reuse = false;
    }
  }
  if (!reuse) {
    // Invalidate before rewriting entries so a crash never leaves stale files marked valid.
    fs::remove(meta_path);
  }
  DatasetManifest out = m;
  for (auto& r : out.records) {
    const fs::path target = cache_dir / (r.id + ".png");
    if (!(reuse && fs::exists(target))) {
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      write_png(cache_resize(read_image(r.path), short_side), target);
    }
    r.path = target;
  }
  write_file_atomic(meta_path, meta.dump(2) + "\n");
  return out;
}

}  // namespace dfd
