#include "dfd/config.hpp"

#include "dfd/archive.hpp"

#include <cstdlib>
#include <sstream>

namespace dfd {
namespace fs = std::filesystem;

fs::path PathsConfig::resolved_cache_dir() const {
  if (!cache_dir.empty()) return cache_dir;
  if (const char* env = std::getenv("DFD_CACHE_ROOT"); env && *env) return env;
  return "cache";
}

fs::path PathsConfig::resolved_data_root() const {
  if (!data_root.empty()) return data_root;
  return fs::path(manifest).parent_path();
}

void RunConfig::validate() const {
  split.validate();
  preprocess.validate();
  model.validate();
  train.validate();
  require(preprocess.train_side == model.input_side && preprocess.eval_side == model.input_side,
          "preprocess.train_side and preprocess.eval_side must equal model.input_side (" +
              std::to_string(model.input_side) + ")");
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"split", to_json(c.split)},
          {"preprocess", to_json(c.preprocess)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"paths",
           {{"manifest", c.paths.manifest},
            {"data_root", c.paths.data_root},
            {"cache_dir", c.paths.cache_dir},
            {"output_dir", c.paths.output_dir}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  FieldReader r(j, "config");
  if (const auto* s = r.child("split")) c.split = split_spec_from_json(*s);
  if (const auto* p = r.child("preprocess")) c.preprocess = preprocess_config_from_json(*p);
  if (const auto* m = r.child("model")) c.model = detector_config_from_json(*m);
  if (const auto* t = r.child("train")) c.train = train_config_from_json(*t);
  if (const auto* p = r.child("paths")) {
    FieldReader pr(*p, "paths");
    pr.get("manifest", c.paths.manifest);
    pr.get("data_root", c.paths.data_root);
    pr.get("cache_dir", c.paths.cache_dir);
    pr.get("output_dir", c.paths.output_dir);
    pr.finish();
  }
  r.finish();
  c.validate();
  return c;
}

namespace {

void flatten_into(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      flatten_into(value, name, out);
    } else {
      out.emplace_back(name, value);
    }
  }
}

nlohmann::json parse_scalar(const nlohmann::json& like, const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw std::invalid_argument("expected true or false");
    }
    if (like.is_number_integer()) {
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument("expected an integer");
      if (like.is_number_unsigned() && v < 0) throw std::invalid_argument("expected a nonnegative integer");
      return v;
    }
    if (like.is_number() || like.is_null()) {
      if (like.is_null() && text == "null") return nullptr;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("expected a number");
      return v;
    }
    return text;
  } catch (const std::exception& e) {
    throw ValidationError("--" + key + " '" + text + "': " + e.what());
  }
}

}  // namespace

std::vector<std::pair<std::string, nlohmann::json>> flatten_config(const nlohmann::json& j) {
  std::vector<std::pair<std::string, nlohmann::json>> out;
  flatten_into(j, "", out);
  return out;
}

void set_config_value(nlohmann::json& j, const std::string& dotted_key, const std::string& text) {
  nlohmann::json* node = &j;
  std::istringstream parts(dotted_key);
  for (std::string part; std::getline(parts, part, '.');) {
    if (!node->is_object() || !node->contains(part)) throw ValidationError("unknown config key '" + dotted_key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ValidationError("config key '" + dotted_key + "' is a section, not a value");
  if (node->is_array()) {
    const nlohmann::json like = node->empty() ? nlohmann::json("") : (*node)[0];
    nlohmann::json values = nlohmann::json::array();
    std::istringstream items(text);
    for (std::string item; std::getline(items, item, ',');) {
      if (!item.empty()) values.push_back(parse_scalar(like, item, dotted_key));
    }
    *node = values;
  } else {
    *node = parse_scalar(*node, text, dotted_key);
  }
}

nlohmann::json read_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("config file not found: " + path.string());
  try {
    return nlohmann::json::parse(read_file(path), nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void merge_config(nlohmann::json& base, const nlohmann::json& overlay) {
  if (!overlay.is_object() || !base.is_object()) {
    base = overlay;
    return;
  }
  for (const auto& [key, value] : overlay.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object()) {
      merge_config(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace dfd
