#pragma once

#include <nlohmann/json.hpp>

#include <set>
#include <stdexcept>
#include <string>

namespace dfd {

/// Bad user input: malformed config, unknown key, out-of-range value,
/// malformed manifest. Callers map it to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an object field by field and rejects keys nobody asked for.
///
///   FieldReader r(j, "train");
///   r.get("lr0", cfg.lr0);
///   r.finish();   // throws on unknown keys
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ValidationError(context_ + ": expected an object");
  }

  template <typename T>
  bool get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(context_ + "." + key + ": " + e.what());
    }
    return true;
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ValidationError(context_ + ": unknown key '" + key + "'");
    }
  }

  const std::string& context() const { return context_; }

 private:
  const nlohmann::json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

}  // namespace dfd
