#pragma once

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnadapt/errors.hpp"

namespace bnadapt {

using Json = nlohmann::ordered_json;

// Reads fields out of a JSON object and rejects keys nobody asked for.
// Call finish() after the last read.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : json_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = json_.find(key);
    if (it == json_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void require(const char* key, T& out) {
    if (!json_.contains(key)) throw ConfigError(where_ + ": missing required key \"" + key + "\"");
    read(key, out);
  }

  // Nested object, if present.
  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = json_.find(key);
    return it == json_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = json_.begin(); it != json_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key \"" + it.key() + "\"");
    }
  }

  const std::string& where() const { return where_; }

 private:
  const Json& json_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace bnadapt
