#pragma once

// Typed access to YAML config documents. Every mapping is checked against the
// set of keys its reader understands; anything else is a hard error.

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace trecx {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace config {

inline std::string where(const YAML::Node& node) {
  const auto mark = node.Mark();
  if (mark.line < 0) return "";
  return " (line " + std::to_string(mark.line + 1) + ", column " + std::to_string(mark.column + 1) + ")";
}

inline YAML::Node parse(const std::string& text, const std::string& origin) {
  try {
    YAML::Node root = YAML::Load(text);
    if (!root.IsMap()) throw ConfigError(origin + ": top level must be a mapping");
    return root;
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reads keys from one mapping and rejects keys nobody asked for.
class Section {
 public:
  Section(YAML::Node node, std::string context) : node_(std::move(node)), context_(std::move(context)) {
    if (!node_.IsMap()) throw ConfigError(context_ + ": expected a mapping" + where(node_));
  }

  bool has(const std::string& key) {
    allowed_.insert(key);
    return static_cast<bool>(node_[key]);
  }

  template <typename V>
  V required(const std::string& key) {
    allowed_.insert(key);
    const YAML::Node v = node_[key];
    if (!v) throw ConfigError(context_ + ": missing required key '" + key + "'" + where(node_));
    return convert<V>(v, key);
  }

  template <typename V>
  V optional(const std::string& key, V fallback) {
    allowed_.insert(key);
    const YAML::Node v = node_[key];
    if (!v) return fallback;
    return convert<V>(v, key);
  }

  YAML::Node node(const std::string& key) {
    allowed_.insert(key);
    return node_[key];
  }

  const std::string& context() const { return context_; }

  // Call after all reads.
  void finish() const {
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!allowed_.count(key)) throw ConfigError(context_ + ": unknown key '" + key + "'" + where(kv.first));
    }
  }

 private:
  template <typename V>
  V convert(const YAML::Node& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<V, bool>) {
        const auto s = v.as<std::string>();
        if (s != "true" && s != "false")
          throw ConfigError(context_ + ": key '" + key + "' must be true or false" + where(v));
        return s == "true";
      } else if constexpr (std::is_integral_v<V>) {
        const auto s = v.as<std::string>();
        if (s.find_first_of(".eE") != std::string::npos)
          throw ConfigError(context_ + ": key '" + key + "' must be an integer" + where(v));
        if (std::is_unsigned_v<V> && !s.empty() && s[0] == '-')
          throw ConfigError(context_ + ": key '" + key + "' must be non-negative" + where(v));
        return v.as<V>();
      } else {
        return v.as<V>();
      }
    } catch (const YAML::Exception&) {
      throw ConfigError(context_ + ": key '" + key + "' has the wrong type" + where(v));
    }
  }

  YAML::Node node_;
  std::string context_;
  std::set<std::string> allowed_;
};

}  // namespace config
}  // namespace trecx
