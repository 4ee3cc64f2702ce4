#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "palm/errors.hpp"

namespace palm::detail {

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Node& node, const std::string& message) const {
    const auto mark = node.Mark();
    const int line = mark.line >= 0 ? mark.line + 1 : 0;
    throw Error(ErrorKind::Configuration, source_ + ":" + std::to_string(line) + ": " + message);
  }

  void expect_map(const YAML::Node& node, const std::string& what) const {
    if (!node.IsMap()) fail(node, what + " must be a mapping");
  }

  void only_keys(const YAML::Node& node, std::initializer_list<std::string_view> allowed) const {
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) fail(kv.first, "unknown key '" + key + "'");
    }
  }

  template <typename T>
  T scalar(const YAML::Node& node, const std::string& key) const {
    if (!node.IsScalar()) fail(node, "'" + key + "' must be a scalar");
    try {
      return node.as<T>();
    } catch (const YAML::Exception&) {
      fail(node, "'" + key + "' has an invalid value '" + node.Scalar() + "'");
    }
  }

  template <typename T>
  void optional(const YAML::Node& parent, const std::string& key, T& out) const {
    if (auto n = parent[key]) out = scalar<T>(n, key);
  }

  double number(const YAML::Node& parent, const std::string& key, double fallback, double lo, double hi,
                bool lo_open = false, bool hi_open = false) const {
    double v = fallback;
    const auto n = parent[key];
    if (!n) return v;
    v = scalar<double>(n, key);
    const bool ok = std::isfinite(v) && (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
    if (!ok) {
      std::ostringstream msg;
      msg << "'" << key << "' must be in " << (lo_open ? "(" : "[") << lo << ", " << hi << (hi_open ? ")" : "]");
      fail(n, msg.str());
    }
    return v;
  }

  std::string required_id(const YAML::Node& parent, const std::string& key) const {
    const auto n = parent[key];
    if (!n) fail(parent, "missing '" + key + "'");
    auto s = scalar<std::string>(n, key);
    if (s.empty()) fail(n, "'" + key + "' must not be empty");
    return s;
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Flat map of scalars; "true"/"false" become booleans, everything else numbers.
inline nlohmann::json yaml_to_json(const Reader& r, const YAML::Node& node, const std::string& what) {
  r.expect_map(node, what);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& v = kv.second;
    if (!v.IsScalar()) r.fail(v, what + " key '" + key + "' must be a scalar");
    const auto& text = v.Scalar();
    if (text == "true" || text == "false") {
      j[key] = text == "true";
    } else {
      double d = 0.0;
      if (!YAML::convert<double>::decode(v, d)) r.fail(v, what + " key '" + key + "' must be a number");
      j[key] = d;
    }
  }
  return j;
}

}  // namespace palm::detail
