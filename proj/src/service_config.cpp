#include <fstream>
#include <set>
#include <sstream>

#include "palm/service.hpp"
#include "yaml_reader.hpp"

namespace palm::service {

namespace {

std::vector<std::string> string_list(const detail::Reader& r, const YAML::Node& parent, const std::string& key) {
  std::vector<std::string> out;
  const auto n = parent[key];
  if (!n) return out;
  if (!n.IsSequence()) r.fail(n, "'" + key + "' must be a list");
  for (const auto& item : n) out.push_back(r.scalar<std::string>(item, key));
  return out;
}

}  // namespace

ServiceConfig parse_service_config(const std::string& text, const std::string& source_name) {
  using detail::kInf;
  detail::Reader r(source_name);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::Configuration, source_name + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  r.expect_map(root, "config");
  r.only_keys(root, {"bind", "port", "storage_dir", "token_ttl_seconds", "sample_rate_hz", "detector", "farms", "users",
                     "gateways"});

  ServiceConfig c;
  r.optional(root, "bind", c.bind_host);
  if (auto n = root["port"]) {
    const auto p = r.scalar<long long>(n, "port");
    if (p < 0 || p > 65535) r.fail(n, "'port' must be in [0, 65535]");
    c.port = static_cast<int>(p);
  }
  if (auto n = root["storage_dir"]) c.storage_dir = r.scalar<std::string>(n, "storage_dir");
  c.token_ttl = std::chrono::seconds(
      static_cast<long long>(r.number(root, "token_ttl_seconds", static_cast<double>(c.token_ttl.count()), 1.0, kInf)));
  c.sample_rate_hz = r.number(root, "sample_rate_hz", c.sample_rate_hz, 0.0, kInf, true);
  if (auto n = root["detector"]) {
    try {
      c.detector = detector::detector_config_from_json(detail::yaml_to_json(r, n, "detector"));
    } catch (const Error& e) {
      if (std::string_view(e.what()).starts_with(source_name + ":")) throw;
      r.fail(n, e.what());
    }
  }

  std::set<std::string> farm_ids;
  if (auto farms = root["farms"]) {
    if (!farms.IsSequence()) r.fail(farms, "'farms' must be a list");
    for (const auto& fn : farms) {
      r.expect_map(fn, "farm");
      r.only_keys(fn, {"farm_id", "name", "owners", "clusters"});
      FarmRecord f;
      f.farm_id = r.required_id(fn, "farm_id");
      if (!farm_ids.insert(f.farm_id).second) r.fail(fn["farm_id"], "duplicate farm_id '" + f.farm_id + "'");
      f.name = f.farm_id;
      r.optional(fn, "name", f.name);
      f.owners = string_list(r, fn, "owners");
      f.clusters = string_list(r, fn, "clusters");
      c.farms.push_back(std::move(f));
    }
  }

  std::set<std::string> user_ids;
  if (auto users = root["users"]) {
    if (!users.IsSequence()) r.fail(users, "'users' must be a list");
    for (const auto& un : users) {
      r.expect_map(un, "user");
      r.only_keys(un, {"user_id", "display_name", "password_hash", "role", "farms"});
      UserAccount u;
      u.user_id = r.required_id(un, "user_id");
      if (!user_ids.insert(u.user_id).second) r.fail(un["user_id"], "duplicate user_id '" + u.user_id + "'");
      u.display_name = u.user_id;
      r.optional(un, "display_name", u.display_name);
      u.password_hash = r.required_id(un, "password_hash");
      if (!u.password_hash.starts_with("$argon2")) {
        r.fail(un["password_hash"], "'password_hash' must be an argon2 hash (see palmctl hash-password)");
      }
      if (auto n = un["role"]) {
        try {
          u.role = role_from_string(r.scalar<std::string>(n, "role"));
        } catch (const Error&) {
          r.fail(n, "'role' must be viewer or admin");
        }
      }
      u.farms = string_list(r, un, "farms");
      for (const auto& f : u.farms) {
        if (f != "*" && !farm_ids.contains(f)) r.fail(un["farms"], "user '" + u.user_id + "' refers to unknown farm '" + f + "'");
      }
      c.users.push_back(std::move(u));
    }
  }

  std::set<std::string> tokens, gateway_ids;
  if (auto gateways = root["gateways"]) {
    if (!gateways.IsSequence()) r.fail(gateways, "'gateways' must be a list");
    for (const auto& gn : gateways) {
      r.expect_map(gn, "gateway");
      r.only_keys(gn, {"token", "gateway_id", "farm_id", "cluster_id"});
      GatewayCredential g;
      g.token = r.required_id(gn, "token");
      if (g.token.size() < 16) r.fail(gn["token"], "gateway token must be at least 16 characters");
      if (!tokens.insert(g.token).second) r.fail(gn["token"], "duplicate gateway token");
      g.gateway_id = r.required_id(gn, "gateway_id");
      if (!gateway_ids.insert(g.gateway_id).second) r.fail(gn["gateway_id"], "duplicate gateway_id '" + g.gateway_id + "'");
      g.farm_id = r.required_id(gn, "farm_id");
      if (!farm_ids.contains(g.farm_id)) r.fail(gn["farm_id"], "unknown farm '" + g.farm_id + "'");
      g.cluster_id = r.required_id(gn, "cluster_id");
      c.gateways.push_back(std::move(g));
    }
  }
  return c;
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  auto c = parse_service_config(text.str(), path.string());
  // Relative storage paths are taken from the config file's directory.
  if (c.storage_dir && c.storage_dir->is_relative()) c.storage_dir = path.parent_path() / *c.storage_dir;
  return c;
}

}  // namespace palm::service
