#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "palm/service.hpp"

namespace fixture {

using namespace palm;
using namespace palm::service;

inline const std::string kGatewayA = "gw-a-token-0123456789";
inline const std::string kGatewayB = "gw-b-token-0123456789";
inline const std::string kPassword = "date-palm";

// Two farms, users scoped to each, one global admin, one gateway per farm.
inline ServiceConfig two_farms() {
  static const std::string hash = hash_password(kPassword, HashStrength::Minimal);
  ServiceConfig c;
  c.farms = {{"farm-a", "Farm A", {}, {"c1"}}, {"farm-b", "Farm B", {}, {"c9"}}, {"farm-empty", "Empty", {}, {}}};
  c.users = {{"admin-a", "Admin A", hash, Role::Admin, {"farm-a", "farm-empty"}},
             {"viewer-a", "Viewer A", hash, Role::Viewer, {"farm-a"}},
             {"admin-b", "Admin B", hash, Role::Admin, {"farm-b"}},
             {"root", "Root", hash, Role::Admin, {"*"}}};
  c.gateways = {{kGatewayA, "gw-a", "farm-a", "c1"}, {kGatewayB, "gw-b", "farm-b", "c9"}};
  c.token_ttl = std::chrono::seconds(3600);
  return c;
}

inline Timestamp t0() { return parse_timestamp("2019-06-01T00:00:00Z"); }

// Manually advanced clock shared with the service.
struct ManualClock {
  std::shared_ptr<std::atomic<long long>> ms = std::make_shared<std::atomic<long long>>(0);
  Service::Clock fn() const {
    auto p = ms;
    return [p] { return t0() + std::chrono::milliseconds(p->load()); };
  }
  void advance(std::chrono::milliseconds d) { *ms += d.count(); }
};

inline std::vector<AccelSample> samples(const DeviceId& id, std::uint64_t first_seq, std::size_t n,
                                        double z = 9.8) {
  std::vector<AccelSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto seq = first_seq + i;
    out.push_back(AccelSample::make(id, seq, t0() + std::chrono::milliseconds(10 * seq), 0.01, -0.02,
                                    z + 0.001 * static_cast<double>(i % 7)));
  }
  return out;
}

inline nlohmann::json rows(const std::vector<AccelSample>& s) { return nlohmann::json(s); }

inline detector::HealthAssessment assessment(const DeviceId& id, Timestamp start, int fired) {
  detector::HealthAssessment a;
  a.device_id = id;
  a.window_start = start;
  a.fired_count = fired;
  a.likelihood = detector::classify(fired);
  return a;
}

}  // namespace fixture
