#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palm/detector.hpp"
#include "palm/errors.hpp"
#include "palm/fieldsim.hpp"
#include "palm/telemetry.hpp"

namespace palm::service {

enum class Role { Viewer, Admin };
std::string_view to_string(Role r) noexcept;
Role role_from_string(std::string_view s);

struct UserAccount {
  std::string user_id;
  std::string display_name;
  std::string password_hash;  // libsodium crypto_pwhash_str output
  Role role = Role::Viewer;
  std::vector<std::string> farms;  // "*" grants every farm
};

struct GatewayCredential {
  std::string token;
  std::string gateway_id;
  std::string farm_id;
  std::string cluster_id;
};

struct ServiceConfig {
  std::string bind_host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> storage_dir;  // none keeps everything in memory
  std::chrono::seconds token_ttl{12 * 3600};
  double sample_rate_hz = 100.0;  // for cloud-side assessment of stored samples
  detector::DetectorConfig detector;
  std::vector<FarmRecord> farms;
  std::vector<UserAccount> users;
  std::vector<GatewayCredential> gateways;
};

/// YAML document form; errors are Configuration with "<source>:<line>: ".
ServiceConfig parse_service_config(const std::string& text, const std::string& source_name = "config");
ServiceConfig load_service_config(const std::filesystem::path& path);

enum class HashStrength { Interactive, Minimal };
/// Argon2id hash in libsodium's string format.
std::string hash_password(const std::string& password, HashStrength strength = HashStrength::Interactive);
bool verify_password(const std::string& hash, const std::string& password);

struct Session {
  std::string token;
  std::string user_id;
  Role role = Role::Viewer;
  std::vector<std::string> farms;
  Timestamp expires_at{};

  bool can_see(const std::string& farm_id) const;
};

enum class NotificationKind { StatusChange, DeviceAutoDetected };
std::string_view to_string(NotificationKind k) noexcept;

struct NotificationRecord {
  std::uint64_t id = 0;
  std::string farm_id;
  NotificationKind kind = NotificationKind::StatusChange;
  nlohmann::json payload;
  Timestamp created_at{};
  bool read = false;
};

struct AuditEntry {
  std::uint64_t id = 0;
  std::string user_id;
  std::string action;
  std::string target;
  Timestamp timestamp{};
  std::string outcome;  // ok | denied | invalid | not_found | conflict
};

struct FarmOverview {
  std::string farm_id;
  std::string name;
  std::size_t palm_count = 0;
  double healthy_pct = 100.0;
  std::map<HealthLevel, std::size_t> counts;
  std::vector<Digest> latest_digests;
};

/// Ingest rejection with one message per offending row.
class BatchError : public Error {
 public:
  BatchError(std::vector<std::pair<std::size_t, std::string>> rows)
      : Error(ErrorKind::Validation, "batch rejected: " + std::to_string(rows.size()) + " invalid rows"),
        rows_(std::move(rows)) {}
  const std::vector<std::pair<std::size_t, std::string>>& rows() const { return rows_; }

 private:
  std::vector<std::pair<std::size_t, std::string>> rows_;
};

/// Subscription rejected because of these device ids.
class SubscriptionError : public Error {
 public:
  explicit SubscriptionError(std::vector<DeviceId> ids)
      : Error(ErrorKind::Authorization, "subscription includes unauthorized devices"), ids_(std::move(ids)) {}
  const std::vector<DeviceId>& device_ids() const { return ids_; }

 private:
  std::vector<DeviceId> ids_;
};

struct StreamEvent {
  enum class Type { Reading, Assessment };
  Type type = Type::Reading;
  DeviceId device_id;
  nlohmann::json data;
};
void to_json(nlohmann::json& j, const StreamEvent& e);

/// Per-subscriber queue. Events for one device arrive in storage order.
class Subscription {
 public:
  explicit Subscription(std::set<DeviceId> devices) : devices_(std::move(devices)) {}

  /// Blocks up to `timeout`; nullopt on timeout or once closed and drained.
  std::optional<StreamEvent> next(std::chrono::milliseconds timeout);
  std::vector<StreamEvent> drain();
  void close();
  bool closed() const;
  const std::set<DeviceId>& devices() const { return devices_; }

  void push(StreamEvent e);

 private:
  std::set<DeviceId> devices_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<StreamEvent> queue_;
  bool closed_ = false;
};

struct ReadingQuery {
  std::optional<Timestamp> from;
  std::optional<Timestamp> to;
  std::size_t max_points = 2000;
};

/// Evenly spaced picks of at most max_points elements, first and last kept.
std::vector<std::size_t> decimation_indices(std::size_t n, std::size_t max_points);

/// The cloud role. Every public call is thread-safe.
class Service {
 public:
  using Clock = std::function<Timestamp()>;

  explicit Service(ServiceConfig config, Clock clock = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Sessions
  Session login(const std::string& user_id, const std::string& password);
  Session authenticate(const std::string& token) const;

  // Farms and devices
  std::vector<FarmRecord> list_farms(const std::string& token) const;
  FarmOverview farm_overview(const std::string& token, const std::string& farm_id) const;
  std::vector<DeviceRecord> list_devices(const std::string& token, const std::optional<std::string>& farm_id = {}) const;
  DeviceRecord get_device(const std::string& token, const DeviceId& id) const;
  DeviceRecord create_device(const std::string& token, DeviceRecord record);
  DeviceRecord update_device(const std::string& token, const DeviceId& id, const nlohmann::json& patch);

  // Telemetry queries
  std::vector<AccelSample> query_readings(const std::string& token, const DeviceId& id, const ReadingQuery& q) const;
  std::vector<Digest> list_digests(const std::string& token, const DeviceId& id) const;
  std::vector<detector::HealthAssessment> list_assessments(const std::string& token, const DeviceId& id,
                                                           std::optional<Timestamp> from = {},
                                                           std::optional<Timestamp> to = {}) const;
  fieldsim::PacketAccounting packet_tracer(const std::string& token, const DeviceId& id,
                                           std::optional<Timestamp> from = {}, std::optional<Timestamp> to = {}) const;

  /// Cloud-side assessment of a stored window against a stored baseline range.
  detector::HealthAssessment assess_stored(const std::string& token, const DeviceId& id, Timestamp baseline_from,
                                           Timestamp baseline_to, Timestamp from, Timestamp to);

  // Notifications and audit
  std::vector<NotificationRecord> list_notifications(const std::string& token, bool unread_only = false) const;
  std::size_t mark_notifications_read(const std::string& token, const std::vector<std::uint64_t>& ids);
  std::vector<AuditEntry> audit_log(const std::string& token) const;
  std::size_t audit_size() const;

  // Gateway and edge ingestion (gateway token)
  std::size_t ingest_batch(const std::string& gateway_token, const nlohmann::json& rows);
  std::size_t ingest_samples(const std::string& gateway_token, std::span<const AccelSample> samples);
  std::size_t ingest_digests(const std::string& gateway_token, const nlohmann::json& rows);
  std::size_t ingest_assessments(const std::string& gateway_token, const nlohmann::json& rows);

  // Streaming
  std::shared_ptr<Subscription> subscribe(const std::string& token, const std::vector<DeviceId>& devices);
  void unsubscribe(const std::shared_ptr<Subscription>& sub);
  /// Closes every live subscription (used on shutdown).
  void close_streams();

  /// Writes the storage index. Safe to call repeatedly.
  void flush();

  const ServiceConfig& config() const { return config_; }

 private:
  struct DeviceLog;
  struct Impl;
  std::unique_ptr<Impl> impl_;
  ServiceConfig config_;
};

/// fieldsim sink that delivers straight into an in-process Service.
class ServiceSink : public fieldsim::CloudSink {
 public:
  ServiceSink(Service& service, std::map<std::string, std::string> gateway_tokens)
      : service_(service), tokens_(std::move(gateway_tokens)) {}
  void ingest_batch(const std::string& gateway_id, std::span<const AccelSample> samples) override;
  void post_digests(const std::string& gateway_id, std::span<const Digest> digests) override;
  void post_assessments(const std::string& gateway_id, std::span<const detector::HealthAssessment> a) override;

 private:
  const std::string& token_for(const std::string& gateway_id) const;
  Service& service_;
  std::map<std::string, std::string> tokens_;
};

void to_json(nlohmann::json& j, const Session& s);
void to_json(nlohmann::json& j, const NotificationRecord& n);
void from_json(const nlohmann::json& j, NotificationRecord& n);
void to_json(nlohmann::json& j, const AuditEntry& a);
void from_json(const nlohmann::json& j, AuditEntry& a);
void to_json(nlohmann::json& j, const FarmOverview& o);

}  // namespace palm::service
