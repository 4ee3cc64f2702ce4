#include "palm/service.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_set>

#include <sodium.h>

#include "storage.hpp"

namespace palm::service {

namespace {

Timestamp system_now() {
  return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
}

std::string outcome_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Authentication:
    case ErrorKind::Authorization: return "denied";
    case ErrorKind::NotFound: return "not_found";
    case ErrorKind::Conflict: return "conflict";
    default: return "invalid";
  }
}

bool safe_id(const std::string& id) {
  if (id.empty() || id.size() > 128 || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == ':';
  });
}

void require_safe_id(const std::string& id) {
  if (!safe_id(id)) throw Error(ErrorKind::Validation, "device_id '" + id + "' must match [A-Za-z0-9._:-]{1,128}");
}

bool in_range(Timestamp t, const std::optional<Timestamp>& from, const std::optional<Timestamp>& to) {
  return (!from || t >= *from) && (!to || t <= *to);
}

void check_range(const std::optional<Timestamp>& from, const std::optional<Timestamp>& to) {
  if (from && to && *from > *to) throw Error(ErrorKind::Validation, "'from' must not be after 'to'");
}

}  // namespace

std::string_view to_string(Role r) noexcept { return r == Role::Admin ? "admin" : "viewer"; }

Role role_from_string(std::string_view s) {
  if (s == "admin") return Role::Admin;
  if (s == "viewer") return Role::Viewer;
  throw Error(ErrorKind::Validation, "unknown role '" + std::string(s) + "'");
}

std::string_view to_string(NotificationKind k) noexcept {
  return k == NotificationKind::StatusChange ? "status_change" : "device_auto_detected";
}

bool Session::can_see(const std::string& farm_id) const {
  return std::find(farms.begin(), farms.end(), "*") != farms.end() ||
         std::find(farms.begin(), farms.end(), farm_id) != farms.end();
}

std::string hash_password(const std::string& password, HashStrength strength) {
  if (sodium_init() < 0) throw Error(ErrorKind::Configuration, "libsodium failed to initialize");
  char out[crypto_pwhash_STRBYTES];
  const auto ops = strength == HashStrength::Minimal ? crypto_pwhash_OPSLIMIT_MIN : crypto_pwhash_OPSLIMIT_INTERACTIVE;
  const auto mem = strength == HashStrength::Minimal ? crypto_pwhash_MEMLIMIT_MIN : crypto_pwhash_MEMLIMIT_INTERACTIVE;
  if (crypto_pwhash_str(out, password.data(), password.size(), ops, mem) != 0) {
    throw Error(ErrorKind::Configuration, "password hashing ran out of memory");
  }
  return out;
}

bool verify_password(const std::string& hash, const std::string& password) {
  if (sodium_init() < 0) return false;
  if (hash.size() >= crypto_pwhash_STRBYTES) return false;
  return crypto_pwhash_str_verify(hash.c_str(), password.data(), password.size()) == 0;
}

// ---------------------------------------------------------------- Subscription

void Subscription::push(StreamEvent e) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return;
    queue_.push_back(std::move(e));
  }
  cv_.notify_all();
}

std::optional<StreamEvent> Subscription::next(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, timeout, [&] { return closed_ || !queue_.empty(); });
  if (queue_.empty()) return std::nullopt;
  auto e = std::move(queue_.front());
  queue_.pop_front();
  return e;
}

std::vector<StreamEvent> Subscription::drain() {
  std::lock_guard lock(mutex_);
  std::vector<StreamEvent> out(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.end()));
  queue_.clear();
  return out;
}

void Subscription::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool Subscription::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

void to_json(nlohmann::json& j, const StreamEvent& e) {
  j = nlohmann::json{{"type", e.type == StreamEvent::Type::Reading ? "reading" : "assessment"},
                     {"device_id", e.device_id},
                     {"data", e.data}};
}

std::vector<std::size_t> decimation_indices(std::size_t n, std::size_t max_points) {
  std::vector<std::size_t> idx;
  if (n <= max_points) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  idx.reserve(max_points);
  const std::size_t span = max_points - 1;
  for (std::size_t k = 0; k < max_points; ++k) idx.push_back((k * (n - 1) + span / 2) / span);
  return idx;
}

// ---------------------------------------------------------------- internals

struct Service::DeviceLog {
  mutable std::shared_mutex mutex;
  std::vector<AccelSample> samples;  // ordered by seq
  std::unordered_set<std::uint64_t> seqs;
  std::map<Timestamp, Digest> digests;
  std::map<Timestamp, detector::HealthAssessment> assessments;
  std::vector<std::weak_ptr<Subscription>> subscribers;

  bool insert(AccelSample s) {
    if (!seqs.insert(s.seq).second) return false;
    if (samples.empty() || samples.back().seq < s.seq) {
      samples.push_back(std::move(s));
    } else {
      auto it = std::lower_bound(samples.begin(), samples.end(), s.seq,
                                 [](const AccelSample& a, std::uint64_t q) { return a.seq < q; });
      samples.insert(it, std::move(s));
    }
    return true;
  }

  void publish(const StreamEvent& e) {
    std::erase_if(subscribers, [&](const std::weak_ptr<Subscription>& w) {
      auto sub = w.lock();
      if (!sub || sub->closed()) return true;
      sub->push(e);
      return false;
    });
  }
};

struct Service::Impl {
  Clock clock;
  std::map<std::string, UserAccount> users;
  std::map<std::string, GatewayCredential> gateways;
  std::unique_ptr<Storage> storage;
  std::chrono::seconds ttl{0};
  double sample_rate_hz = 100.0;
  detector::DetectorConfig detector;

  mutable std::mutex sessions_mutex;
  mutable std::map<std::string, Session> sessions;

  mutable std::shared_mutex registry_mutex;
  std::map<std::string, FarmRecord> farms;
  std::map<DeviceId, DeviceRecord> devices;
  std::map<DeviceId, std::unique_ptr<DeviceLog>> logs;

  mutable std::mutex notes_mutex;
  std::vector<NotificationRecord> notifications;

  mutable std::mutex audit_mutex;
  std::vector<AuditEntry> audit;

  std::mutex subs_mutex;
  std::vector<std::weak_ptr<Subscription>> subscriptions;

  void record_audit(const std::string& user, const std::string& action, const std::string& target,
                    const std::string& outcome) {
    std::lock_guard lock(audit_mutex);
    AuditEntry e{audit.size() + 1, user, action, target, clock(), outcome};
    if (storage) storage->append_audit(e);
    audit.push_back(std::move(e));
  }

  // Runs `body`, writing exactly one audit entry whatever happens.
  template <typename F>
  auto audited(const std::string& action, const std::string& target, F&& body) {
    std::string user = "anonymous";
    try {
      auto result = body(user);
      record_audit(user, action, target, "ok");
      return result;
    } catch (const Error& e) {
      record_audit(user, action, target, outcome_for(e.kind()));
      throw;
    } catch (...) {
      record_audit(user, action, target, "error");
      throw;
    }
  }

  Session session(const std::string& token) const {
    std::lock_guard lock(sessions_mutex);
    auto it = sessions.find(token);
    if (token.empty() || it == sessions.end()) throw Error(ErrorKind::Authentication, "invalid or missing token");
    if (clock() >= it->second.expires_at) {
      sessions.erase(it);
      throw Error(ErrorKind::Authentication, "token expired");
    }
    return it->second;
  }

  const GatewayCredential& gateway(const std::string& token) const {
    auto it = gateways.find(token);
    if (token.empty() || it == gateways.end()) throw Error(ErrorKind::Authentication, "invalid gateway token");
    return it->second;
  }

  static void require_admin(const Session& s) {
    if (s.role != Role::Admin) throw Error(ErrorKind::Authorization, "admin role required");
  }

  // Caller holds registry_mutex (shared or unique).
  const DeviceRecord& visible_device(const Session& s, const DeviceId& id) const {
    auto it = devices.find(id);
    if (it == devices.end()) throw Error(ErrorKind::NotFound, "unknown device '" + id + "'");
    if (!s.can_see(it->second.farm_id)) throw Error(ErrorKind::Authorization, "device belongs to another farm");
    return it->second;
  }

  DeviceLog& log_for(const DeviceId& id) const { return *logs.at(id); }

  void notify(const std::string& farm_id, NotificationKind kind, nlohmann::json payload) {
    std::lock_guard lock(notes_mutex);
    notifications.push_back({notifications.size() + 1, farm_id, kind, std::move(payload), clock(), false});
    if (storage) storage->write_notifications(notifications);
  }

  void persist_devices() {
    if (storage) storage->write_devices(devices);
  }

  // Caller holds registry_mutex uniquely. Registers unknown ids from this
  // gateway's cluster; rejects ids already owned by another farm.
  void register_from_gateway(const GatewayCredential& gw, const std::vector<DeviceId>& ids) {
    bool changed = false;
    for (const auto& id : ids) {
      if (devices.contains(id)) continue;
      DeviceRecord d;
      d.device_id = id;
      d.farm_id = gw.farm_id;
      d.cluster_id = gw.cluster_id;
      d.created_by = CreatedBy::GatewayAutoDetect;
      devices[id] = d;
      logs[id] = std::make_unique<DeviceLog>();
      changed = true;
      notify(gw.farm_id, NotificationKind::DeviceAutoDetected,
             {{"device_id", id}, {"gateway_id", gw.gateway_id}, {"cluster_id", gw.cluster_id}});
    }
    if (changed) persist_devices();
  }

  // Rows whose device exists in a different farm than the gateway's.
  std::vector<std::pair<std::size_t, std::string>> foreign_rows(const GatewayCredential& gw,
                                                                const std::vector<DeviceId>& row_devices) const {
    std::vector<std::pair<std::size_t, std::string>> errors;
    for (std::size_t i = 0; i < row_devices.size(); ++i) {
      auto it = devices.find(row_devices[i]);
      if (it != devices.end() && it->second.farm_id != gw.farm_id) {
        errors.emplace_back(i, "device '" + row_devices[i] + "' is not in this gateway's farm");
      }
    }
    return errors;
  }

  std::size_t store_samples(const GatewayCredential& gw, std::span<const AccelSample> samples) {
    std::vector<DeviceId> order;
    std::map<DeviceId, std::vector<const AccelSample*>> groups;
    std::vector<DeviceId> row_devices;
    for (const auto& s : samples) {
      row_devices.push_back(s.device_id);
      auto& g = groups[s.device_id];
      if (g.empty()) order.push_back(s.device_id);
      g.push_back(&s);
    }
    {
      std::unique_lock lock(registry_mutex);
      if (auto errors = foreign_rows(gw, row_devices); !errors.empty()) throw BatchError(std::move(errors));
      register_from_gateway(gw, order);
    }
    std::shared_lock registry(registry_mutex);
    std::size_t accepted = 0;
    for (const auto& id : order) {
      auto& log = log_for(id);
      std::unique_lock lock(log.mutex);
      std::vector<AccelSample> fresh;
      for (const auto* s : groups[id]) {
        if (log.seqs.contains(s->seq)) continue;
        if (!log.insert(*s)) continue;
        fresh.push_back(*s);
      }
      if (fresh.empty()) continue;
      if (storage) storage->append_samples(id, fresh);
      for (const auto& s : fresh) log.publish({StreamEvent::Type::Reading, id, s});
      accepted += fresh.size();
    }
    return accepted;
  }

  std::size_t store_assessments(const std::vector<detector::HealthAssessment>& rows) {
    std::size_t stored = 0;
    std::unique_lock registry(registry_mutex);
    bool status_changed = false;
    for (const auto& a : rows) {
      auto& device = devices.at(a.device_id);
      auto& log = log_for(a.device_id);
      {
        std::unique_lock lock(log.mutex);
        auto it = log.assessments.find(a.window_start);
        if (it != log.assessments.end() && nlohmann::json(it->second) == nlohmann::json(a)) continue;
        log.assessments[a.window_start] = a;
        if (storage) storage->append_assessments(a.device_id, std::span(&a, 1));
        log.publish({StreamEvent::Type::Assessment, a.device_id, a});
      }
      ++stored;
      if (a.window_start < device.status.updated_at) continue;
      if (a.likelihood != device.status.likelihood) {
        notify(device.farm_id, NotificationKind::StatusChange,
               {{"device_id", a.device_id},
                {"from", to_string(device.status.likelihood)},
                {"to", to_string(a.likelihood)},
                {"window_start", format_timestamp(a.window_start)}});
      }
      if (device.status.likelihood != a.likelihood || device.status.updated_at != a.window_start) {
        device.status = HealthStatus{a.likelihood, a.window_start};
        status_changed = true;
      }
    }
    if (status_changed) persist_devices();
    return stored;
  }
};

// ---------------------------------------------------------------- Service

Service::Service(ServiceConfig config, Clock clock) : impl_(std::make_unique<Impl>()), config_(std::move(config)) {
  if (sodium_init() < 0) throw Error(ErrorKind::Configuration, "libsodium failed to initialize");
  auto& m = *impl_;
  m.clock = clock ? std::move(clock) : Clock(system_now);
  m.ttl = config_.token_ttl;
  m.sample_rate_hz = config_.sample_rate_hz;
  m.detector = config_.detector;
  for (const auto& f : config_.farms) m.farms[f.farm_id] = f;
  for (const auto& u : config_.users) m.users[u.user_id] = u;
  for (const auto& g : config_.gateways) m.gateways[g.token] = g;

  if (config_.storage_dir) {
    m.storage = std::make_unique<Storage>(*config_.storage_dir);
    auto contents = m.storage->load();
    m.devices = std::move(contents.devices);
    for (const auto& [id, _] : m.devices) m.logs[id] = std::make_unique<DeviceLog>();
    auto log_of = [&](const DeviceId& id) -> DeviceLog& {
      auto& slot = m.logs[id];
      if (!slot) slot = std::make_unique<DeviceLog>();
      return *slot;
    };
    for (auto& [id, samples] : contents.samples) {
      auto& log = log_of(id);
      for (auto& s : samples) log.insert(std::move(s));
    }
    for (auto& [id, digests] : contents.digests) {
      auto& log = log_of(id);
      for (auto& d : digests) log.digests[d.window_start] = d;
    }
    for (auto& [id, rows] : contents.assessments) {
      auto& log = log_of(id);
      for (auto& a : rows) log.assessments[a.window_start] = a;
    }
    m.notifications = std::move(contents.notifications);
    m.audit = std::move(contents.audit);
  }
}

Service::~Service() {
  close_streams();
  try {
    flush();
  } catch (...) {
  }
}

Session Service::login(const std::string& user_id, const std::string& password) {
  auto& m = *impl_;
  return m.audited("login", user_id, [&](std::string& actor) {
    actor = user_id;
    auto it = m.users.find(user_id);
    // Same message whether the user exists or not.
    if (it == m.users.end() || !verify_password(it->second.password_hash, password)) {
      throw Error(ErrorKind::Authentication, "invalid credentials");
    }
    unsigned char raw[32];
    randombytes_buf(raw, sizeof raw);
    char hex[sizeof raw * 2 + 1];
    sodium_bin2hex(hex, sizeof hex, raw, sizeof raw);
    Session s{hex, user_id, it->second.role, it->second.farms, m.clock() + m.ttl};
    std::lock_guard lock(m.sessions_mutex);
    m.sessions[s.token] = s;
    return s;
  });
}

Session Service::authenticate(const std::string& token) const { return impl_->session(token); }

std::vector<FarmRecord> Service::list_farms(const std::string& token) const {
  const auto s = impl_->session(token);
  std::shared_lock lock(impl_->registry_mutex);
  std::vector<FarmRecord> out;
  for (const auto& [id, f] : impl_->farms) {
    if (s.can_see(id)) out.push_back(f);
  }
  return out;
}

FarmOverview Service::farm_overview(const std::string& token, const std::string& farm_id) const {
  const auto s = impl_->session(token);
  if (!s.can_see(farm_id)) throw Error(ErrorKind::Authorization, "farm not accessible");
  std::shared_lock lock(impl_->registry_mutex);
  auto fit = impl_->farms.find(farm_id);
  if (fit == impl_->farms.end()) throw Error(ErrorKind::NotFound, "unknown farm '" + farm_id + "'");
  FarmOverview o;
  o.farm_id = farm_id;
  o.name = fit->second.name;
  for (auto level : {HealthLevel::Healthy, HealthLevel::Suspect, HealthLevel::Infested}) o.counts[level] = 0;
  for (const auto& [id, d] : impl_->devices) {
    if (d.farm_id != farm_id) continue;
    ++o.palm_count;
    ++o.counts[d.status.level()];
    const auto& log = impl_->log_for(id);
    std::shared_lock dl(log.mutex);
    if (!log.digests.empty()) o.latest_digests.push_back(log.digests.rbegin()->second);
  }
  o.healthy_pct = o.palm_count == 0 ? 100.0
                                    : 100.0 * static_cast<double>(o.counts[HealthLevel::Healthy]) /
                                          static_cast<double>(o.palm_count);
  return o;
}

std::vector<DeviceRecord> Service::list_devices(const std::string& token, const std::optional<std::string>& farm_id) const {
  const auto s = impl_->session(token);
  if (farm_id && !s.can_see(*farm_id)) throw Error(ErrorKind::Authorization, "farm not accessible");
  std::shared_lock lock(impl_->registry_mutex);
  std::vector<DeviceRecord> out;
  for (const auto& [_, d] : impl_->devices) {
    if (s.can_see(d.farm_id) && (!farm_id || d.farm_id == *farm_id)) out.push_back(d);
  }
  return out;
}

DeviceRecord Service::get_device(const std::string& token, const DeviceId& id) const {
  const auto s = impl_->session(token);
  std::shared_lock lock(impl_->registry_mutex);
  return impl_->visible_device(s, id);
}

DeviceRecord Service::create_device(const std::string& token, DeviceRecord record) {
  auto& m = *impl_;
  return m.audited("create_device", record.device_id, [&](std::string& actor) {
    const auto s = m.session(token);
    actor = s.user_id;
    Impl::require_admin(s);
    if (!s.can_see(record.farm_id)) throw Error(ErrorKind::Authorization, "farm not accessible");
    require_safe_id(record.device_id);
    validate(record);
    std::unique_lock lock(m.registry_mutex);
    if (!m.farms.contains(record.farm_id)) throw Error(ErrorKind::NotFound, "unknown farm '" + record.farm_id + "'");
    if (m.devices.contains(record.device_id)) throw Error(ErrorKind::Conflict, "device already exists");
    record.created_by = CreatedBy::Manual;
    record.status = HealthStatus{};
    m.devices[record.device_id] = record;
    m.logs[record.device_id] = std::make_unique<DeviceLog>();
    m.persist_devices();
    return record;
  });
}

DeviceRecord Service::update_device(const std::string& token, const DeviceId& id, const nlohmann::json& patch) {
  auto& m = *impl_;
  return m.audited("update_device", id, [&](std::string& actor) {
    const auto s = m.session(token);
    actor = s.user_id;
    Impl::require_admin(s);
    if (!patch.is_object()) throw Error(ErrorKind::Validation, "update must be a JSON object");
    std::unique_lock lock(m.registry_mutex);
    DeviceRecord d = m.visible_device(s, id);
    try {
      for (const auto& [key, value] : patch.items()) {
        if (key == "latitude") d.latitude = value.get<double>();
        else if (key == "longitude") d.longitude = value.get<double>();
        else if (key == "sensor_placement") d.sensor_placement = placement_from_string(value.get<std::string>());
        else if (key == "sensors") d.sensors = value.get<std::vector<std::string>>();
        else if (key == "cluster_id") d.cluster_id = value.get<std::string>();
        else throw Error(ErrorKind::Validation, "field '" + key + "' is not editable");
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Validation, std::string("bad field value: ") + e.what());
    }
    validate(d);
    m.devices[id] = d;
    m.persist_devices();
    return d;
  });
}

std::vector<AccelSample> Service::query_readings(const std::string& token, const DeviceId& id,
                                                 const ReadingQuery& q) const {
  const auto s = impl_->session(token);
  if (q.max_points < 2) throw Error(ErrorKind::Validation, "max_points must be at least 2");
  check_range(q.from, q.to);
  std::shared_lock registry(impl_->registry_mutex);
  impl_->visible_device(s, id);
  const auto& log = impl_->log_for(id);
  std::shared_lock lock(log.mutex);
  std::vector<const AccelSample*> hits;
  for (const auto& x : log.samples) {
    if (in_range(x.timestamp, q.from, q.to)) hits.push_back(&x);
  }
  std::vector<AccelSample> out;
  for (auto i : decimation_indices(hits.size(), q.max_points)) out.push_back(*hits[i]);
  return out;
}

std::vector<Digest> Service::list_digests(const std::string& token, const DeviceId& id) const {
  const auto s = impl_->session(token);
  std::shared_lock registry(impl_->registry_mutex);
  impl_->visible_device(s, id);
  const auto& log = impl_->log_for(id);
  std::shared_lock lock(log.mutex);
  std::vector<Digest> out;
  for (const auto& [_, d] : log.digests) out.push_back(d);
  return out;
}

std::vector<detector::HealthAssessment> Service::list_assessments(const std::string& token, const DeviceId& id,
                                                                  std::optional<Timestamp> from,
                                                                  std::optional<Timestamp> to) const {
  const auto s = impl_->session(token);
  check_range(from, to);
  std::shared_lock registry(impl_->registry_mutex);
  impl_->visible_device(s, id);
  const auto& log = impl_->log_for(id);
  std::shared_lock lock(log.mutex);
  std::vector<detector::HealthAssessment> out;
  for (const auto& [t, a] : log.assessments) {
    if (in_range(t, from, to)) out.push_back(a);
  }
  return out;
}

fieldsim::PacketAccounting Service::packet_tracer(const std::string& token, const DeviceId& id,
                                                  std::optional<Timestamp> from, std::optional<Timestamp> to) const {
  const auto s = impl_->session(token);
  check_range(from, to);
  std::shared_lock registry(impl_->registry_mutex);
  impl_->visible_device(s, id);
  const auto& log = impl_->log_for(id);
  std::shared_lock lock(log.mutex);
  std::vector<std::uint64_t> seqs;
  for (const auto& x : log.samples) {
    if (in_range(x.timestamp, from, to)) seqs.push_back(x.seq);
  }
  return fieldsim::packet_accounting(seqs);
}

detector::HealthAssessment Service::assess_stored(const std::string& token, const DeviceId& id,
                                                  Timestamp baseline_from, Timestamp baseline_to, Timestamp from,
                                                  Timestamp to) {
  auto& m = *impl_;
  return m.audited("assess", id, [&](std::string& actor) {
    const auto s = m.session(token);
    actor = s.user_id;
    Impl::require_admin(s);
    check_range(baseline_from, baseline_to);
    check_range(from, to);
    std::vector<double> base, window;
    Placement placement;
    {
      std::shared_lock registry(m.registry_mutex);
      placement = m.visible_device(s, id).sensor_placement;
      const auto& log = m.log_for(id);
      std::shared_lock lock(log.mutex);
      for (const auto& x : log.samples) {
        if (x.timestamp >= baseline_from && x.timestamp < baseline_to) base.push_back(x.magnitude);
        if (x.timestamp >= from && x.timestamp < to) window.push_back(x.magnitude);
      }
    }
    if (base.size() < 2 || window.size() < 2) {
      throw Error(ErrorKind::InsufficientData, "not enough stored samples in the requested ranges");
    }
    auto minutes = [](Timestamp a, Timestamp b) { return std::chrono::duration<double>(b - a).count() / 60.0; };
    const auto baseline = detector::build_baseline(id, placement, base, m.sample_rate_hz,
                                                   minutes(baseline_from, baseline_to), 1, baseline_to, m.detector);
    auto a = detector::assess_values(id, from, window, m.sample_rate_hz, minutes(from, to), placement, baseline,
                                     m.detector);
    m.store_assessments({a});
    return a;
  });
}

std::vector<NotificationRecord> Service::list_notifications(const std::string& token, bool unread_only) const {
  const auto s = impl_->session(token);
  std::lock_guard lock(impl_->notes_mutex);
  std::vector<NotificationRecord> out;
  for (const auto& n : impl_->notifications) {
    if (s.can_see(n.farm_id) && (!unread_only || !n.read)) out.push_back(n);
  }
  return out;
}

std::size_t Service::mark_notifications_read(const std::string& token, const std::vector<std::uint64_t>& ids) {
  auto& m = *impl_;
  return m.audited("mark_notifications_read", std::to_string(ids.size()) + " ids", [&](std::string& actor) {
    const auto s = m.session(token);
    actor = s.user_id;
    std::lock_guard lock(m.notes_mutex);
    std::size_t marked = 0;
    for (auto& n : m.notifications) {
      if (!n.read && s.can_see(n.farm_id) && std::find(ids.begin(), ids.end(), n.id) != ids.end()) {
        n.read = true;
        ++marked;
      }
    }
    if (marked > 0 && m.storage) m.storage->write_notifications(m.notifications);
    return marked;
  });
}

std::vector<AuditEntry> Service::audit_log(const std::string& token) const {
  const auto s = impl_->session(token);
  Impl::require_admin(s);
  std::lock_guard lock(impl_->audit_mutex);
  return impl_->audit;
}

std::size_t Service::audit_size() const {
  std::lock_guard lock(impl_->audit_mutex);
  return impl_->audit.size();
}

std::size_t Service::ingest_batch(const std::string& gateway_token, const nlohmann::json& rows) {
  auto& m = *impl_;
  return m.audited("ingest_batch", "samples", [&](std::string& actor) {
    const auto& gw = m.gateway(gateway_token);
    actor = "gateway:" + gw.gateway_id;
    if (!rows.is_array()) throw BatchError({{0, "body must be a JSON array of samples"}});
    std::vector<AccelSample> samples;
    std::vector<std::pair<std::size_t, std::string>> errors;
    samples.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      try {
        auto s = rows[i].get<AccelSample>();
        require_safe_id(s.device_id);
        samples.push_back(std::move(s));
      } catch (const std::exception& e) {
        errors.emplace_back(i, e.what());
      }
    }
    if (!errors.empty()) throw BatchError(std::move(errors));
    return m.store_samples(gw, samples);
  });
}

std::size_t Service::ingest_samples(const std::string& gateway_token, std::span<const AccelSample> samples) {
  auto& m = *impl_;
  return m.audited("ingest_batch", "samples", [&](std::string& actor) {
    const auto& gw = m.gateway(gateway_token);
    actor = "gateway:" + gw.gateway_id;
    std::vector<std::pair<std::size_t, std::string>> errors;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (!safe_id(samples[i].device_id)) errors.emplace_back(i, "invalid device_id");
    }
    if (!errors.empty()) throw BatchError(std::move(errors));
    return m.store_samples(gw, samples);
  });
}

std::size_t Service::ingest_digests(const std::string& gateway_token, const nlohmann::json& rows) {
  auto& m = *impl_;
  return m.audited("ingest_digests", "digests", [&](std::string& actor) {
    const auto& gw = m.gateway(gateway_token);
    actor = "gateway:" + gw.gateway_id;
    if (!rows.is_array()) throw BatchError({{0, "body must be a JSON array of digests"}});
    std::vector<Digest> digests;
    std::vector<DeviceId> ids;
    std::vector<std::pair<std::size_t, std::string>> errors;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      try {
        auto d = rows[i].get<Digest>();
        require_safe_id(d.device_id);
        ids.push_back(d.device_id);
        digests.push_back(std::move(d));
      } catch (const std::exception& e) {
        errors.emplace_back(i, e.what());
      }
    }
    if (!errors.empty()) throw BatchError(std::move(errors));
    {
      std::unique_lock lock(m.registry_mutex);
      if (auto foreign = m.foreign_rows(gw, ids); !foreign.empty()) throw BatchError(std::move(foreign));
      m.register_from_gateway(gw, ids);
    }
    std::shared_lock registry(m.registry_mutex);
    std::size_t stored = 0;
    for (const auto& d : digests) {
      auto& log = m.log_for(d.device_id);
      std::unique_lock lock(log.mutex);
      auto it = log.digests.find(d.window_start);
      if (it != log.digests.end() && it->second == d) continue;
      log.digests[d.window_start] = d;
      if (m.storage) m.storage->append_digests(d.device_id, std::span(&d, 1));
      ++stored;
    }
    return stored;
  });
}

std::size_t Service::ingest_assessments(const std::string& gateway_token, const nlohmann::json& rows) {
  auto& m = *impl_;
  return m.audited("ingest_assessments", "assessments", [&](std::string& actor) {
    const auto& gw = m.gateway(gateway_token);
    actor = "gateway:" + gw.gateway_id;
    if (!rows.is_array()) throw BatchError({{0, "body must be a JSON array of assessments"}});
    std::vector<detector::HealthAssessment> parsed;
    std::vector<DeviceId> ids;
    std::vector<std::pair<std::size_t, std::string>> errors;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      try {
        auto a = rows[i].get<detector::HealthAssessment>();
        require_safe_id(a.device_id);
        ids.push_back(a.device_id);
        parsed.push_back(std::move(a));
      } catch (const std::exception& e) {
        errors.emplace_back(i, e.what());
      }
    }
    if (!errors.empty()) throw BatchError(std::move(errors));
    {
      std::unique_lock lock(m.registry_mutex);
      if (auto foreign = m.foreign_rows(gw, ids); !foreign.empty()) throw BatchError(std::move(foreign));
      m.register_from_gateway(gw, ids);
    }
    return m.store_assessments(parsed);
  });
}

std::shared_ptr<Subscription> Service::subscribe(const std::string& token, const std::vector<DeviceId>& devices) {
  const auto s = impl_->session(token);
  if (devices.empty()) throw Error(ErrorKind::Validation, "device_ids must not be empty");
  std::shared_lock registry(impl_->registry_mutex);
  std::vector<DeviceId> offending;
  for (const auto& id : devices) {
    auto it = impl_->devices.find(id);
    if (it == impl_->devices.end() || !s.can_see(it->second.farm_id)) offending.push_back(id);
  }
  if (!offending.empty()) throw SubscriptionError(std::move(offending));
  auto sub = std::make_shared<Subscription>(std::set<DeviceId>(devices.begin(), devices.end()));
  for (const auto& id : sub->devices()) {
    auto& log = impl_->log_for(id);
    std::unique_lock lock(log.mutex);
    log.subscribers.push_back(sub);
  }
  std::lock_guard lock(impl_->subs_mutex);
  std::erase_if(impl_->subscriptions, [](const auto& w) { return w.expired(); });
  impl_->subscriptions.push_back(sub);
  return sub;
}

void Service::unsubscribe(const std::shared_ptr<Subscription>& sub) {
  if (sub) sub->close();
}

void Service::close_streams() {
  std::lock_guard lock(impl_->subs_mutex);
  for (auto& w : impl_->subscriptions) {
    if (auto sub = w.lock()) sub->close();
  }
  impl_->subscriptions.clear();
}

void Service::flush() {
  if (!impl_->storage) return;
  std::map<DeviceId, std::size_t> counts;
  std::shared_lock registry(impl_->registry_mutex);
  for (const auto& [id, log] : impl_->logs) {
    std::shared_lock lock(log->mutex);
    counts[id] = log->samples.size();
  }
  impl_->storage->write_index(counts);
}

// ---------------------------------------------------------------- sink

const std::string& ServiceSink::token_for(const std::string& gateway_id) const {
  auto it = tokens_.find(gateway_id);
  if (it == tokens_.end()) throw Error(ErrorKind::Configuration, "no token configured for gateway '" + gateway_id + "'");
  return it->second;
}

void ServiceSink::ingest_batch(const std::string& gateway_id, std::span<const AccelSample> samples) {
  service_.ingest_samples(token_for(gateway_id), samples);
}

void ServiceSink::post_digests(const std::string& gateway_id, std::span<const Digest> digests) {
  service_.ingest_digests(token_for(gateway_id), nlohmann::json(std::vector<Digest>(digests.begin(), digests.end())));
}

void ServiceSink::post_assessments(const std::string& gateway_id, std::span<const detector::HealthAssessment> a) {
  service_.ingest_assessments(token_for(gateway_id),
                              nlohmann::json(std::vector<detector::HealthAssessment>(a.begin(), a.end())));
}

// ---------------------------------------------------------------- JSON

void to_json(nlohmann::json& j, const Session& s) {
  j = nlohmann::json{{"token", s.token},
                     {"user_id", s.user_id},
                     {"role", to_string(s.role)},
                     {"farms", s.farms},
                     {"expires_at", format_timestamp(s.expires_at)}};
}

void to_json(nlohmann::json& j, const NotificationRecord& n) {
  j = nlohmann::json{{"id", n.id},
                     {"farm_id", n.farm_id},
                     {"kind", to_string(n.kind)},
                     {"payload", n.payload},
                     {"created_at", format_timestamp(n.created_at)},
                     {"read", n.read}};
}

void from_json(const nlohmann::json& j, NotificationRecord& n) {
  n.id = j.at("id").get<std::uint64_t>();
  n.farm_id = j.at("farm_id").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  n.kind = kind == "status_change" ? NotificationKind::StatusChange : NotificationKind::DeviceAutoDetected;
  n.payload = j.at("payload");
  n.created_at = parse_timestamp(j.at("created_at").get<std::string>());
  n.read = j.at("read").get<bool>();
}

void to_json(nlohmann::json& j, const AuditEntry& a) {
  j = nlohmann::json{{"id", a.id},
                     {"user_id", a.user_id},
                     {"action", a.action},
                     {"target", a.target},
                     {"timestamp", format_timestamp(a.timestamp)},
                     {"outcome", a.outcome}};
}

void from_json(const nlohmann::json& j, AuditEntry& a) {
  a.id = j.at("id").get<std::uint64_t>();
  a.user_id = j.at("user_id").get<std::string>();
  a.action = j.at("action").get<std::string>();
  a.target = j.at("target").get<std::string>();
  a.timestamp = parse_timestamp(j.at("timestamp").get<std::string>());
  a.outcome = j.at("outcome").get<std::string>();
}

void to_json(nlohmann::json& j, const FarmOverview& o) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [level, n] : o.counts) counts[std::string(to_string(level))] = n;
  j = nlohmann::json{{"farm_id", o.farm_id},
                     {"name", o.name},
                     {"palm_count", o.palm_count},
                     {"healthy_pct", o.healthy_pct},
                     {"counts", counts},
                     {"latest_digests", o.latest_digests}};
}

}  // namespace palm::service
