#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>
#include <thread>

#include "service_fixture.hpp"

using namespace fixture;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct Env {
  ManualClock clock;
  Service svc;
  Env() : svc(two_farms(), clock.fn()) {}
  explicit Env(ServiceConfig c) : svc(std::move(c), clock.fn()) {}
  std::string token(const std::string& user) { return svc.login(user, kPassword).token; }
};

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Io;
}

ReadingQuery upto(std::size_t n) {
  ReadingQuery q;
  q.max_points = n;
  return q;
}

std::vector<StreamEvent> drain_all(Subscription& sub) { return sub.drain(); }

DeviceRecord device(const std::string& id, const std::string& farm, double lat = 24.7, double lon = 46.6) {
  DeviceRecord d;
  d.device_id = id;
  d.farm_id = farm;
  d.cluster_id = "c1";
  d.latitude = lat;
  d.longitude = lon;
  return d;
}

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("palm-svc-" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("password hashes verify and never equal the password") {
  const auto h = hash_password("secret", HashStrength::Minimal);
  CHECK(h.starts_with("$argon2"));
  CHECK(h.find("secret") == std::string::npos);
  CHECK(verify_password(h, "secret"));
  CHECK_FALSE(verify_password(h, "Secret"));
  CHECK_FALSE(verify_password("garbage", "secret"));
}

TEST_CASE("login round trip and uniform rejection") {
  Env env;
  const auto s = env.svc.login("admin-a", kPassword);
  CHECK(s.token.size() == 64);
  CHECK(env.svc.authenticate(s.token).user_id == "admin-a");
  CHECK(env.svc.list_farms(s.token).size() == 2);

  std::string wrong_pw, no_user;
  try {
    env.svc.login("admin-a", "nope");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Authentication);
    wrong_pw = e.what();
  }
  try {
    env.svc.login("ghost", "nope");
  } catch (const Error& e) {
    no_user = e.what();
  }
  CHECK(wrong_pw == no_user);

  const auto log = env.svc.audit_log(s.token);
  REQUIRE(log.size() == 3);
  CHECK(log[0].outcome == "ok");
  CHECK(log[1].action == "login");
  CHECK(log[1].user_id == "admin-a");
  CHECK(log[1].outcome == "denied");
  CHECK(log[2].outcome == "denied");
}

TEST_CASE("expired tokens are rejected everywhere") {
  Env env;
  const auto tok = env.token("root");
  env.clock.advance(std::chrono::minutes(59));
  CHECK_NOTHROW(env.svc.list_farms(tok));
  env.clock.advance(std::chrono::minutes(1));
  CHECK(kind_of([&] { env.svc.list_farms(tok); }) == ErrorKind::Authentication);
  CHECK(kind_of([&] { env.svc.list_devices(tok); }) == ErrorKind::Authentication);
}

TEST_CASE("ingest is idempotent") {
  Env env;
  const auto batch = rows(samples("p1", 1, 100));
  CHECK(env.svc.ingest_batch(kGatewayA, batch) == 100);
  const auto tok = env.token("admin-a");
  const auto before = env.svc.query_readings(tok, "p1", upto(1000));
  const auto notes_before = env.svc.list_notifications(tok).size();
  CHECK(env.svc.ingest_batch(kGatewayA, batch) == 0);
  CHECK(env.svc.query_readings(tok, "p1", upto(1000)) == before);
  CHECK(env.svc.list_notifications(tok).size() == notes_before);
  CHECK(before.size() == 100);

  // Overlapping replay only stores the new tail.
  CHECK(env.svc.ingest_batch(kGatewayA, rows(samples("p1", 51, 100))) == 50);
}

TEST_CASE("unknown devices are auto-registered with a notification") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("new-palm", 1, 5)));
  const auto tok = env.token("viewer-a");
  const auto d = env.svc.get_device(tok, "new-palm");
  CHECK(d.created_by == CreatedBy::GatewayAutoDetect);
  CHECK(d.farm_id == "farm-a");
  CHECK(d.cluster_id == "c1");
  const auto notes = env.svc.list_notifications(tok, true);
  REQUIRE(notes.size() == 1);
  CHECK(notes[0].kind == NotificationKind::DeviceAutoDetected);
  CHECK(notes[0].payload["device_id"] == "new-palm");

  CHECK(env.svc.mark_notifications_read(tok, {notes[0].id}) == 1);
  CHECK(env.svc.list_notifications(tok, true).empty());
  CHECK(env.svc.list_notifications(tok, false).size() == 1);
}

TEST_CASE("malformed batches are rejected whole with per-row errors") {
  Env env;
  auto batch = rows(samples("p1", 1, 6));
  batch[2].erase("ax");
  batch[4]["timestamp"] = "yesterday";
  batch[5]["device_id"] = "../etc";
  try {
    env.svc.ingest_batch(kGatewayA, batch);
    FAIL("accepted a malformed batch");
  } catch (const BatchError& e) {
    REQUIRE(e.rows().size() == 3);
    CHECK(e.rows()[0].first == 2);
    CHECK(e.rows()[1].first == 4);
    CHECK(e.rows()[2].first == 5);
  }
  const auto tok = env.token("root");
  CHECK(env.svc.list_devices(tok).empty());
  CHECK(env.svc.audit_log(tok).front().outcome == "invalid");

  CHECK_THROWS_AS(env.svc.ingest_batch(kGatewayA, nlohmann::json{{"not", "an array"}}), BatchError);
  CHECK(kind_of([&] { env.svc.ingest_batch("bogus-token", rows(samples("p1", 1, 1))); }) == ErrorKind::Authentication);
}

TEST_CASE("gateways cannot write into another farm's devices") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("p1", 1, 10)));
  auto mixed = samples("q1", 1, 3);
  const auto foreign = samples("p1", 100, 2);
  mixed.insert(mixed.end(), foreign.begin(), foreign.end());
  try {
    env.svc.ingest_batch(kGatewayB, rows(mixed));
    FAIL("cross-farm ingest accepted");
  } catch (const BatchError& e) {
    REQUIRE(e.rows().size() == 2);
    CHECK(e.rows()[0].first == 3);
  }
  const auto tok = env.token("root");
  CHECK(env.svc.query_readings(tok, "p1", upto(100)).size() == 10);
  CHECK_THROWS(env.svc.get_device(tok, "q1"));
}

TEST_CASE("streams only carry subscribed devices") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 1, 1)));
  env.svc.ingest_batch(kGatewayA, rows(samples("d2", 1, 1)));
  const auto tok = env.token("admin-a");
  auto sub = env.svc.subscribe(tok, {"d1"});
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 2, 5)));
  env.svc.ingest_batch(kGatewayA, rows(samples("d2", 2, 5)));
  env.svc.ingest_assessments(kGatewayA, nlohmann::json::array({assessment("d2", t0(), 0)}));
  const auto events = drain_all(*sub);
  REQUIRE(events.size() == 5);
  std::uint64_t expect = 2;
  for (const auto& e : events) {
    CHECK(e.device_id == "d1");
    CHECK(e.type == StreamEvent::Type::Reading);
    CHECK(e.data["seq"] == expect++);
  }
}

TEST_CASE("two subscribers see identical sequences") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 1, 1)));
  const auto tok = env.token("admin-a");
  auto a = env.svc.subscribe(tok, {"d1"});
  auto b = env.svc.subscribe(env.token("viewer-a"), {"d1"});
  std::mt19937 rng(3);
  std::uint64_t seq = 2;
  for (int i = 0; i < 20; ++i) {
    const auto n = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    env.svc.ingest_batch(kGatewayA, rows(samples("d1", seq, n)));
    seq += n;
    if (i % 5 == 4) {
      env.svc.ingest_assessments(kGatewayA,
                                 nlohmann::json::array({assessment("d1", t0() + std::chrono::hours(i), i % 4)}));
    }
  }
  const auto ea = drain_all(*a);
  const auto eb = drain_all(*b);
  REQUIRE(ea.size() == eb.size());
  CHECK(ea.size() == seq - 2 + 4);
  for (std::size_t i = 0; i < ea.size(); ++i) CHECK(nlohmann::json(ea[i]) == nlohmann::json(eb[i]));
}

TEST_CASE("reconnecting resumes from the reconnect time") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 1, 1)));
  const auto tok = env.token("admin-a");
  auto sub = env.svc.subscribe(tok, {"d1"});
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 2, 3)));
  CHECK(sub->next(std::chrono::milliseconds(10)).has_value());
  env.svc.unsubscribe(sub);
  CHECK(sub->closed());
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 5, 3)));  // while disconnected

  auto again = env.svc.subscribe(tok, {"d1"});
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 8, 2)));
  const auto events = drain_all(*again);
  REQUIRE(events.size() == 2);
  CHECK(events[0].data["seq"] == 8);
  CHECK(events[1].data["seq"] == 9);
}

TEST_CASE("subscriptions with foreign devices are rejected whole") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 1, 1)));
  env.svc.ingest_batch(kGatewayB, rows(samples("x9", 1, 1)));
  const auto tok = env.token("admin-a");
  try {
    env.svc.subscribe(tok, {"d1", "x9", "missing"});
    FAIL("subscription accepted");
  } catch (const SubscriptionError& e) {
    CHECK(e.device_ids() == std::vector<DeviceId>{"x9", "missing"});
  }
  CHECK_THROWS_AS(env.svc.subscribe(tok, {}), Error);
}

TEST_CASE("blocking next wakes on publish and on close") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("d1", 1, 1)));
  auto sub = env.svc.subscribe(env.token("admin-a"), {"d1"});
  std::thread producer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    env.svc.ingest_batch(kGatewayA, rows(samples("d1", 2, 1)));
  });
  const auto e = sub->next(std::chrono::seconds(5));
  producer.join();
  REQUIRE(e.has_value());
  CHECK(e->data["seq"] == 2);

  std::thread closer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    env.svc.close_streams();
  });
  const auto start = std::chrono::steady_clock::now();
  CHECK_FALSE(sub->next(std::chrono::seconds(5)).has_value());
  closer.join();
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(2));
}

TEST_CASE("reading queries decimate by uniform stride") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("ten", 1, 10)));
  env.svc.ingest_batch(kGatewayA, rows(samples("big", 1, 1000)));
  const auto tok = env.token("viewer-a");

  CHECK(env.svc.query_readings(tok, "ten", upto(10)).size() == 10);

  const auto all = env.svc.query_readings(tok, "big", upto(5000));
  const auto dec = env.svc.query_readings(tok, "big", upto(100));
  REQUIRE(dec.size() == 100);
  CHECK(dec.front() == all.front());
  CHECK(dec.back() == all.back());
  for (std::size_t i = 1; i < dec.size(); ++i) CHECK(dec[i].seq > dec[i - 1].seq);

  // Empty range is an empty series, not an error.
  ReadingQuery empty{t0() - std::chrono::hours(2), t0() - std::chrono::hours(1), 100};
  CHECK(env.svc.query_readings(tok, "big", empty).empty());
  CHECK(kind_of([&] { env.svc.query_readings(tok, "big", {t0() + std::chrono::hours(1), t0(), 100}); }) ==
        ErrorKind::Validation);

  ReadingQuery ranged{t0() + std::chrono::milliseconds(100), t0() + std::chrono::milliseconds(190), 100};
  const auto r = env.svc.query_readings(tok, "big", ranged);
  REQUIRE(r.size() == 10);
  CHECK(r.front().seq == 10);
  CHECK(r.back().seq == 19);
}

TEST_CASE("decimation stays inside the raw envelope", "[property]") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = std::uniform_int_distribution<std::size_t>(0, 3000)(rng);
    const auto m = std::uniform_int_distribution<std::size_t>(2, 500)(rng);
    std::vector<double> v(n);
    std::normal_distribution<double> g(9.8, 1.0);
    for (auto& x : v) x = g(rng);
    const auto idx = decimation_indices(n, m);
    REQUIRE(idx.size() == std::min(n, m));
    if (n == 0) continue;
    CHECK(idx.front() == 0);
    CHECK(idx.back() == n - 1);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      REQUIRE(idx[k] < n);
      if (k) CHECK(idx[k] > idx[k - 1]);
      CHECK(v[idx[k]] >= *lo);
      CHECK(v[idx[k]] <= *hi);
    }
  }
}

TEST_CASE("packet tracer over stored sequence numbers") {
  Env env;
  std::vector<AccelSample> s;
  for (std::uint64_t q : {1, 2, 4, 5}) s.push_back(samples("p1", q, 1)[0]);
  env.svc.ingest_batch(kGatewayA, rows(s));
  const auto tok = env.token("viewer-a");
  const auto p = env.svc.packet_tracer(tok, "p1");
  CHECK(p.expected == 5);
  CHECK(p.received == 4);
  CHECK(p.received_pct == Approx(80.0));
  CHECK(p.lost_pct == Approx(20.0));

  const auto none = env.svc.packet_tracer(tok, "p1", t0() - std::chrono::hours(2), t0() - std::chrono::hours(1));
  CHECK_FALSE(none.has_data);
}

TEST_CASE("device administration") {
  Env env;
  const auto admin = env.token("admin-a");
  const auto viewer = env.token("viewer-a");
  const auto created = env.svc.create_device(admin, device("palm-1", "farm-a"));
  CHECK(env.svc.get_device(viewer, "palm-1") == created);
  CHECK(created.latitude == 24.7);
  CHECK(created.longitude == 46.6);
  CHECK(created.created_by == CreatedBy::Manual);

  const auto audits = env.svc.audit_size();
  CHECK(kind_of([&] { env.svc.update_device(viewer, "palm-1", {{"latitude", 25.0}}); }) == ErrorKind::Authorization);
  CHECK(env.svc.audit_size() == audits + 1);
  const auto last = env.svc.audit_log(admin).back();
  CHECK(last.action == "update_device");
  CHECK(last.user_id == "viewer-a");
  CHECK(last.target == "palm-1");
  CHECK(last.outcome == "denied");

  CHECK(kind_of([&] { env.svc.create_device(admin, device("palm-2", "farm-a", 95.0)); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { env.svc.create_device(admin, device("palm-1", "farm-a")); }) == ErrorKind::Conflict);
  CHECK(kind_of([&] { env.svc.create_device(admin, device("bad/id", "farm-a")); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { env.svc.create_device(admin, device("palm-3", "farm-b")); }) == ErrorKind::Authorization);
  CHECK(kind_of([&] { env.svc.update_device(admin, "palm-1", {{"farm_id", "farm-b"}}); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { env.svc.update_device(admin, "palm-1", {{"longitude", 200}}); }) == ErrorKind::Validation);

  const auto moved = env.svc.update_device(admin, "palm-1", {{"latitude", 24.8}, {"sensor_placement", "outside"}});
  CHECK(moved.latitude == 24.8);
  CHECK(moved.sensor_placement == Placement::Outside);
  CHECK(env.svc.get_device(viewer, "palm-1") == moved);
}

TEST_CASE("farm overview percentages") {
  Env env;
  const auto admin = env.token("admin-a");
  for (int i = 0; i < 5; ++i) env.svc.create_device(admin, device("p" + std::to_string(i), "farm-a"));
  env.svc.ingest_assessments(kGatewayA, nlohmann::json::array({assessment("p4", t0(), 3)}));
  const auto o = env.svc.farm_overview(admin, "farm-a");
  CHECK(o.palm_count == 5);
  CHECK(o.healthy_pct == Approx(80.0));
  CHECK(o.counts.at(HealthLevel::Healthy) == 4);
  CHECK(o.counts.at(HealthLevel::Infested) == 1);

  const auto empty = env.svc.farm_overview(admin, "farm-empty");
  CHECK(empty.palm_count == 0);
  CHECK(empty.healthy_pct == 100.0);

  const auto root = env.token("root");
  CHECK(kind_of([&] { env.svc.farm_overview(root, "nowhere"); }) == ErrorKind::NotFound);
  CHECK(kind_of([&] { env.svc.farm_overview(admin, "farm-b"); }) == ErrorKind::Authorization);
}

TEST_CASE("overview counts always sum to the device count", "[property]") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Env env;
    const auto admin = env.token("admin-a");
    const auto n = std::uniform_int_distribution<int>(0, 25)(rng);
    std::size_t healthy = 0;
    nlohmann::json batch = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
      const auto id = "p" + std::to_string(i);
      env.svc.create_device(admin, device(id, "farm-a"));
      const int fired = std::uniform_int_distribution<int>(0, 4)(rng);
      if (fired <= 1) ++healthy;
      batch.push_back(assessment(id, t0(), fired));
    }
    env.svc.ingest_assessments(kGatewayA, batch);
    const auto o = env.svc.farm_overview(admin, "farm-a");
    std::size_t sum = 0;
    for (const auto& [_, c] : o.counts) sum += c;
    CHECK(sum == static_cast<std::size_t>(n));
    CHECK(o.palm_count == static_cast<std::size_t>(n));
    CHECK(o.counts.at(HealthLevel::Healthy) == healthy);
  }
}

TEST_CASE("status notifications fire exactly on likelihood changes") {
  Env env;
  const auto tok = env.token("admin-a");
  env.svc.create_device(tok, device("p1", "farm-a"));
  const std::vector<int> fired{0, 1, 2, 2, 4, 3, 0, 0, 2};
  int expected = 0;
  Likelihood prev = Likelihood::Low;
  for (std::size_t i = 0; i < fired.size(); ++i) {
    const auto a = assessment("p1", t0() + std::chrono::hours(i), fired[i]);
    if (a.likelihood != prev) ++expected;
    prev = a.likelihood;
    env.svc.ingest_assessments(kGatewayA, nlohmann::json::array({a}));
  }
  int changes = 0;
  for (const auto& n : env.svc.list_notifications(tok)) {
    if (n.kind == NotificationKind::StatusChange) ++changes;
  }
  CHECK(changes == expected);
  CHECK(env.svc.get_device(tok, "p1").status.likelihood == Likelihood::Medium);

  // A late, older assessment is stored but does not rewind the status.
  env.svc.ingest_assessments(kGatewayA, nlohmann::json::array({assessment("p1", t0() - std::chrono::hours(1), 4)}));
  CHECK(env.svc.get_device(tok, "p1").status.likelihood == Likelihood::Medium);
  CHECK(env.svc.list_assessments(tok, "p1").size() == fired.size() + 1);
}

TEST_CASE("no data crosses farm boundaries") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("a1", 1, 20)));
  env.svc.ingest_digests(kGatewayA, nlohmann::json::array({Digest{"a1", t0(), 20, 9.8, 9.8, 9.81}}));
  env.svc.ingest_assessments(kGatewayA, nlohmann::json::array({assessment("a1", t0(), 2)}));
  env.svc.ingest_batch(kGatewayB, rows(samples("b1", 1, 20)));

  const auto intruder = env.token("admin-b");
  const std::vector<std::function<void()>> probes{
      [&] { env.svc.get_device(intruder, "a1"); },
      [&] { env.svc.query_readings(intruder, "a1", {}); },
      [&] { env.svc.list_digests(intruder, "a1"); },
      [&] { env.svc.list_assessments(intruder, "a1"); },
      [&] { env.svc.packet_tracer(intruder, "a1"); },
      [&] { env.svc.farm_overview(intruder, "farm-a"); },
      [&] { env.svc.list_devices(intruder, std::string("farm-a")); },
      [&] { env.svc.update_device(intruder, "a1", {{"latitude", 1.0}}); },
      [&] { env.svc.create_device(intruder, device("z", "farm-a")); },
      [&] { env.svc.assess_stored(intruder, "a1", t0(), t0() + std::chrono::seconds(1), t0(), t0() + std::chrono::seconds(1)); },
      [&] { env.svc.subscribe(intruder, {"a1"}); },
  };
  for (const auto& p : probes) CHECK(kind_of(p) == ErrorKind::Authorization);

  for (const auto& d : env.svc.list_devices(intruder)) CHECK(d.farm_id == "farm-b");
  for (const auto& f : env.svc.list_farms(intruder)) CHECK(f.farm_id == "farm-b");
  for (const auto& n : env.svc.list_notifications(intruder)) CHECK(n.farm_id == "farm-b");
  CHECK(kind_of([&] { env.svc.audit_log(env.token("viewer-a")); }) == ErrorKind::Authorization);

  // Every endpoint except login refuses missing and made-up tokens.
  for (const std::string bad : {"", "0123456789abcdef"}) {
    const std::vector<std::function<void()>> calls{
        [&] { env.svc.list_farms(bad); },
        [&] { env.svc.farm_overview(bad, "farm-a"); },
        [&] { env.svc.list_devices(bad); },
        [&] { env.svc.get_device(bad, "a1"); },
        [&] { env.svc.create_device(bad, device("z", "farm-a")); },
        [&] { env.svc.update_device(bad, "a1", {{"latitude", 1.0}}); },
        [&] { env.svc.query_readings(bad, "a1", {}); },
        [&] { env.svc.list_digests(bad, "a1"); },
        [&] { env.svc.list_assessments(bad, "a1"); },
        [&] { env.svc.packet_tracer(bad, "a1"); },
        [&] { env.svc.assess_stored(bad, "a1", t0(), t0(), t0(), t0()); },
        [&] { env.svc.list_notifications(bad); },
        [&] { env.svc.mark_notifications_read(bad, {1}); },
        [&] { env.svc.audit_log(bad); },
        [&] { env.svc.subscribe(bad, {"a1"}); },
        [&] { env.svc.ingest_batch(bad, nlohmann::json::array()); },
        [&] { env.svc.ingest_digests(bad, nlohmann::json::array()); },
        [&] { env.svc.ingest_assessments(bad, nlohmann::json::array()); },
    };
    for (const auto& c : calls) CHECK(kind_of(c) == ErrorKind::Authentication);
  }
  // User tokens are not gateway tokens and vice versa.
  CHECK(kind_of([&] { env.svc.ingest_batch(intruder, nlohmann::json::array()); }) == ErrorKind::Authentication);
  CHECK(kind_of([&] { env.svc.list_farms(kGatewayA); }) == ErrorKind::Authentication);
}

TEST_CASE("every mutating call writes exactly one audit entry") {
  Env env;
  std::size_t mutations = 0;
  auto mutate = [&](const std::function<void()>& f) {
    ++mutations;
    try {
      f();
    } catch (const Error&) {
    }
  };
  std::string admin, viewer;
  mutate([&] { admin = env.token("admin-a"); });
  mutate([&] { viewer = env.token("viewer-a"); });
  mutate([&] { env.svc.login("admin-a", "wrong"); });
  mutate([&] { env.svc.create_device(admin, device("p1", "farm-a")); });
  mutate([&] { env.svc.create_device(admin, device("p1", "farm-a")); });
  mutate([&] { env.svc.create_device(viewer, device("p2", "farm-a")); });
  mutate([&] { env.svc.create_device(admin, device("p3", "farm-a", -91)); });
  mutate([&] { env.svc.update_device(admin, "p1", {{"latitude", 20.0}}); });
  mutate([&] { env.svc.update_device(admin, "missing", {{"latitude", 20.0}}); });
  mutate([&] { env.svc.update_device("", "p1", {{"latitude", 20.0}}); });
  mutate([&] { env.svc.ingest_batch(kGatewayA, rows(samples("p1", 1, 50))); });
  mutate([&] { env.svc.ingest_batch(kGatewayA, rows(samples("p1", 1, 50))); });
  mutate([&] { env.svc.ingest_batch(kGatewayA, nlohmann::json::array({{{"device_id", "p1"}}})); });
  mutate([&] { env.svc.ingest_samples(kGatewayA, samples("p1", 51, 10)); });
  mutate([&] { env.svc.ingest_digests(kGatewayA, nlohmann::json::array({Digest{"p1", t0(), 1, 1, 1, 1}})); });
  mutate([&] { env.svc.ingest_assessments(kGatewayA, nlohmann::json::array({assessment("p1", t0(), 2)})); });
  mutate([&] { env.svc.ingest_assessments(kGatewayB, nlohmann::json::array({assessment("p1", t0(), 2)})); });
  mutate([&] { env.svc.mark_notifications_read(viewer, {1, 2, 3}); });
  mutate([&] {
    env.svc.assess_stored(admin, "p1", t0(), t0() + std::chrono::milliseconds(300), t0() + std::chrono::milliseconds(300),
                          t0() + std::chrono::milliseconds(600));
  });
  mutate([&] { env.svc.assess_stored(viewer, "p1", t0(), t0(), t0(), t0()); });

  // Reads never audit.
  env.svc.list_devices(admin);
  env.svc.query_readings(admin, "p1", {});
  env.svc.list_notifications(admin);
  CHECK(env.svc.audit_size() == mutations);

  std::set<std::uint64_t> ids;
  for (const auto& e : env.svc.audit_log(admin)) ids.insert(e.id);
  CHECK(ids.size() == mutations);
}

TEST_CASE("everything streamed is queryable") {
  Env env;
  env.svc.ingest_batch(kGatewayA, rows(samples("s1", 1, 1)));
  env.svc.ingest_batch(kGatewayA, rows(samples("s2", 1, 1)));
  const auto tok = env.token("admin-a");
  auto sub = env.svc.subscribe(tok, {"s1", "s2"});

  std::vector<std::thread> writers;
  for (const std::string id : {"s1", "s2"}) {
    writers.emplace_back([&, id] {
      for (std::uint64_t k = 0; k < 20; ++k) {
        env.svc.ingest_batch(kGatewayA, rows(samples(id, 2 + 25 * k, 25)));
        if (k % 5 == 0) {
          env.svc.ingest_assessments(
              kGatewayA, nlohmann::json::array({assessment(id, t0() + std::chrono::hours(k), int(k % 3))}));
        }
      }
    });
  }
  for (auto& w : writers) w.join();
  const auto events = drain_all(*sub);
  CHECK(events.size() == 2 * (500 + 4));

  std::map<DeviceId, std::uint64_t> last_seq;
  for (const auto& e : events) {
    if (e.type == StreamEvent::Type::Reading) {
      const auto s = e.data.get<AccelSample>();
      CHECK(s.seq > last_seq[e.device_id]);
      last_seq[e.device_id] = s.seq;
      ReadingQuery q{s.timestamp, s.timestamp, 10};
      const auto stored = env.svc.query_readings(tok, e.device_id, q);
      REQUIRE(stored.size() == 1);
      CHECK(stored[0] == s);
    } else {
      const auto a = e.data.get<detector::HealthAssessment>();
      const auto stored = env.svc.list_assessments(tok, e.device_id, a.window_start, a.window_start);
      REQUIRE(stored.size() == 1);
      CHECK(nlohmann::json(stored[0]) == e.data);
    }
  }
}

TEST_CASE("cloud-side assessment of stored windows") {
  Env env;
  const auto tok = env.token("admin-a");
  auto healthy = fieldsim::generate_stream("p1", fieldsim::SignalModel::defaults_for(Placement::Inside), 600, 1, 100.0, t0());
  env.svc.ingest_samples(kGatewayA, healthy);
  const auto a = env.svc.assess_stored(tok, "p1", t0(), t0() + std::chrono::minutes(5), t0() + std::chrono::minutes(5),
                                       t0() + std::chrono::minutes(10));
  CHECK(a.likelihood == Likelihood::Low);
  CHECK(env.svc.list_assessments(tok, "p1").size() == 1);
  CHECK(kind_of([&] {
          env.svc.assess_stored(tok, "p1", t0() + std::chrono::hours(5), t0() + std::chrono::hours(6), t0(),
                                t0() + std::chrono::minutes(5));
        }) == ErrorKind::InsufficientData);
}

TEST_CASE("stored state survives a restart") {
  TempDir dir;
  auto cfg = two_farms();
  cfg.storage_dir = dir.path;
  std::vector<AccelSample> before;
  std::size_t audits = 0;
  {
    ManualClock clock;
    Service svc(cfg, clock.fn());
    svc.ingest_batch(kGatewayA, rows(samples("p1", 1, 300)));
    clock.advance(std::chrono::hours(1));
    svc.ingest_batch(kGatewayA, rows(samples("p1", 400'000, 10)));
    svc.ingest_digests(kGatewayA, nlohmann::json::array({Digest{"p1", t0(), 300, 9.8, 9.801, 9.806}}));
    svc.ingest_assessments(kGatewayA, nlohmann::json::array({assessment("p1", t0(), 4)}));
    const auto tok = svc.login("admin-a", kPassword).token;
    svc.create_device(tok, device("manual", "farm-a"));
    before = svc.query_readings(tok, "p1", upto(10'000));
    audits = svc.audit_size();
    svc.flush();
  }
  CHECK(fs::exists(dir.path / "index.json"));

  ManualClock clock;
  Service svc(cfg, clock.fn());
  const auto tok = svc.login("admin-a", kPassword).token;
  CHECK(svc.query_readings(tok, "p1", upto(10'000)) == before);
  CHECK(svc.list_digests(tok, "p1").size() == 1);
  CHECK(svc.list_assessments(tok, "p1").size() == 1);
  CHECK(svc.get_device(tok, "p1").status.likelihood == Likelihood::High);
  CHECK(svc.get_device(tok, "manual").created_by == CreatedBy::Manual);
  CHECK(svc.list_notifications(tok).size() == 2);
  CHECK(svc.audit_size() == audits + 1);
  CHECK(svc.ingest_batch(kGatewayA, rows(samples("p1", 1, 300))) == 0);
}

TEST_CASE("service config documents") {
  const auto hash = hash_password("pw", HashStrength::Minimal);
  const std::string doc = "bind: 0.0.0.0\n"
                          "port: 9000\n"
                          "storage_dir: data\n"
                          "token_ttl_seconds: 600\n"
                          "detector:\n"
                          "  whisker_ratio_min: 1.4\n"
                          "farms:\n"
                          "  - farm_id: f1\n"
                          "    name: North\n"
                          "users:\n"
                          "  - user_id: u1\n"
                          "    password_hash: '" + hash + "'\n"
                          "    role: admin\n"
                          "    farms: ['*']\n"
                          "gateways:\n"
                          "  - token: abcdefghijklmnopqrstu\n"
                          "    gateway_id: g1\n"
                          "    farm_id: f1\n"
                          "    cluster_id: c1\n";
  const auto c = parse_service_config(doc, "svc.yaml");
  CHECK(c.bind_host == "0.0.0.0");
  CHECK(c.port == 9000);
  CHECK(c.token_ttl == std::chrono::seconds(600));
  CHECK(c.detector.whisker_ratio_min == 1.4);
  REQUIRE(c.users.size() == 1);
  CHECK(c.users[0].role == Role::Admin);
  CHECK(c.gateways[0].farm_id == "f1");

  auto error_of = [](const std::string& text) {
    try {
      parse_service_config(text, "svc.yaml");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Configuration);
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  CHECK(error_of("port: 70000\n").starts_with("svc.yaml:1:"));
  CHECK(error_of("farms:\n  - farm_id: f1\nusers:\n  - user_id: u\n    password_hash: plain\n").starts_with("svc.yaml:5:"));
  CHECK(error_of("farms:\n  - farm_id: f1\ngateways:\n  - token: short\n    gateway_id: g\n    farm_id: f1\n    cluster_id: c\n")
            .starts_with("svc.yaml:4:"));
  CHECK(error_of("colour: blue\n").starts_with("svc.yaml:1:"));
}
