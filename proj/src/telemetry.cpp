#include "palm/telemetry.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>

#include "palm/errors.hpp"

namespace palm {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::RejectedSample: return "rejected_sample";
    case ErrorKind::Io: return "io";
    case ErrorKind::CorruptInput: return "corrupt_input";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::EmptyInput: return "empty_input";
    case ErrorKind::InsufficientData: return "insufficient_data";
    case ErrorKind::EmptyBand: return "empty_band";
    case ErrorKind::Comparison: return "comparison";
    case ErrorKind::Ordering: return "ordering";
    case ErrorKind::Size: return "size";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Authentication: return "authentication";
    case ErrorKind::Authorization: return "authorization";
    case ErrorKind::NotFound: return "not_found";
    case ErrorKind::Conflict: return "conflict";
  }
  return "unknown";
}

namespace {

bool read_int(std::string_view text, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > text.size()) return false;
  const char* first = text.data() + pos;
  const char* last = first + len;
  for (const char* p = first; p != last; ++p) {
    if (*p < '0' || *p > '9') return false;
  }
  return std::from_chars(first, last, out).ec == std::errc{};
}

}  // namespace

std::optional<Timestamp> try_parse_timestamp(std::string_view text) noexcept {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  if (!read_int(text, 0, 4, y) || text.size() < 19 || text[4] != '-' || !read_int(text, 5, 2, mo) ||
      text[7] != '-' || !read_int(text, 8, 2, d) || (text[10] != 'T' && text[10] != ' ') ||
      !read_int(text, 11, 2, h) || text[13] != ':' || !read_int(text, 14, 2, mi) ||
      text[16] != ':' || !read_int(text, 17, 2, s)) {
    return std::nullopt;
  }
  std::size_t pos = 19;
  int millis = 0;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
      if (digits < 3) millis = millis * 10 + (text[pos] - '0');
      ++digits;
      ++pos;
    }
    if (digits == 0) return std::nullopt;
    for (int k = digits; k < 3; ++k) millis *= 10;
  }
  std::string_view suffix = text.substr(pos);
  if (!(suffix == "Z" || suffix == "+00:00" || suffix.empty())) return std::nullopt;

  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return std::nullopt;
  return Timestamp{sys_days{ymd}} + hours{h} + minutes{mi} + seconds{s} + milliseconds{millis};
}

Timestamp parse_timestamp(std::string_view text) {
  auto t = try_parse_timestamp(text);
  if (!t) throw Error(ErrorKind::Validation, "invalid timestamp '" + std::string(text) + "'");
  return *t;
}

std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  const auto day_point = floor<days>(t);
  const year_month_day ymd{day_point};
  auto rest = t - day_point;
  const auto h = duration_cast<hours>(rest);
  rest -= h;
  const auto mi = duration_cast<minutes>(rest);
  rest -= mi;
  const auto s = duration_cast<seconds>(rest);
  rest -= s;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(h.count()), static_cast<int>(mi.count()),
                static_cast<int>(s.count()), static_cast<int>(rest.count()));
  return buf;
}

double magnitude_of(double ax, double ay, double az) {
  if (!std::isfinite(ax) || !std::isfinite(ay) || !std::isfinite(az)) {
    throw Error(ErrorKind::RejectedSample, "non-finite acceleration component");
  }
  return std::hypot(ax, ay, az);
}

AccelSample AccelSample::make(DeviceId device, std::uint64_t seq, Timestamp t, double ax, double ay,
                              double az) {
  AccelSample s;
  s.device_id = std::move(device);
  s.seq = seq;
  s.timestamp = t;
  s.ax = ax;
  s.ay = ay;
  s.az = az;
  s.magnitude = magnitude_of(ax, ay, az);
  return s;
}

std::vector<double> SampleWindow::magnitudes() const {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.magnitude);
  return out;
}

SampleWindow window_from_magnitudes(const DeviceId& device, std::vector<double> magnitudes,
                                    double sample_rate_hz, Timestamp start) {
  SampleWindow w;
  w.device_id = device;
  w.window_start = start;
  w.sample_rate_hz = sample_rate_hz;
  w.samples.reserve(magnitudes.size());
  const double step_ms = 1000.0 / sample_rate_hz;
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    AccelSample s;
    s.device_id = device;
    s.seq = i;
    s.timestamp = start + std::chrono::milliseconds(static_cast<long long>(std::llround(i * step_ms)));
    s.az = magnitudes[i];
    s.magnitude = magnitudes[i];
    w.samples.push_back(std::move(s));
  }
  return w;
}

HealthLevel level_for(Likelihood likelihood) noexcept {
  switch (likelihood) {
    case Likelihood::Low: return HealthLevel::Healthy;
    case Likelihood::Medium: return HealthLevel::Suspect;
    case Likelihood::High: return HealthLevel::Infested;
  }
  return HealthLevel::Healthy;
}

std::string_view color_for(HealthLevel level) noexcept {
  switch (level) {
    case HealthLevel::Healthy: return "green";
    case HealthLevel::Suspect: return "yellow";
    case HealthLevel::Infested: return "red";
  }
  return "green";
}

std::string_view to_string(Placement p) noexcept { return p == Placement::Inside ? "inside" : "outside"; }

std::string_view to_string(Likelihood l) noexcept {
  switch (l) {
    case Likelihood::Low: return "low";
    case Likelihood::Medium: return "medium";
    case Likelihood::High: return "high";
  }
  return "low";
}

std::string_view to_string(HealthLevel l) noexcept {
  switch (l) {
    case HealthLevel::Healthy: return "healthy";
    case HealthLevel::Suspect: return "suspect";
    case HealthLevel::Infested: return "infested";
  }
  return "healthy";
}

std::string_view to_string(CreatedBy c) noexcept {
  return c == CreatedBy::Manual ? "manual" : "gateway_auto_detect";
}

Placement placement_from_string(std::string_view s) {
  if (s == "inside") return Placement::Inside;
  if (s == "outside") return Placement::Outside;
  throw Error(ErrorKind::Validation, "unknown placement '" + std::string(s) + "'");
}

Likelihood likelihood_from_string(std::string_view s) {
  if (s == "low") return Likelihood::Low;
  if (s == "medium") return Likelihood::Medium;
  if (s == "high") return Likelihood::High;
  throw Error(ErrorKind::Validation, "unknown likelihood '" + std::string(s) + "'");
}

CreatedBy created_by_from_string(std::string_view s) {
  if (s == "manual") return CreatedBy::Manual;
  if (s == "gateway_auto_detect") return CreatedBy::GatewayAutoDetect;
  throw Error(ErrorKind::Validation, "unknown created_by '" + std::string(s) + "'");
}

void validate(const DeviceRecord& device) {
  if (device.device_id.empty()) throw Error(ErrorKind::Validation, "device_id must not be empty");
  if (!(device.latitude >= -90.0 && device.latitude <= 90.0)) {
    throw Error(ErrorKind::Validation, "latitude out of range [-90, 90]");
  }
  if (!(device.longitude >= -180.0 && device.longitude <= 180.0)) {
    throw Error(ErrorKind::Validation, "longitude out of range [-180, 180]");
  }
}

void to_json(nlohmann::json& j, const AccelSample& s) {
  j = nlohmann::json{{"device_id", s.device_id},
                     {"seq", s.seq},
                     {"timestamp", format_timestamp(s.timestamp)},
                     {"ax", s.ax},
                     {"ay", s.ay},
                     {"az", s.az},
                     {"magnitude", s.magnitude}};
  if (!s.extra.empty()) j["extra"] = s.extra;
}

void from_json(const nlohmann::json& j, AccelSample& s) {
  s.device_id = j.at("device_id").get<std::string>();
  s.seq = j.at("seq").get<std::uint64_t>();
  s.timestamp = parse_timestamp(j.at("timestamp").get<std::string>());
  s.ax = j.at("ax").get<double>();
  s.ay = j.at("ay").get<double>();
  s.az = j.at("az").get<double>();
  const double computed = magnitude_of(s.ax, s.ay, s.az);
  if (auto it = j.find("magnitude"); it != j.end()) {
    s.magnitude = it->get<double>();
    if (std::abs(s.magnitude - computed) > 1e-6 * std::max(1.0, computed)) {
      throw Error(ErrorKind::Validation, "magnitude does not match axis norm");
    }
  } else {
    s.magnitude = computed;
  }
  s.extra.clear();
  if (auto it = j.find("extra"); it != j.end()) s.extra = it->get<std::map<std::string, double>>();
}

void to_json(nlohmann::json& j, const SampleWindow& w) {
  j = nlohmann::json{{"device_id", w.device_id},
                     {"window_start", format_timestamp(w.window_start)},
                     {"nominal_duration", w.nominal_duration.count()},
                     {"sample_rate_hz", w.sample_rate_hz},
                     {"samples", w.samples}};
}

void from_json(const nlohmann::json& j, SampleWindow& w) {
  w.device_id = j.at("device_id").get<std::string>();
  w.window_start = parse_timestamp(j.at("window_start").get<std::string>());
  w.nominal_duration = std::chrono::seconds(j.value("nominal_duration", 3600));
  w.sample_rate_hz = j.value("sample_rate_hz", 100.0);
  w.samples = j.at("samples").get<std::vector<AccelSample>>();
}

void to_json(nlohmann::json& j, const HealthStatus& s) {
  j = nlohmann::json{{"level", to_string(s.level())},
                     {"color", color_for(s.level())},
                     {"likelihood", to_string(s.likelihood)},
                     {"updated_at", format_timestamp(s.updated_at)}};
}

void from_json(const nlohmann::json& j, HealthStatus& s) {
  s.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  s.updated_at = parse_timestamp(j.at("updated_at").get<std::string>());
}

void to_json(nlohmann::json& j, const DeviceRecord& d) {
  j = nlohmann::json{{"device_id", d.device_id},
                     {"farm_id", d.farm_id},
                     {"cluster_id", d.cluster_id},
                     {"latitude", d.latitude},
                     {"longitude", d.longitude},
                     {"sensor_placement", to_string(d.sensor_placement)},
                     {"sensors", d.sensors},
                     {"status", d.status},
                     {"created_by", to_string(d.created_by)}};
}

void from_json(const nlohmann::json& j, DeviceRecord& d) {
  d.device_id = j.at("device_id").get<std::string>();
  d.farm_id = j.value("farm_id", std::string{});
  d.cluster_id = j.value("cluster_id", std::string{});
  d.latitude = j.at("latitude").get<double>();
  d.longitude = j.at("longitude").get<double>();
  d.sensor_placement = placement_from_string(j.value("sensor_placement", std::string{"inside"}));
  d.sensors = j.value("sensors", std::vector<std::string>{"accelerometer"});
  d.status = j.contains("status") ? j.at("status").get<HealthStatus>() : HealthStatus{};
  d.created_by = created_by_from_string(j.value("created_by", std::string{"manual"}));
}

void to_json(nlohmann::json& j, const FarmRecord& f) {
  j = nlohmann::json{
      {"farm_id", f.farm_id}, {"name", f.name}, {"owners", f.owners}, {"clusters", f.clusters}};
}

void from_json(const nlohmann::json& j, FarmRecord& f) {
  f.farm_id = j.at("farm_id").get<std::string>();
  f.name = j.value("name", std::string{});
  f.owners = j.value("owners", std::vector<std::string>{});
  f.clusters = j.value("clusters", std::vector<std::string>{});
}

void to_json(nlohmann::json& j, const Digest& d) {
  j = nlohmann::json{{"device_id", d.device_id},
                     {"window_start", format_timestamp(d.window_start)},
                     {"count", d.count},
                     {"min", d.min},
                     {"mean", d.mean},
                     {"max", d.max}};
}

void from_json(const nlohmann::json& j, Digest& d) {
  d.device_id = j.at("device_id").get<std::string>();
  d.window_start = parse_timestamp(j.at("window_start").get<std::string>());
  d.count = j.at("count").get<std::uint64_t>();
  d.min = j.at("min").get<double>();
  d.mean = j.at("mean").get<double>();
  d.max = j.at("max").get<double>();
  if (d.count == 0 || !(d.min <= d.mean && d.mean <= d.max)) {
    throw Error(ErrorKind::Validation, "digest violates count > 0 and min <= mean <= max");
  }
}

}  // namespace palm
