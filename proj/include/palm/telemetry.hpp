#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace palm {

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;
using DeviceId = std::string;

// ISO-8601 UTC with millisecond precision, e.g. 2019-06-01T10:00:00.010Z.
std::string format_timestamp(Timestamp t);
// Accepts an optional fractional part (up to ms) and a Z / +00:00 suffix.
Timestamp parse_timestamp(std::string_view text);
std::optional<Timestamp> try_parse_timestamp(std::string_view text) noexcept;

// Euclidean norm of a three-axis reading. Throws RejectedSample on non-finite input.
double magnitude_of(double ax, double ay, double az);

struct AccelSample {
  DeviceId device_id;
  std::uint64_t seq = 0;
  Timestamp timestamp{};
  double ax = 0.0;
  double ay = 0.0;
  double az = 0.0;
  double magnitude = 0.0;
  std::map<std::string, double> extra;  // auxiliary sensor channels, not analyzed

  static AccelSample make(DeviceId device, std::uint64_t seq, Timestamp t, double ax, double ay,
                          double az);

  bool operator==(const AccelSample&) const = default;
};

struct SampleWindow {
  DeviceId device_id;
  Timestamp window_start{};
  std::chrono::seconds nominal_duration{3600};
  double sample_rate_hz = 100.0;
  std::vector<AccelSample> samples;

  std::vector<double> magnitudes() const;
  Timestamp window_end() const { return window_start + nominal_duration; }

  bool operator==(const SampleWindow&) const = default;
};

// Builds a window from bare magnitudes; used by tests and summary-only paths.
SampleWindow window_from_magnitudes(const DeviceId& device, std::vector<double> magnitudes,
                                    double sample_rate_hz = 100.0,
                                    Timestamp start = Timestamp{});

enum class Placement { Inside, Outside };
enum class Likelihood { Low, Medium, High };
enum class HealthLevel { Healthy, Suspect, Infested };
enum class CreatedBy { Manual, GatewayAutoDetect };

HealthLevel level_for(Likelihood likelihood) noexcept;
std::string_view color_for(HealthLevel level) noexcept;

std::string_view to_string(Placement p) noexcept;
std::string_view to_string(Likelihood l) noexcept;
std::string_view to_string(HealthLevel l) noexcept;
std::string_view to_string(CreatedBy c) noexcept;
Placement placement_from_string(std::string_view s);
Likelihood likelihood_from_string(std::string_view s);
CreatedBy created_by_from_string(std::string_view s);

struct HealthStatus {
  Likelihood likelihood = Likelihood::Low;
  Timestamp updated_at{};

  HealthLevel level() const noexcept { return level_for(likelihood); }
  bool operator==(const HealthStatus&) const = default;
};

struct DeviceRecord {
  DeviceId device_id;
  std::string farm_id;
  std::string cluster_id;
  double latitude = 0.0;
  double longitude = 0.0;
  Placement sensor_placement = Placement::Inside;
  std::vector<std::string> sensors{"accelerometer"};
  HealthStatus status;
  CreatedBy created_by = CreatedBy::Manual;

  bool operator==(const DeviceRecord&) const = default;
};

// Throws Validation when coordinates are out of range or ids are empty.
void validate(const DeviceRecord& device);

struct FarmRecord {
  std::string farm_id;
  std::string name;
  std::vector<std::string> owners;
  std::vector<std::string> clusters;

  bool operator==(const FarmRecord&) const = default;
};

struct Digest {
  DeviceId device_id;
  Timestamp window_start{};
  std::uint64_t count = 0;
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;

  bool operator==(const Digest&) const = default;
};

void to_json(nlohmann::json& j, const AccelSample& s);
void from_json(const nlohmann::json& j, AccelSample& s);
void to_json(nlohmann::json& j, const SampleWindow& w);
void from_json(const nlohmann::json& j, SampleWindow& w);
void to_json(nlohmann::json& j, const HealthStatus& s);
void from_json(const nlohmann::json& j, HealthStatus& s);
void to_json(nlohmann::json& j, const DeviceRecord& d);
void from_json(const nlohmann::json& j, DeviceRecord& d);
void to_json(nlohmann::json& j, const FarmRecord& f);
void from_json(const nlohmann::json& j, FarmRecord& f);
void to_json(nlohmann::json& j, const Digest& d);
void from_json(const nlohmann::json& j, Digest& d);

}  // namespace palm
