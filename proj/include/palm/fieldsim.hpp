#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palm/detector.hpp"
#include "palm/telemetry.hpp"

namespace palm::fieldsim {

/// Generative model for one sensor's magnitude stream (m/s^2).
///
/// Healthy output is white Gaussian about baseline_mean. Once infested, the
/// stream gains a mean offset, low-passed Gaussian "activity" noise and
/// Poisson-arriving damped sinusoid bursts.
struct SignalModel {
  double baseline_mean = 9.74;
  double baseline_std = 0.25;
  double burst_rate_per_min = 6.0;
  double burst_freq_lo_hz = 1.0;
  double burst_freq_hi_hz = 8.0;
  double burst_amplitude = 0.6;
  double burst_duration_s = 0.5;
  double activity_offset = 0.20;
  double activity_std = 0.27;
  double activity_cutoff_hz = 10.0;
  double cross_axis_std = 0.02;  // x/y noise; all signal rides on z

  static SignalModel defaults_for(Placement placement);
  bool operator==(const SignalModel&) const = default;
};

/// Stateful sample source for one device. Seq numbers start at 0 and
/// timestamps advance by 1/sample_rate_hz.
class SensorGenerator {
 public:
  SensorGenerator(DeviceId device, SignalModel model, double sample_rate_hz, Timestamp start, std::uint64_t seed,
                  std::optional<double> infested_from_seconds = std::nullopt);

  AccelSample next();
  std::vector<AccelSample> next_batch(std::size_t count);
  std::uint64_t produced() const { return seq_; }

 private:
  struct Burst {
    double start_s;
    double freq_hz;
    double phase;
  };

  DeviceId device_;
  SignalModel model_;
  double fs_;
  Timestamp start_;
  std::optional<double> onset_s_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> unit_{0.0, 1.0};
  std::uint64_t seq_ = 0;
  double ar_state_ = 0.0;
  double ar_coeff_ = 0.0;
  double next_burst_s_ = -1.0;
  std::deque<Burst> bursts_;
};

/// Convenience over SensorGenerator; duration must be positive.
std::vector<AccelSample> generate_stream(const DeviceId& device, const SignalModel& model, double duration_seconds,
                                         std::uint64_t seed, double sample_rate_hz = 100.0,
                                         Timestamp start = Timestamp{},
                                         std::optional<double> infested_from_seconds = std::nullopt);

struct DeviceSpec {
  DeviceId device_id;
  Placement placement = Placement::Inside;
  bool infested = false;
  double onset_seconds = 0.0;
  double latitude = 0.0;
  double longitude = 0.0;
  bool registered = true;  // known to its gateway before the run
  SignalModel signal;
};

struct ClusterSpec {
  std::string cluster_id;
  std::string gateway_id;
  double loss_probability = 0.0;
  std::vector<DeviceSpec> devices;
};

struct FarmSpec {
  std::string farm_id;
  std::string name;
  std::vector<ClusterSpec> clusters;
};

struct SimConfig {
  std::uint64_t seed = 1;
  Timestamp start_time{};
  double duration_seconds = 3600.0;
  double sample_rate_hz = 100.0;
  double digest_interval_seconds = 3600.0;
  std::size_t baseline_intervals = 3;
  double time_compression = 0.0;  // simulated seconds per real second; 0 runs flat out
  double batch_seconds = 60.0;
  detector::DetectorConfig detector;
  std::vector<FarmSpec> farms;
};

/// Parses the YAML document form. Errors are Configuration with a
/// "<source>:<line>: " prefix.
SimConfig parse_sim_config(const std::string& text, const std::string& source_name = "config");
SimConfig load_sim_config(const std::filesystem::path& path);
/// Throws Configuration on out-of-range values or duplicate ids.
void validate(const SimConfig& config);

/// Flat YAML (or JSON) detector document, e.g. for analyze overrides.
detector::DetectorConfig load_detector_config(const std::filesystem::path& path);

struct AutoRegistration {
  std::string gateway_id;
  DeviceRecord device;
};

struct ForwardResult {
  std::vector<AccelSample> to_edge;
  std::vector<AccelSample> to_cloud;
  std::uint64_t dropped = 0;
  std::map<DeviceId, std::uint64_t> dropped_by_device;
  std::vector<AutoRegistration> registrations;
};

/// One LoRa gateway. Loss happens on the radio hop: one draw per sample, a
/// dropped sample reaches neither destination.
class Gateway {
 public:
  Gateway(std::string gateway_id, std::string farm_id, std::string cluster_id, double loss_probability,
          std::uint64_t seed, std::set<DeviceId> known_devices = {});

  ForwardResult forward(std::span<const AccelSample> batch);
  const std::string& id() const { return id_; }
  bool knows(const DeviceId& device) const { return known_.contains(device); }

 private:
  std::string id_;
  std::string farm_id_;
  std::string cluster_id_;
  double loss_;
  std::mt19937_64 rng_;
  std::bernoulli_distribution drop_;
  std::set<DeviceId> known_;
};

/// Local aggregation: closes fixed intervals into digests and, after
/// `baseline_intervals` intervals per device, assesses each interval.
class Edge {
 public:
  struct Output {
    std::vector<Digest> digests;
    std::vector<detector::HealthAssessment> assessments;
  };

  Edge(Timestamp origin, double interval_seconds, double sample_rate_hz, std::size_t baseline_intervals,
       detector::DetectorConfig config, std::map<DeviceId, Placement> placements = {});

  /// Feeds delivered samples (time-ordered per device). Returns whatever
  /// intervals closed as a result.
  Output receive(std::span<const AccelSample> samples);
  /// Closes every open interval.
  Output finish();

  std::optional<detector::BaselineProfile> baseline(const DeviceId& device) const;

 private:
  struct Interval {
    std::int64_t index = 0;
    std::vector<double> values;
  };
  struct DeviceState {
    std::optional<Interval> open;
    std::vector<std::pair<Timestamp, std::vector<double>>> baseline_pending;
    std::optional<detector::BaselineProfile> baseline;
  };

  void close(const DeviceId& device, DeviceState& st, Output& out);
  Timestamp interval_start(std::int64_t index) const;

  Timestamp origin_;
  std::chrono::milliseconds interval_;
  double fs_;
  std::size_t baseline_intervals_;
  detector::DetectorConfig config_;
  std::map<DeviceId, Placement> placements_;
  std::map<DeviceId, DeviceState> devices_;
};

/// Reference digest over samples that fall in [start, start + interval).
std::optional<Digest> brute_force_digest(const DeviceId& device, std::span<const AccelSample> samples,
                                         Timestamp start, std::chrono::milliseconds interval);

struct PacketAccounting {
  bool has_data = false;
  std::uint64_t expected = 0;
  std::uint64_t received = 0;
  double received_pct = 0.0;
  double lost_pct = 0.0;

  bool operator==(const PacketAccounting&) const = default;
};

/// Seq-gap accounting: expected = max - min + 1, received = distinct seqs.
PacketAccounting packet_accounting(std::span<const std::uint64_t> seqs);

/// Message volume for `devices` nodes each sending `messages_per_minute`.
std::uint64_t messages_per_day(std::uint64_t devices, double messages_per_minute);

/// Gateway->cloud and edge->cloud destination.
class CloudSink {
 public:
  virtual ~CloudSink() = default;
  virtual void ingest_batch(const std::string& gateway_id, std::span<const AccelSample> samples) = 0;
  virtual void post_digests(const std::string& gateway_id, std::span<const Digest> digests) = 0;
  virtual void post_assessments(const std::string& gateway_id,
                                std::span<const detector::HealthAssessment> assessments) = 0;
};

/// In-memory cloud stand-in that keeps each (device, seq) once.
class RecordingSink : public CloudSink {
 public:
  void ingest_batch(const std::string& gateway_id, std::span<const AccelSample> samples) override;
  void post_digests(const std::string& gateway_id, std::span<const Digest> digests) override;
  void post_assessments(const std::string& gateway_id,
                        std::span<const detector::HealthAssessment> assessments) override;

  std::map<DeviceId, std::vector<AccelSample>> samples;
  std::vector<Digest> digests;
  std::vector<detector::HealthAssessment> assessments;
  std::uint64_t duplicates = 0;

 private:
  std::map<DeviceId, std::set<std::uint64_t>> seen_;
};

struct DeviceCounters {
  std::uint64_t generated = 0;
  std::uint64_t dropped = 0;
  std::uint64_t delivered_edge = 0;
  std::uint64_t delivered_cloud = 0;

  bool operator==(const DeviceCounters&) const = default;
};

struct SimResult {
  std::map<DeviceId, DeviceCounters> counters;
  std::vector<Digest> digests;
  std::vector<detector::HealthAssessment> assessments;
  std::vector<AutoRegistration> registrations;
};

/// Runs the whole farm on a logical clock, single-threaded. Each batch step
/// generates every device's samples, forwards them through its gateway and
/// hands survivors to the edge and the sink in device order.
class Simulation {
 public:
  explicit Simulation(SimConfig config);

  /// `observer` sees every batch delivered to the cloud, after the sink.
  SimResult run(CloudSink& sink,
                const std::function<void(const std::string& gateway_id, std::span<const AccelSample>)>& observer = {});

  const SimConfig& config() const { return config_; }

 private:
  SimConfig config_;
};

/// Stable per-entity seed derived from the run seed and a name.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

void to_json(nlohmann::json& j, const SignalModel& m);
void to_json(nlohmann::json& j, const PacketAccounting& p);
void to_json(nlohmann::json& j, const DeviceCounters& c);
void to_json(nlohmann::json& j, const AutoRegistration& r);

}  // namespace palm::fieldsim
