#include "palm/fieldsim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <thread>

#include "palm/errors.hpp"

namespace palm::fieldsim {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

Timestamp offset(Timestamp start, double seconds) {
  return start + std::chrono::milliseconds(std::llround(seconds * 1000.0));
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

SignalModel SignalModel::defaults_for(Placement placement) {
  SignalModel m;
  if (placement == Placement::Outside) {
    m.baseline_mean = 10.04;
    m.baseline_std = 0.06;
    m.burst_amplitude = 0.08;
    m.activity_offset = 0.04;
    m.activity_std = 0.0;
  }
  return m;
}

SensorGenerator::SensorGenerator(DeviceId device, SignalModel model, double sample_rate_hz, Timestamp start,
                                 std::uint64_t seed, std::optional<double> infested_from_seconds)
    : device_(std::move(device)),
      model_(model),
      fs_(sample_rate_hz),
      start_(start),
      onset_s_(infested_from_seconds),
      rng_(seed) {
  ar_coeff_ = std::exp(-kTwoPi * model_.activity_cutoff_hz / fs_);
}

AccelSample SensorGenerator::next() {
  const double t = static_cast<double>(seq_) / fs_;
  double z = model_.baseline_mean + model_.baseline_std * unit_(rng_);

  if (onset_s_ && t >= *onset_s_) {
    z += model_.activity_offset;
    if (model_.activity_std > 0.0) {
      ar_state_ = ar_coeff_ * ar_state_ +
                  std::sqrt(1.0 - ar_coeff_ * ar_coeff_) * model_.activity_std * unit_(rng_);
      z += ar_state_;
    }
    if (model_.burst_rate_per_min > 0.0) {
      std::exponential_distribution<double> gap(model_.burst_rate_per_min / 60.0);
      if (next_burst_s_ < 0.0) next_burst_s_ = *onset_s_ + gap(rng_);
      while (t >= next_burst_s_) {
        std::uniform_real_distribution<double> freq(model_.burst_freq_lo_hz, model_.burst_freq_hi_hz);
        std::uniform_real_distribution<double> phase(0.0, kTwoPi);
        const double f = freq(rng_);
        bursts_.push_back({next_burst_s_, f, phase(rng_)});
        next_burst_s_ += gap(rng_);
      }
      while (!bursts_.empty() && t - bursts_.front().start_s >= model_.burst_duration_s) bursts_.pop_front();
      for (const auto& b : bursts_) {
        const double dt = t - b.start_s;
        z += model_.burst_amplitude * std::exp(-3.0 * dt / model_.burst_duration_s) *
             std::sin(kTwoPi * b.freq_hz * dt + b.phase);
      }
    }
  }

  const double x = model_.cross_axis_std * unit_(rng_);
  const double y = model_.cross_axis_std * unit_(rng_);
  return AccelSample::make(device_, seq_++, offset(start_, t), x, y, z);
}

std::vector<AccelSample> SensorGenerator::next_batch(std::size_t count) {
  std::vector<AccelSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(next());
  return out;
}

std::vector<AccelSample> generate_stream(const DeviceId& device, const SignalModel& model, double duration_seconds,
                                         std::uint64_t seed, double sample_rate_hz, Timestamp start,
                                         std::optional<double> infested_from_seconds) {
  if (!(duration_seconds > 0.0)) throw Error(ErrorKind::Configuration, "duration must be positive");
  SensorGenerator gen(device, model, sample_rate_hz, start, seed, infested_from_seconds);
  return gen.next_batch(static_cast<std::size_t>(std::llround(duration_seconds * sample_rate_hz)));
}

Gateway::Gateway(std::string gateway_id, std::string farm_id, std::string cluster_id, double loss_probability,
                 std::uint64_t seed, std::set<DeviceId> known_devices)
    : id_(std::move(gateway_id)),
      farm_id_(std::move(farm_id)),
      cluster_id_(std::move(cluster_id)),
      loss_(loss_probability),
      rng_(seed),
      known_(std::move(known_devices)) {
  if (!(loss_ >= 0.0 && loss_ < 1.0)) throw Error(ErrorKind::Configuration, "loss_probability must be in [0, 1)");
  drop_ = std::bernoulli_distribution(loss_);
}

ForwardResult Gateway::forward(std::span<const AccelSample> batch) {
  ForwardResult r;
  r.to_edge.reserve(batch.size());
  r.to_cloud.reserve(batch.size());
  for (const auto& s : batch) {
    if (!known_.contains(s.device_id)) {
      known_.insert(s.device_id);
      DeviceRecord d;
      d.device_id = s.device_id;
      d.farm_id = farm_id_;
      d.cluster_id = cluster_id_;
      d.created_by = CreatedBy::GatewayAutoDetect;
      r.registrations.push_back({id_, std::move(d)});
    }
    if (drop_(rng_)) {
      ++r.dropped;
      ++r.dropped_by_device[s.device_id];
      continue;
    }
    r.to_edge.push_back(s);
    r.to_cloud.push_back(s);
  }
  return r;
}

Edge::Edge(Timestamp origin, double interval_seconds, double sample_rate_hz, std::size_t baseline_intervals,
           detector::DetectorConfig config, std::map<DeviceId, Placement> placements)
    : origin_(origin),
      interval_(std::llround(interval_seconds * 1000.0)),
      fs_(sample_rate_hz),
      baseline_intervals_(std::max<std::size_t>(1, baseline_intervals)),
      config_(config),
      placements_(std::move(placements)) {
  if (interval_.count() <= 0) throw Error(ErrorKind::Configuration, "digest interval must be positive");
}

Timestamp Edge::interval_start(std::int64_t index) const { return origin_ + interval_ * index; }

Edge::Output Edge::receive(std::span<const AccelSample> samples) {
  Output out;
  for (const auto& s : samples) {
    auto& st = devices_[s.device_id];
    const auto idx = floor_div((s.timestamp - origin_).count(), interval_.count());
    if (st.open && st.open->index != idx) close(s.device_id, st, out);
    if (!st.open) st.open = Interval{idx, {}};
    st.open->values.push_back(s.magnitude);
  }
  return out;
}

Edge::Output Edge::finish() {
  Output out;
  for (auto& [device, st] : devices_) {
    if (st.open) close(device, st, out);
  }
  return out;
}

std::optional<detector::BaselineProfile> Edge::baseline(const DeviceId& device) const {
  auto it = devices_.find(device);
  if (it == devices_.end()) return std::nullopt;
  return it->second.baseline;
}

void Edge::close(const DeviceId& device, DeviceState& st, Output& out) {
  Interval iv = std::move(*st.open);
  st.open.reset();
  const Timestamp start = interval_start(iv.index);
  if (iv.values.empty()) return;

  Digest d;
  d.device_id = device;
  d.window_start = start;
  d.count = iv.values.size();
  d.min = *std::min_element(iv.values.begin(), iv.values.end());
  d.max = *std::max_element(iv.values.begin(), iv.values.end());
  double sum = 0.0;
  for (double v : iv.values) sum += v;
  d.mean = std::clamp(sum / static_cast<double>(d.count), d.min, d.max);
  out.digests.push_back(d);

  const auto pit = placements_.find(device);
  const Placement placement = pit == placements_.end() ? Placement::Inside : pit->second;
  const double minutes = static_cast<double>(interval_.count()) / 60000.0;
  auto assess = [&](Timestamp at, const std::vector<double>& values) {
    if (values.size() < 2) return;
    out.assessments.push_back(
        detector::assess_values(device, at, values, fs_, minutes, placement, *st.baseline, config_));
  };

  if (st.baseline) {
    assess(start, iv.values);
    return;
  }
  st.baseline_pending.emplace_back(start, std::move(iv.values));
  if (st.baseline_pending.size() < baseline_intervals_) return;

  std::vector<double> all;
  for (const auto& [_, v] : st.baseline_pending) all.insert(all.end(), v.begin(), v.end());
  if (all.size() < 2) {
    st.baseline_pending.clear();
    return;
  }
  st.baseline = detector::build_baseline(device, placement, all, fs_, minutes * static_cast<double>(st.baseline_pending.size()),
                                         st.baseline_pending.size(), start + interval_, config_);
  // The baseline hours are assessed against the profile they produced.
  for (const auto& [at, v] : st.baseline_pending) assess(at, v);
  st.baseline_pending.clear();
}

std::optional<Digest> brute_force_digest(const DeviceId& device, std::span<const AccelSample> samples,
                                         Timestamp start, std::chrono::milliseconds interval) {
  std::vector<double> v;
  for (const auto& s : samples) {
    if (s.device_id == device && s.timestamp >= start && s.timestamp < start + interval) v.push_back(s.magnitude);
  }
  if (v.empty()) return std::nullopt;
  Digest d;
  d.device_id = device;
  d.window_start = start;
  d.count = v.size();
  d.min = v.front();
  d.max = v.front();
  long double sum = 0.0L;
  for (double x : v) {
    d.min = std::min(d.min, x);
    d.max = std::max(d.max, x);
    sum += x;
  }
  d.mean = static_cast<double>(sum / static_cast<long double>(v.size()));
  return d;
}

PacketAccounting packet_accounting(std::span<const std::uint64_t> seqs) {
  PacketAccounting p;
  if (seqs.empty()) return p;
  std::vector<std::uint64_t> sorted(seqs.begin(), seqs.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  p.has_data = true;
  p.expected = sorted.back() - sorted.front() + 1;
  p.received = sorted.size();
  p.received_pct = 100.0 * static_cast<double>(p.received) / static_cast<double>(p.expected);
  p.lost_pct = 100.0 - p.received_pct;
  return p;
}

std::uint64_t messages_per_day(std::uint64_t devices, double messages_per_minute) {
  return static_cast<std::uint64_t>(std::llround(static_cast<double>(devices) * messages_per_minute * 1440.0));
}

void RecordingSink::ingest_batch(const std::string&, std::span<const AccelSample> batch) {
  for (const auto& s : batch) {
    if (!seen_[s.device_id].insert(s.seq).second) {
      ++duplicates;
      continue;
    }
    samples[s.device_id].push_back(s);
  }
}

void RecordingSink::post_digests(const std::string&, std::span<const Digest> d) {
  digests.insert(digests.end(), d.begin(), d.end());
}

void RecordingSink::post_assessments(const std::string&, std::span<const detector::HealthAssessment> a) {
  assessments.insert(assessments.end(), a.begin(), a.end());
}

Simulation::Simulation(SimConfig config) : config_(std::move(config)) { validate(config_); }

SimResult Simulation::run(
    CloudSink& sink, const std::function<void(const std::string&, std::span<const AccelSample>)>& observer) {
  struct ClusterRun {
    const ClusterSpec* spec;
    Gateway gateway;
    Edge edge;
    std::vector<SensorGenerator> generators;
  };

  const auto& c = config_;
  std::vector<ClusterRun> clusters;
  SimResult result;
  for (const auto& farm : c.farms) {
    for (const auto& cl : farm.clusters) {
      std::set<DeviceId> known;
      std::map<DeviceId, Placement> placements;
      std::vector<SensorGenerator> gens;
      for (const auto& d : cl.devices) {
        if (d.registered) known.insert(d.device_id);
        placements[d.device_id] = d.placement;
        gens.emplace_back(d.device_id, d.signal, c.sample_rate_hz, c.start_time,
                          derive_seed(c.seed, "device:" + d.device_id),
                          d.infested ? std::optional<double>(d.onset_seconds) : std::nullopt);
        result.counters[d.device_id];
      }
      clusters.push_back(ClusterRun{
          &cl,
          Gateway(cl.gateway_id, farm.farm_id, cl.cluster_id, cl.loss_probability,
                  derive_seed(c.seed, "gateway:" + cl.gateway_id), std::move(known)),
          Edge(c.start_time, c.digest_interval_seconds, c.sample_rate_hz, c.baseline_intervals, c.detector,
               std::move(placements)),
          std::move(gens)});
    }
  }

  auto publish = [&](ClusterRun& run, Edge::Output out) {
    if (!out.digests.empty()) sink.post_digests(run.gateway.id(), out.digests);
    if (!out.assessments.empty()) sink.post_assessments(run.gateway.id(), out.assessments);
    result.digests.insert(result.digests.end(), out.digests.begin(), out.digests.end());
    result.assessments.insert(result.assessments.end(), out.assessments.begin(), out.assessments.end());
  };

  const auto total = static_cast<std::uint64_t>(std::llround(c.duration_seconds * c.sample_rate_hz));
  const auto batch = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(c.batch_seconds * c.sample_rate_hz)));
  const auto wall_start = std::chrono::steady_clock::now();

  for (std::uint64_t produced = 0; produced < total;) {
    const auto n = std::min(batch, total - produced);
    for (auto& run : clusters) {
      std::vector<AccelSample> samples;
      samples.reserve(n * run.generators.size());
      for (auto& g : run.generators) {
        auto part = g.next_batch(n);
        std::move(part.begin(), part.end(), std::back_inserter(samples));
      }
      for (const auto& d : run.spec->devices) result.counters[d.device_id].generated += n;

      auto fwd = run.gateway.forward(samples);
      for (const auto& [device, k] : fwd.dropped_by_device) result.counters[device].dropped += k;
      for (const auto& s : fwd.to_cloud) ++result.counters[s.device_id].delivered_cloud;
      for (const auto& s : fwd.to_edge) ++result.counters[s.device_id].delivered_edge;
      result.registrations.insert(result.registrations.end(), fwd.registrations.begin(), fwd.registrations.end());

      if (!fwd.to_cloud.empty()) {
        sink.ingest_batch(run.gateway.id(), fwd.to_cloud);
        if (observer) observer(run.gateway.id(), fwd.to_cloud);
      }
      publish(run, run.edge.receive(fwd.to_edge));
    }
    produced += n;

    if (c.time_compression > 0.0) {
      const double simulated = static_cast<double>(produced) / c.sample_rate_hz;
      const auto due = wall_start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                        std::chrono::duration<double>(simulated / c.time_compression));
      std::this_thread::sleep_until(due);
    }
  }
  for (auto& run : clusters) publish(run, run.edge.finish());
  return result;
}

void to_json(nlohmann::json& j, const SignalModel& m) {
  j = nlohmann::json{{"baseline_mean", m.baseline_mean},
                     {"baseline_std", m.baseline_std},
                     {"burst_rate_per_min", m.burst_rate_per_min},
                     {"burst_freq_lo_hz", m.burst_freq_lo_hz},
                     {"burst_freq_hi_hz", m.burst_freq_hi_hz},
                     {"burst_amplitude", m.burst_amplitude},
                     {"burst_duration_s", m.burst_duration_s},
                     {"activity_offset", m.activity_offset},
                     {"activity_std", m.activity_std},
                     {"activity_cutoff_hz", m.activity_cutoff_hz},
                     {"cross_axis_std", m.cross_axis_std}};
}

void to_json(nlohmann::json& j, const PacketAccounting& p) {
  if (!p.has_data) {
    j = nlohmann::json{{"has_data", false}, {"expected", 0}, {"received", 0},
                       {"received_pct", nullptr}, {"lost_pct", nullptr}};
    return;
  }
  j = nlohmann::json{{"has_data", true},
                     {"expected", p.expected},
                     {"received", p.received},
                     {"received_pct", p.received_pct},
                     {"lost_pct", p.lost_pct}};
}

void to_json(nlohmann::json& j, const DeviceCounters& c) {
  j = nlohmann::json{{"generated", c.generated},
                     {"dropped", c.dropped},
                     {"delivered_edge", c.delivered_edge},
                     {"delivered_cloud", c.delivered_cloud}};
}

void to_json(nlohmann::json& j, const AutoRegistration& r) {
  j = nlohmann::json{{"gateway_id", r.gateway_id}, {"device", r.device}};
}

}  // namespace palm::fieldsim
