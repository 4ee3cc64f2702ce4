#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "palm/errors.hpp"
#include "palm/fieldsim.hpp"
#include "yaml_reader.hpp"

namespace palm::fieldsim {

namespace {

using detail::kInf;
using detail::Reader;

SignalModel read_signal(const Reader& r, const YAML::Node& node, SignalModel m) {
  r.expect_map(node, "signal");
  r.only_keys(node, {"baseline_mean", "baseline_std", "burst_rate_per_min", "burst_freq_lo_hz", "burst_freq_hi_hz",
                     "burst_amplitude", "burst_duration_s", "activity_offset", "activity_std", "activity_cutoff_hz",
                     "cross_axis_std"});
  m.baseline_mean = r.number(node, "baseline_mean", m.baseline_mean, -kInf, kInf);
  m.baseline_std = r.number(node, "baseline_std", m.baseline_std, 0.0, kInf);
  m.burst_rate_per_min = r.number(node, "burst_rate_per_min", m.burst_rate_per_min, 0.0, kInf);
  m.burst_freq_lo_hz = r.number(node, "burst_freq_lo_hz", m.burst_freq_lo_hz, 0.0, kInf);
  m.burst_freq_hi_hz = r.number(node, "burst_freq_hi_hz", m.burst_freq_hi_hz, m.burst_freq_lo_hz, kInf);
  m.burst_amplitude = r.number(node, "burst_amplitude", m.burst_amplitude, 0.0, kInf);
  m.burst_duration_s = r.number(node, "burst_duration_s", m.burst_duration_s, 0.0, kInf, true);
  m.activity_offset = r.number(node, "activity_offset", m.activity_offset, -kInf, kInf);
  m.activity_std = r.number(node, "activity_std", m.activity_std, 0.0, kInf);
  m.activity_cutoff_hz = r.number(node, "activity_cutoff_hz", m.activity_cutoff_hz, 0.0, kInf, true);
  m.cross_axis_std = r.number(node, "cross_axis_std", m.cross_axis_std, 0.0, kInf);
  return m;
}

}  // namespace

SimConfig parse_sim_config(const std::string& text, const std::string& source_name) {
  Reader r(source_name);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::Configuration,
                source_name + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  r.expect_map(root, "config");
  r.only_keys(root, {"seed", "start_time", "duration_seconds", "sample_rate_hz", "digest_interval_seconds",
                     "baseline_intervals", "time_compression", "batch_seconds", "detector", "farms"});

  SimConfig c;
  r.optional(root, "seed", c.seed);
  if (auto n = root["start_time"]) {
    auto t = try_parse_timestamp(r.scalar<std::string>(n, "start_time"));
    if (!t) r.fail(n, "'start_time' must be an ISO-8601 UTC timestamp");
    c.start_time = *t;
  }
  c.duration_seconds = r.number(root, "duration_seconds", c.duration_seconds, 0.0, kInf, true);
  c.sample_rate_hz = r.number(root, "sample_rate_hz", c.sample_rate_hz, 0.0, kInf, true);
  c.digest_interval_seconds = r.number(root, "digest_interval_seconds", c.digest_interval_seconds, 0.0, kInf, true);
  if (auto n = root["baseline_intervals"]) {
    const auto v = r.scalar<long long>(n, "baseline_intervals");
    if (v < 1) r.fail(n, "'baseline_intervals' must be at least 1");
    c.baseline_intervals = static_cast<std::size_t>(v);
  }
  c.time_compression = r.number(root, "time_compression", c.time_compression, 0.0, kInf);
  c.batch_seconds = r.number(root, "batch_seconds", c.batch_seconds, 0.0, kInf, true);
  if (auto n = root["detector"]) {
    try {
      c.detector = detector::detector_config_from_json(detail::yaml_to_json(r, n, "detector"));
    } catch (const Error& e) {
      if (std::string_view(e.what()).starts_with(source_name + ":")) throw;
      r.fail(n, e.what());
    }
  }

  const auto farms = root["farms"];
  if (!farms || !farms.IsSequence() || farms.size() == 0) r.fail(farms ? farms : root, "'farms' must be a non-empty list");

  std::set<std::string> farm_ids, gateway_ids, cluster_ids, device_ids;
  for (const auto& fn : farms) {
    r.expect_map(fn, "farm");
    r.only_keys(fn, {"farm_id", "name", "clusters"});
    FarmSpec farm;
    farm.farm_id = r.required_id(fn, "farm_id");
    if (!farm_ids.insert(farm.farm_id).second) r.fail(fn["farm_id"], "duplicate farm_id '" + farm.farm_id + "'");
    farm.name = farm.farm_id;
    r.optional(fn, "name", farm.name);
    const auto clusters = fn["clusters"];
    if (!clusters || !clusters.IsSequence()) r.fail(clusters ? clusters : fn, "'clusters' must be a list");
    for (const auto& cn : clusters) {
      r.expect_map(cn, "cluster");
      r.only_keys(cn, {"cluster_id", "gateway_id", "loss_probability", "devices"});
      ClusterSpec cl;
      cl.cluster_id = r.required_id(cn, "cluster_id");
      if (!cluster_ids.insert(cl.cluster_id).second) r.fail(cn["cluster_id"], "duplicate cluster_id '" + cl.cluster_id + "'");
      cl.gateway_id = r.required_id(cn, "gateway_id");
      if (!gateway_ids.insert(cl.gateway_id).second) r.fail(cn["gateway_id"], "duplicate gateway_id '" + cl.gateway_id + "'");
      cl.loss_probability = r.number(cn, "loss_probability", 0.0, 0.0, 1.0, false, true);
      const auto devices = cn["devices"];
      if (!devices || !devices.IsSequence()) r.fail(devices ? devices : cn, "'devices' must be a list");
      for (const auto& dn : devices) {
        r.expect_map(dn, "device");
        r.only_keys(dn, {"device_id", "placement", "infested", "onset_seconds", "latitude", "longitude", "registered",
                         "signal"});
        DeviceSpec d;
        d.device_id = r.required_id(dn, "device_id");
        if (!device_ids.insert(d.device_id).second) r.fail(dn["device_id"], "duplicate device_id '" + d.device_id + "'");
        if (auto n = dn["placement"]) {
          try {
            d.placement = placement_from_string(r.scalar<std::string>(n, "placement"));
          } catch (const Error&) {
            r.fail(n, "'placement' must be inside or outside");
          }
        }
        r.optional(dn, "infested", d.infested);
        r.optional(dn, "registered", d.registered);
        d.onset_seconds = r.number(dn, "onset_seconds", 0.0, 0.0, kInf);
        d.latitude = r.number(dn, "latitude", 0.0, -90.0, 90.0);
        d.longitude = r.number(dn, "longitude", 0.0, -180.0, 180.0);
        d.signal = SignalModel::defaults_for(d.placement);
        if (auto n = dn["signal"]) d.signal = read_signal(r, n, d.signal);
        cl.devices.push_back(std::move(d));
      }
      farm.clusters.push_back(std::move(cl));
    }
    c.farms.push_back(std::move(farm));
  }

  try {
    validate(c);
  } catch (const Error& e) {
    throw Error(ErrorKind::Configuration, source_name + ":1: " + e.what());
  }
  return c;
}

SimConfig load_sim_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_sim_config(text.str(), path.string());
}

detector::DetectorConfig load_detector_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read detector config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  detail::Reader r(path.string());
  YAML::Node root;
  try {
    root = YAML::Load(text.str());
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::Configuration, path.string() + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (!root || root.IsNull()) return {};
  try {
    return detector::detector_config_from_json(detail::yaml_to_json(r, root, "detector"));
  } catch (const Error& e) {
    if (std::string_view(e.what()).starts_with(path.string() + ":")) throw;
    r.fail(root, e.what());
  }
}

void validate(const SimConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Configuration, m); };
  if (!(c.duration_seconds > 0.0)) fail("duration_seconds must be positive");
  if (!(c.sample_rate_hz > 0.0)) fail("sample_rate_hz must be positive");
  if (!(c.digest_interval_seconds > 0.0)) fail("digest_interval_seconds must be positive");
  if (c.baseline_intervals < 1) fail("baseline_intervals must be at least 1");
  if (!(c.time_compression >= 0.0)) fail("time_compression must be non-negative");
  if (!(c.batch_seconds > 0.0)) fail("batch_seconds must be positive");
  std::set<std::string> devices, gateways;
  std::size_t count = 0;
  for (const auto& f : c.farms) {
    if (f.farm_id.empty()) fail("farm_id must not be empty");
    for (const auto& cl : f.clusters) {
      if (!(cl.loss_probability >= 0.0 && cl.loss_probability < 1.0)) fail("loss_probability must be in [0, 1)");
      if (!gateways.insert(cl.gateway_id).second) fail("duplicate gateway_id '" + cl.gateway_id + "'");
      for (const auto& d : cl.devices) {
        ++count;
        if (!devices.insert(d.device_id).second) fail("duplicate device_id '" + d.device_id + "'");
        DeviceRecord rec;
        rec.device_id = d.device_id;
        rec.farm_id = f.farm_id;
        rec.cluster_id = cl.cluster_id;
        rec.latitude = d.latitude;
        rec.longitude = d.longitude;
        try {
          palm::validate(rec);
        } catch (const Error& e) {
          fail(e.what());
        }
        const auto& s = d.signal;
        if (s.baseline_std < 0 || s.activity_std < 0 || s.burst_rate_per_min < 0 || s.burst_amplitude < 0 ||
            s.cross_axis_std < 0 || !(s.burst_duration_s > 0) || !(s.activity_cutoff_hz > 0) ||
            s.burst_freq_lo_hz < 0 || s.burst_freq_hi_hz < s.burst_freq_lo_hz) {
          fail("signal model for '" + d.device_id + "' out of range");
        }
      }
    }
  }
  if (count == 0) fail("config defines no devices");
}

}  // namespace palm::fieldsim
