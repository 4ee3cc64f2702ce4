#include "palm/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <iostream>
#include <thread>

#include "palm/detector.hpp"
#include "palm/errors.hpp"
#include "palm/fieldsim.hpp"
#include "palm/http.hpp"
#include "palm/service.hpp"
#include "palm/spectral.hpp"
#include "palm/stats.hpp"

namespace palm::cli {

namespace fs = std::filesystem;

namespace {

Timestamp wall_now() {
  return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
}

// One JSON object per line on the log stream.
void log_event(std::ostream& log, std::string_view level, std::string_view event, nlohmann::json fields = {}) {
  nlohmann::json line{{"ts", format_timestamp(wall_now())}, {"level", level}, {"event", event}};
  if (fields.is_object()) line.update(fields);
  log << line.dump() << '\n';
  log.flush();
}

void log_error(std::ostream& log, std::string_view event, const std::exception& e) {
  nlohmann::json f{{"message", e.what()}};
  if (const auto* pe = dynamic_cast<const Error*>(&e)) f["kind"] = to_string(pe->kind());
  log_event(log, "error", event, f);
}

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + p.string());
  return out;
}

template <typename Range>
void write_jsonl(const fs::path& p, const Range& rows) {
  auto out = open_out(p);
  for (const auto& r : rows) out << nlohmann::json(r).dump() << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed for " + p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  auto out = open_out(p);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed for " + p.string());
}

void put(std::ostream& out, double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  out.write(buf, r.ptr - buf);
}

// Writes to both a local recording and a remote service.
class TeeSink : public fieldsim::CloudSink {
 public:
  TeeSink(fieldsim::CloudSink& a, fieldsim::CloudSink& b) : a_(a), b_(b) {}
  void ingest_batch(const std::string& g, std::span<const AccelSample> s) override {
    a_.ingest_batch(g, s);
    b_.ingest_batch(g, s);
  }
  void post_digests(const std::string& g, std::span<const Digest> d) override {
    a_.post_digests(g, d);
    b_.post_digests(g, d);
  }
  void post_assessments(const std::string& g, std::span<const detector::HealthAssessment> x) override {
    a_.post_assessments(g, x);
    b_.post_assessments(g, x);
  }

 private:
  fieldsim::CloudSink& a_;
  fieldsim::CloudSink& b_;
};

}  // namespace

// ---------------------------------------------------------------- simulate

int simulate(const SimulateOptions& o, std::ostream& log) {
  fieldsim::SimConfig config;
  try {
    config = fieldsim::load_sim_config(o.config);
    if (o.duration_seconds) config.duration_seconds = *o.duration_seconds;
    if (o.seed) config.seed = *o.seed;
    fieldsim::validate(config);
  } catch (const Error& e) {
    log_error(log, "simulate.config", e);
    return kBadConfig;
  }

  try {
    fieldsim::RecordingSink recording;
    std::unique_ptr<service::HttpCloudSink> remote;
    std::unique_ptr<TeeSink> tee;
    fieldsim::CloudSink* sink = &recording;
    if (o.cloud_url) {
      remote = std::make_unique<service::HttpCloudSink>(*o.cloud_url, o.gateway_tokens);
      tee = std::make_unique<TeeSink>(recording, *remote);
      sink = tee.get();
    }
    log_event(log, "info", "simulate.start",
              {{"config", o.config.string()}, {"seed", config.seed}, {"duration_seconds", config.duration_seconds}});
    const auto result = fieldsim::Simulation(config).run(*sink);

    nlohmann::json devices = nlohmann::json::object();
    std::uint64_t generated = 0, dropped = 0, delivered = 0;
    for (const auto& farm : config.farms) {
      for (const auto& cluster : farm.clusters) {
        for (const auto& d : cluster.devices) {
          auto stream = recording.samples[d.device_id];
          std::sort(stream.begin(), stream.end(), [](const auto& a, const auto& b) { return a.seq < b.seq; });
          write_jsonl(o.out / "streams" / (d.device_id + ".jsonl"), stream);

          std::vector<std::uint64_t> seqs;
          for (const auto& s : stream) seqs.push_back(s.seq);
          std::map<std::string, std::size_t> levels{{"low", 0}, {"medium", 0}, {"high", 0}};
          for (const auto& a : result.assessments) {
            if (a.device_id == d.device_id) ++levels[std::string(to_string(a.likelihood))];
          }
          const auto& c = result.counters.at(d.device_id);
          generated += c.generated;
          dropped += c.dropped;
          delivered += c.delivered_cloud;
          devices[d.device_id] = {{"farm_id", farm.farm_id},
                                  {"cluster_id", cluster.cluster_id},
                                  {"gateway_id", cluster.gateway_id},
                                  {"placement", to_string(d.placement)},
                                  {"infested", d.infested},
                                  {"registered", d.registered},
                                  {"counters", c},
                                  {"packets", fieldsim::packet_accounting(seqs)},
                                  {"assessments", levels}};
        }
      }
    }
    write_jsonl(o.out / "digests.jsonl", result.digests);
    write_jsonl(o.out / "assessments.jsonl", result.assessments);
    write_jsonl(o.out / "registrations.jsonl", result.registrations);
    write_json(o.out / "summary.json",
               {{"seed", config.seed},
                {"start_time", format_timestamp(config.start_time)},
                {"duration_seconds", config.duration_seconds},
                {"sample_rate_hz", config.sample_rate_hz},
                {"digest_interval_seconds", config.digest_interval_seconds},
                {"baseline_intervals", config.baseline_intervals},
                {"detector", config.detector},
                {"devices", devices},
                {"totals", {{"generated", generated}, {"dropped", dropped}, {"delivered_cloud", delivered}}},
                {"digest_count", result.digests.size()},
                {"assessment_count", result.assessments.size()},
                {"registration_count", result.registrations.size()}});
    log_event(log, "info", "simulate.done",
              {{"out", o.out.string()}, {"generated", generated}, {"dropped", dropped}, {"digests", result.digests.size()}});
    return kOk;
  } catch (const Error& e) {
    log_error(log, "simulate.failed", e);
    return e.kind() == ErrorKind::Configuration ? kBadConfig : kFailure;
  } catch (const std::exception& e) {
    log_error(log, "simulate.failed", e);
    return kFailure;
  }
}

// ---------------------------------------------------------------- analyze

namespace {

struct WindowReport {
  std::string dir;
  Timestamp start{};
  std::size_t samples = 0;
  bool psd_evaluable = false;
  std::optional<double> pad;
  stats::StatSummary stat;
  detector::HealthAssessment assessment;
};

std::string dir_name(Timestamp t) {
  auto s = format_timestamp(t);
  std::replace(s.begin(), s.end(), ':', '-');
  return s;
}

double minutes_of(std::size_t n, double fs) { return static_cast<double>(n) / fs / 60.0; }

void write_timeseries(const fs::path& p, const SampleWindow& w) {
  auto out = open_out(p);
  out << "t_offset_s,min,mean,max,count\n";
  std::int64_t bucket = -1;
  double lo = 0, hi = 0, sum = 0;
  std::size_t count = 0;
  auto flush = [&] {
    if (count == 0) return;
    out << bucket << ',';
    put(out, lo);
    out << ',';
    put(out, sum / static_cast<double>(count));
    out << ',';
    put(out, hi);
    out << ',' << count << '\n';
  };
  for (const auto& s : w.samples) {
    const auto b = std::chrono::floor<std::chrono::seconds>(s.timestamp - w.window_start).count();
    if (b != bucket) {
      flush();
      bucket = b;
      lo = hi = s.magnitude;
      sum = 0;
      count = 0;
    }
    lo = std::min(lo, s.magnitude);
    hi = std::max(hi, s.magnitude);
    sum += s.magnitude;
    ++count;
  }
  flush();
}

WindowReport analyze_window(const SampleWindow& w, const detector::BaselineProfile& baseline,
                            const detector::DetectorConfig& cfg, Placement placement, const fs::path& dir) {
  WindowReport r;
  r.start = w.window_start;
  r.samples = w.samples.size();
  const auto values = w.magnitudes();
  const double fs_hz = w.sample_rate_hz;

  write_timeseries(dir / "timeseries.csv", w);

  {
    const auto spec = spectral::band_slice(spectral::fft_spectrum(values, fs_hz, true), cfg.band_lo_hz, cfg.band_hi_hz);
    auto out = open_out(dir / "fft.csv");
    spectral::write_csv(out, spec.freqs, spec.amplitudes);
  }
  {
    auto out = open_out(dir / "psd.csv");
    if (values.size() >= cfg.psd_segment_length) {
      const auto psd = spectral::band_slice(
          spectral::welch_psd(values, fs_hz, cfg.psd_segment_length, cfg.psd_overlap, true), cfg.band_lo_hz,
          cfg.band_hi_hz);
      spectral::write_csv(out, psd.freqs, psd.power_density);
    } else {
      spectral::write_csv(out, {}, {});
    }
  }

  r.stat = stats::summarize(values, minutes_of(values.size(), fs_hz));
  write_json(dir / "stats.json", r.stat);
  {
    auto out = open_out(dir / "histogram.csv");
    stats::write_csv(out, stats::histogram(values));
  }
  {
    auto out = open_out(dir / "ecdf.csv");
    stats::write_csv(out, stats::ecdf(values));
  }

  r.assessment = detector::assess_values(w.device_id, w.window_start, values, fs_hz, minutes_of(values.size(), fs_hz),
                                         placement, baseline, cfg);
  const auto& pad = r.assessment.indicators.at(detector::Indicator::PsdPad);
  r.psd_evaluable = pad.evaluable;
  if (pad.evaluable) r.pad = pad.value;
  write_json(dir / "assessment.json", r.assessment);
  return r;
}

// Runs f(i) for i in [0, n) on a small worker pool; the first exception wins.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f) {
  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

int analyze(const AnalyzeOptions& o, std::ostream& log) {
  detector::DetectorConfig cfg;
  if (o.detector_config) {
    try {
      cfg = fieldsim::load_detector_config(*o.detector_config);
    } catch (const Error& e) {
      log_error(log, "analyze.config", e);
      return kBadConfig;
    }
  }
  if (o.window.count() <= 0 || !(o.sample_rate_hz > 0)) {
    log_event(log, "error", "analyze.config", {{"message", "window and sample rate must be positive"}});
    return kBadConfig;
  }

  try {
    const auto input = ingest::parse_log_file(o.input.string());
    const auto base = ingest::parse_log_file(o.baseline.string());
    auto input_clean = ingest::clean_outliers(input.samples);
    auto base_clean = ingest::clean_outliers(base.samples);
    input_clean.report += input.report;
    base_clean.report += base.report;

    ingest::WindowOptions wo{o.window, o.alignment, o.sample_rate_hz};
    const auto windows = ingest::windowize(input_clean.samples, wo);
    std::map<DeviceId, std::vector<SampleWindow>> base_windows;
    for (auto& w : ingest::windowize(base_clean.samples, wo)) base_windows[w.device_id].push_back(std::move(w));

    std::map<DeviceId, std::vector<const SampleWindow*>> by_device;
    for (const auto& w : windows) by_device[w.device_id].push_back(&w);
    if (by_device.empty()) {
      log_event(log, "error", "analyze.input", {{"message", "input log has no usable samples"}});
      return kFailure;
    }

    // Per device baseline: same id, or the only device in the baseline log.
    std::map<DeviceId, detector::BaselineProfile> baselines;
    std::map<DeviceId, std::pair<std::size_t, std::size_t>> baseline_sizes;
    for (const auto& [dev, _] : by_device) {
      const std::vector<SampleWindow>* source = nullptr;
      if (auto it = base_windows.find(dev); it != base_windows.end()) source = &it->second;
      else if (base_windows.size() == 1) source = &base_windows.begin()->second;
      std::vector<double> values;
      if (source) {
        for (const auto& w : *source) {
          for (const auto& s : w.samples) values.push_back(s.magnitude);
        }
      }
      if (values.size() < 2) {
        log_event(log, "error", "analyze.baseline",
                  {{"device_id", dev}, {"message", "baseline has fewer than 2 usable samples for this device"}});
        return kInsufficientBaseline;
      }
      baselines.emplace(dev, detector::build_baseline(dev, o.placement, values, o.sample_rate_hz,
                                                      minutes_of(values.size(), o.sample_rate_hz), source->size(),
                                                      source->back().window_end(), cfg));
      baseline_sizes[dev] = {source->size(), values.size()};
    }

    std::vector<const SampleWindow*> todo;
    std::vector<WindowReport> reports;
    for (const auto& [dev, ws] : by_device) {
      for (const auto* w : ws) {
        if (w->samples.size() >= 2) todo.push_back(w);
      }
    }
    reports.resize(todo.size());
    parallel_for(todo.size(), [&](std::size_t i) {
      const auto& w = *todo[i];
      const auto dir = fs::path(w.device_id) / dir_name(w.window_start);
      reports[i] = analyze_window(w, baselines.at(w.device_id), cfg, o.placement, o.out / dir);
      reports[i].dir = dir.generic_string();
    });

    nlohmann::json baseline_doc = nlohmann::json::object();
    for (const auto& [dev, b] : baselines) baseline_doc[dev] = b;
    write_json(o.out / "baseline.json", baseline_doc);

    {
      auto pad = open_out(o.out / "pad.csv");
      pad << "device_id,window_start,pad,psd_evaluable,fired_count,likelihood\n";
      for (const auto& r : reports) {
        pad << r.assessment.device_id << ',' << format_timestamp(r.start) << ',';
        if (r.pad) put(pad, *r.pad);
        pad << ',' << (r.psd_evaluable ? "true" : "false") << ',' << r.assessment.fired_count << ','
            << to_string(r.assessment.likelihood) << '\n';
      }
    }
    {
      auto summary = open_out(o.out / "summary.csv");
      stats::write_summary_csv_header(summary);
      for (const auto& [dev, b] : baselines) stats::write_summary_csv_row(summary, "baseline:" + dev, b.stat);
      for (const auto& r : reports) {
        stats::write_summary_csv_row(summary, r.assessment.device_id + "@" + format_timestamp(r.start), r.stat);
      }
    }

    nlohmann::json devices = nlohmann::json::array();
    std::map<std::string, std::size_t> levels{{"low", 0}, {"medium", 0}, {"high", 0}};
    for (const auto& [dev, ws] : by_device) {
      nlohmann::json rows = nlohmann::json::array();
      std::size_t skipped = 0;
      for (const auto* w : ws) skipped += w->samples.size() < 2 ? 1 : 0;
      for (const auto& r : reports) {
        if (r.assessment.device_id != dev) continue;
        ++levels[std::string(to_string(r.assessment.likelihood))];
        rows.push_back({{"window_start", format_timestamp(r.start)},
                        {"dir", r.dir},
                        {"samples", r.samples},
                        {"psd_evaluable", r.psd_evaluable},
                        {"pad", r.pad ? nlohmann::json(*r.pad) : nlohmann::json(nullptr)},
                        {"fired_count", r.assessment.fired_count},
                        {"likelihood", to_string(r.assessment.likelihood)}});
      }
      devices.push_back({{"device_id", dev},
                         {"baseline_windows", baseline_sizes[dev].first},
                         {"baseline_samples", baseline_sizes[dev].second},
                         {"baseline_psd_evaluable", baselines.at(dev).psd_evaluable},
                         {"skipped_windows", skipped},
                         {"windows", rows}});
    }
    write_json(o.out / "report.json",
               {{"input", o.input.generic_string()},
                {"baseline", o.baseline.generic_string()},
                {"placement", to_string(o.placement)},
                {"alignment", o.alignment == ingest::WindowAlignment::Epoch ? "epoch" : "first-sample"},
                {"window_seconds", o.window.count()},
                {"sample_rate_hz", o.sample_rate_hz},
                {"detector", cfg},
                {"cleaning", {{"input", input_clean.report}, {"baseline", base_clean.report}}},
                {"likelihoods", levels},
                {"devices", devices}});
    log_event(log, "info", "analyze.done",
              {{"out", o.out.string()}, {"windows", reports.size()}, {"likelihoods", levels}});
    return kOk;
  } catch (const std::exception& e) {
    log_error(log, "analyze.failed", e);
    return kFailure;
  }
}

// ---------------------------------------------------------------- serve

int serve(const ServeOptions& o, std::ostream& log, const std::atomic<bool>& stop,
          const std::function<void(int)>& on_ready) {
  service::ServiceConfig cfg;
  try {
    cfg = service::load_service_config(o.config);
  } catch (const Error& e) {
    log_error(log, "serve.config", e);
    return kBadConfig;
  }
  if (o.bind) cfg.bind_host = *o.bind;
  if (o.port) cfg.port = *o.port;

  try {
    service::Service svc(cfg);
    service::HttpServer server(svc);
    try {
      server.bind(cfg.bind_host, cfg.port);
    } catch (const Error& e) {
      log_error(log, "serve.bind", e);
      return kPortBusy;
    }
    server.start();
    log_event(log, "info", "serve.listening",
              {{"bind", cfg.bind_host},
               {"port", server.port()},
               {"storage_dir", cfg.storage_dir ? nlohmann::json(cfg.storage_dir->string()) : nlohmann::json(nullptr)}});
    if (on_ready) on_ready(server.port());
    while (!stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
    svc.flush();
    log_event(log, "info", "serve.stopped", {{"audit_entries", svc.audit_size()}});
    return kOk;
  } catch (const std::exception& e) {
    log_error(log, "serve.failed", e);
    return kFailure;
  }
}

// ---------------------------------------------------------------- front end

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const std::atomic<bool>& stop) {
  CLI::App app{"Red palm weevil monitoring: simulate, analyze, serve"};
  app.name("palmctl");
  app.require_subcommand(1);

  SimulateOptions sim;
  std::vector<std::string> gateway_tokens;
  auto* simulate_cmd = app.add_subcommand("simulate", "Run a farm simulation and write its outputs");
  simulate_cmd->add_option("config", sim.config, "Simulation config (YAML)")->required();
  simulate_cmd->add_option("--out", sim.out, "Output directory");
  simulate_cmd->add_option("--duration", sim.duration_seconds, "Override duration in seconds");
  simulate_cmd->add_option("--seed", sim.seed, "Override the run seed");
  simulate_cmd->add_option("--cloud-url", sim.cloud_url, "Also deliver to a running service");
  simulate_cmd->add_option("--gateway-token", gateway_tokens, "gateway_id=token for --cloud-url (repeatable)");

  AnalyzeOptions an;
  std::string placement = "inside", align = "epoch";
  long long window_seconds = 3600;
  auto* analyze_cmd = app.add_subcommand("analyze", "Analyze a log against a healthy baseline log");
  analyze_cmd->add_option("input", an.input, "Input log (.csv or .jsonl)")->required();
  analyze_cmd->add_option("baseline", an.baseline, "Healthy baseline log")->required();
  analyze_cmd->add_option("--out", an.out, "Output directory");
  analyze_cmd->add_option("--placement", placement, "Sensor placement")->check(CLI::IsMember({"inside", "outside"}));
  analyze_cmd->add_option("--align", align, "Window alignment")->check(CLI::IsMember({"epoch", "first-sample"}));
  analyze_cmd->add_option("--window-seconds", window_seconds, "Window length");
  analyze_cmd->add_option("--sample-rate", an.sample_rate_hz, "Sample rate in Hz");
  analyze_cmd->add_option("--detector-config", an.detector_config, "Detector thresholds (YAML or JSON)");

  ServeOptions sv;
  auto* serve_cmd = app.add_subcommand("serve", "Run the cloud service");
  serve_cmd->add_option("config", sv.config, "Service config (YAML)")->required();
  serve_cmd->add_option("--bind", sv.bind, "Override bind address");
  serve_cmd->add_option("--port", sv.port, "Override port");

  std::optional<std::string> password;
  auto* hash_cmd = app.add_subcommand("hash-password", "Print an argon2id hash for a service config");
  hash_cmd->add_option("--password", password, "Password (read from stdin when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kFailure;
  }

  if (*simulate_cmd) {
    for (const auto& kv : gateway_tokens) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == kv.size()) {
        log_event(err, "error", "simulate.args", {{"message", "--gateway-token expects gateway_id=token"}});
        return kFailure;
      }
      sim.gateway_tokens[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    return simulate(sim, err);
  }
  if (*analyze_cmd) {
    an.placement = placement_from_string(placement);
    an.alignment = align == "epoch" ? ingest::WindowAlignment::Epoch : ingest::WindowAlignment::FirstSample;
    an.window = std::chrono::seconds(window_seconds);
    return analyze(an, err);
  }
  if (*serve_cmd) return serve(sv, err, stop);
  if (*hash_cmd) {
    std::string pw;
    if (password) {
      pw = *password;
    } else if (!std::getline(std::cin, pw)) {
      log_event(err, "error", "hash-password", {{"message", "no password on stdin"}});
      return kFailure;
    }
    if (pw.empty()) {
      log_event(err, "error", "hash-password", {{"message", "password must not be empty"}});
      return kFailure;
    }
    out << service::hash_password(pw) << '\n';
    return kOk;
  }
  return kFailure;
}

}  // namespace palm::cli
