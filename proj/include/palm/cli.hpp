#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>

#include "palm/ingest.hpp"
#include "palm/telemetry.hpp"

namespace palm::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kBadConfig = 2,
  kInsufficientBaseline = 3,
  kPortBusy = 4,
};

struct SimulateOptions {
  std::filesystem::path config;
  std::filesystem::path out = "sim-out";
  std::optional<double> duration_seconds;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> cloud_url;
  std::map<std::string, std::string> gateway_tokens;  // gateway_id -> token
};

/// Writes streams/<device>.jsonl, digests.jsonl, assessments.jsonl,
/// registrations.jsonl and summary.json under `out`.
int simulate(const SimulateOptions& options, std::ostream& log);

struct AnalyzeOptions {
  std::filesystem::path input;
  std::filesystem::path baseline;
  std::filesystem::path out = "analysis";
  Placement placement = Placement::Inside;
  ingest::WindowAlignment alignment = ingest::WindowAlignment::Epoch;
  std::chrono::seconds window{3600};
  double sample_rate_hz = 100.0;
  std::optional<std::filesystem::path> detector_config;
};

/// Per device and window: timeseries, fft, psd, stats, histogram, ecdf and
/// assessment files; plus baseline.json, pad.csv, summary.csv, report.json.
int analyze(const AnalyzeOptions& options, std::ostream& log);

struct ServeOptions {
  std::filesystem::path config;
  std::optional<std::string> bind;
  std::optional<int> port;
};

/// Runs until `stop` becomes true, then closes streams and flushes storage.
/// `on_ready` receives the bound port.
int serve(const ServeOptions& options, std::ostream& log, const std::atomic<bool>& stop,
          const std::function<void(int)>& on_ready = {});

/// Full command line front end; argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const std::atomic<bool>& stop);

}  // namespace palm::cli
