#pragma once

#include <chrono>
#include <cstddef>
#include <istream>
#include <span>
#include <vector>

#include "palm/telemetry.hpp"

namespace palm::ingest {

enum class LogFormat { Csv, Jsonl };

// Picks a format from a file extension (.csv, .jsonl, .ndjson).
LogFormat format_for_path(std::string_view path);

struct CleaningReport {
  std::size_t total_in = 0;
  std::size_t kept = 0;
  std::size_t dropped_low = 0;
  std::size_t dropped_high = 0;
  std::size_t dropped_malformed = 0;

  bool balanced() const noexcept {
    return total_in == kept + dropped_low + dropped_high + dropped_malformed;
  }
  CleaningReport& operator+=(const CleaningReport& other);
};

struct ParseResult {
  std::vector<AccelSample> samples;
  CleaningReport report;  // only the malformed counts are populated
};

inline constexpr double kDefaultLowerBound = 6.0;
inline constexpr double kDefaultUpperBound = 17.0;
inline constexpr double kMagnitudeTolerance = 1e-6;

// CSV rows: device_id,seq,timestamp_iso8601,ax,ay,az[,magnitude]. A header row
// starting with "device_id" is skipped. Lines beginning with '#' are comments.
// Throws Io when the stream is unreadable and CorruptInput when more than half
// of the data rows are malformed.
ParseResult parse_log(std::istream& in, LogFormat format);
ParseResult parse_log_file(const std::string& path);
ParseResult parse_log_file(const std::string& path, LogFormat format);

struct CleanResult {
  std::vector<AccelSample> samples;
  CleaningReport report;
};

// Keeps samples whose magnitude lies in [lower, upper] (inclusive).
CleanResult clean_outliers(std::span<const AccelSample> samples,
                           double lower = kDefaultLowerBound,
                           double upper = kDefaultUpperBound);

enum class WindowAlignment {
  Epoch,        // window index = floor(timestamp / window_seconds)
  FirstSample,  // per device, anchored at that device's first timestamp
};

struct WindowOptions {
  std::chrono::seconds window{3600};
  WindowAlignment alignment = WindowAlignment::Epoch;
  double sample_rate_hz = 100.0;
};

// Groups samples per device and per window; empty windows are omitted. Output
// is ordered by (device_id, window_start) and samples inside each window by
// (timestamp, seq).
std::vector<SampleWindow> windowize(std::span<const AccelSample> samples,
                                    const WindowOptions& options = {});

void write_csv(std::ostream& out, std::span<const AccelSample> samples, bool with_header = true);
void write_jsonl(std::ostream& out, std::span<const AccelSample> samples);

void to_json(nlohmann::json& j, const CleaningReport& r);

}  // namespace palm::ingest
