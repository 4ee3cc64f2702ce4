#include "palm/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>

#include "palm/errors.hpp"

namespace palm::ingest {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<double> to_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<std::uint64_t> to_u64(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<AccelSample> parse_csv_row(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cols.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (cols.size() != 6 && cols.size() != 7) return std::nullopt;

  const auto device = trim(cols[0]);
  const auto seq = to_u64(cols[1]);
  const auto ts = try_parse_timestamp(trim(cols[2]));
  const auto ax = to_double(cols[3]);
  const auto ay = to_double(cols[4]);
  const auto az = to_double(cols[5]);
  if (device.empty() || !seq || !ts || !ax || !ay || !az) return std::nullopt;

  auto sample = AccelSample::make(std::string(device), *seq, *ts, *ax, *ay, *az);
  if (cols.size() == 7) {
    const auto given = to_double(cols[6]);
    if (!given) return std::nullopt;
    if (std::abs(*given - sample.magnitude) > kMagnitudeTolerance * std::max(sample.magnitude, 1e-12)) {
      return std::nullopt;
    }
  }
  return sample;
}

std::optional<AccelSample> parse_jsonl_row(std::string_view line) {
  auto j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  try {
    auto sample = j.get<AccelSample>();
    if (sample.device_id.empty()) return std::nullopt;
    return sample;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

CleaningReport& CleaningReport::operator+=(const CleaningReport& other) {
  total_in += other.total_in;
  kept += other.kept;
  dropped_low += other.dropped_low;
  dropped_high += other.dropped_high;
  dropped_malformed += other.dropped_malformed;
  return *this;
}

LogFormat format_for_path(std::string_view path) {
  auto ends_with = [&](std::string_view suffix) {
    return path.size() >= suffix.size() && path.substr(path.size() - suffix.size()) == suffix;
  };
  if (ends_with(".jsonl") || ends_with(".ndjson") || ends_with(".json")) return LogFormat::Jsonl;
  return LogFormat::Csv;
}

ParseResult parse_log(std::istream& in, LogFormat format) {
  if (!in.good() && !in.eof()) throw Error(ErrorKind::Io, "input stream is not readable");

  ParseResult result;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    if (first && format == LogFormat::Csv && view.starts_with("device_id")) {
      first = false;
      continue;
    }
    first = false;
    ++result.report.total_in;
    auto sample = format == LogFormat::Csv ? parse_csv_row(view) : parse_jsonl_row(view);
    if (sample) {
      result.samples.push_back(std::move(*sample));
      ++result.report.kept;
    } else {
      ++result.report.dropped_malformed;
    }
  }
  if (in.bad()) throw Error(ErrorKind::Io, "read error on input stream");
  if (result.report.dropped_malformed * 2 > result.report.total_in) {
    throw Error(ErrorKind::CorruptInput,
                std::to_string(result.report.dropped_malformed) + " of " +
                    std::to_string(result.report.total_in) + " rows are malformed");
  }
  return result;
}

ParseResult parse_log_file(const std::string& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  return parse_log(in, format);
}

ParseResult parse_log_file(const std::string& path) {
  return parse_log_file(path, format_for_path(path));
}

CleanResult clean_outliers(std::span<const AccelSample> samples, double lower, double upper) {
  if (!std::isfinite(lower) || !std::isfinite(upper) || !(lower < upper)) {
    throw Error(ErrorKind::Configuration, "cleaning bounds must be finite with lower < upper");
  }
  CleanResult out;
  out.report.total_in = samples.size();
  out.samples.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.magnitude < lower) {
      ++out.report.dropped_low;
    } else if (s.magnitude > upper) {
      ++out.report.dropped_high;
    } else {
      out.samples.push_back(s);
    }
  }
  out.report.kept = out.samples.size();
  return out;
}

std::vector<SampleWindow> windowize(std::span<const AccelSample> samples,
                                    const WindowOptions& options) {
  using std::chrono::milliseconds;
  if (options.window.count() <= 0) {
    throw Error(ErrorKind::Configuration, "window length must be positive");
  }
  const long long width = std::chrono::duration_cast<milliseconds>(options.window).count();

  std::map<DeviceId, std::vector<const AccelSample*>> by_device;
  for (const auto& s : samples) by_device[s.device_id].push_back(&s);

  std::vector<SampleWindow> windows;
  for (auto& [device, list] : by_device) {
    std::stable_sort(list.begin(), list.end(), [](const AccelSample* a, const AccelSample* b) {
      return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->seq < b->seq;
    });
    const long long anchor = options.alignment == WindowAlignment::FirstSample
                                 ? list.front()->timestamp.time_since_epoch().count()
                                 : 0;
    std::map<long long, SampleWindow> grouped;
    for (const AccelSample* s : list) {
      const long long offset = s->timestamp.time_since_epoch().count() - anchor;
      const long long index = offset >= 0 ? offset / width : -((-offset + width - 1) / width);
      auto [it, inserted] = grouped.try_emplace(index);
      if (inserted) {
        it->second.device_id = device;
        it->second.window_start = Timestamp{milliseconds{anchor + index * width}};
        it->second.nominal_duration = options.window;
        it->second.sample_rate_hz = options.sample_rate_hz;
      }
      it->second.samples.push_back(*s);
    }
    for (auto& [index, window] : grouped) windows.push_back(std::move(window));
  }
  return windows;
}

void write_csv(std::ostream& out, std::span<const AccelSample> samples, bool with_header) {
  if (with_header) out << "device_id,seq,timestamp_iso8601,ax,ay,az,magnitude\n";
  char buf[64];
  auto put = [&](double v) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.write(buf, ptr - buf);
  };
  for (const auto& s : samples) {
    out << s.device_id << ',' << s.seq << ',' << format_timestamp(s.timestamp) << ',';
    put(s.ax);
    out << ',';
    put(s.ay);
    out << ',';
    put(s.az);
    out << ',';
    put(s.magnitude);
    out << '\n';
  }
}

void write_jsonl(std::ostream& out, std::span<const AccelSample> samples) {
  for (const auto& s : samples) out << nlohmann::json(s).dump() << '\n';
}

void to_json(nlohmann::json& j, const CleaningReport& r) {
  j = nlohmann::json{{"total_in", r.total_in},
                     {"kept", r.kept},
                     {"dropped_low", r.dropped_low},
                     {"dropped_high", r.dropped_high},
                     {"dropped_malformed", r.dropped_malformed}};
}

}  // namespace palm::ingest
