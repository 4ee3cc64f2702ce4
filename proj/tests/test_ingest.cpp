#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "palm/errors.hpp"
#include "palm/ingest.hpp"

using namespace palm;
using namespace palm::ingest;
using Catch::Approx;

namespace {

std::vector<AccelSample> with_magnitudes(const std::vector<double>& mags) {
  std::vector<AccelSample> out;
  for (std::size_t i = 0; i < mags.size(); ++i) {
    out.push_back(AccelSample::make("p1", i, Timestamp{std::chrono::milliseconds(10 * i)}, 0.0, 0.0, mags[i]));
  }
  return out;
}

std::vector<double> mags_of(const std::vector<AccelSample>& s) {
  std::vector<double> out;
  for (const auto& x : s) out.push_back(x.magnitude);
  return out;
}

AccelSample at(const char* iso, std::uint64_t seq = 0) {
  return AccelSample::make("p1", seq, parse_timestamp(iso), 0, 0, 9.8);
}

}  // namespace

TEST_CASE("parse_log reads a CSV row and computes the magnitude", "[ingest]") {
  std::istringstream in("p1,42,2019-06-01T10:00:00.010Z,0.1,0.2,9.8\n");
  const auto r = parse_log(in, LogFormat::Csv);
  REQUIRE(r.samples.size() == 1);
  CHECK(r.samples[0].seq == 42);
  CHECK(r.samples[0].device_id == "p1");
  CHECK(format_timestamp(r.samples[0].timestamp) == "2019-06-01T10:00:00.010Z");
  // sqrt(0.01 + 0.04 + 96.04) = sqrt(96.09)
  CHECK(r.samples[0].magnitude == Approx(9.802550688).epsilon(1e-9));
  CHECK(r.report.dropped_malformed == 0);
}

TEST_CASE("parse_log on an empty stream", "[ingest]") {
  std::istringstream in("");
  const auto r = parse_log(in, LogFormat::Csv);
  CHECK(r.samples.empty());
  CHECK(r.report.total_in == 0);
  CHECK(r.report.kept == 0);
  CHECK(r.report.dropped_malformed == 0);
}

TEST_CASE("parse_log counts malformed rows without aborting", "[ingest]") {
  std::istringstream in(
      "device_id,seq,timestamp_iso8601,ax,ay,az\n"
      "p1,1,2019-06-01T10:00:00.000Z,0.1,0.2,9.8\n"
      "p1,2,2019-06-01T10:00:00.010Z,abc,0.2,9.8\n"
      "p1,3,2019-06-01T10:00:00.020Z,0.1,0.2,9.8\n");
  const auto r = parse_log(in, LogFormat::Csv);
  CHECK(r.samples.size() == 2);
  CHECK(r.report.dropped_malformed == 1);
  CHECK(r.report.total_in == 3);
  CHECK(r.report.balanced());
}

TEST_CASE("parse_log validates an explicit magnitude column", "[ingest]") {
  std::istringstream in(
      "p1,1,2019-06-01T10:00:00.000Z,3,4,12,13\n"
      "p1,2,2019-06-01T10:00:00.010Z,3,4,12,13.0000000001\n"
      "p1,3,2019-06-01T10:00:00.020Z,3,4,12,13.5\n");
  const auto r = parse_log(in, LogFormat::Csv);
  CHECK(r.samples.size() == 2);
  CHECK(r.report.dropped_malformed == 1);
}

TEST_CASE("parse_log rejects mostly-corrupt input", "[ingest]") {
  std::istringstream in(
      "p1,1,2019-06-01T10:00:00.000Z,0.1,0.2,9.8\n"
      "garbage\n"
      "p1,x,2019-06-01T10:00:00.010Z,0.1,0.2,9.8\n");
  try {
    parse_log(in, LogFormat::Csv);
    FAIL("expected corrupt input");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CorruptInput);
  }
}

TEST_CASE("parse_log reads canonical JSON lines", "[ingest]") {
  std::ostringstream out;
  const auto samples = with_magnitudes({9.7, 9.8, 9.9});
  write_jsonl(out, samples);
  std::istringstream in(out.str() + "{\"device_id\": \"p1\"}\n");
  const auto r = parse_log(in, LogFormat::Jsonl);
  CHECK(r.samples == samples);
  CHECK(r.report.dropped_malformed == 1);
}

TEST_CASE("CSV writer output parses back to the same samples", "[ingest][property]") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 3.0);
  std::vector<AccelSample> samples;
  for (std::uint64_t i = 0; i < 300; ++i) {
    samples.push_back(AccelSample::make(i % 2 ? "a" : "b", i, Timestamp{std::chrono::milliseconds(1560000000000LL + i * 10)},
                                        g(rng), g(rng), 9.8 + g(rng)));
  }
  std::ostringstream out;
  write_csv(out, samples);
  std::istringstream in(out.str());
  CHECK(parse_log(in, LogFormat::Csv).samples == samples);
}

TEST_CASE("parse_log_file reports unreadable paths", "[ingest]") {
  try {
    parse_log_file("/nonexistent/log.csv");
    FAIL("expected io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}

TEST_CASE("clean_outliers examples", "[ingest]") {
  const auto r = clean_outliers(with_magnitudes({9.0, 5.9, 18.0, 10.1}));
  CHECK(mags_of(r.samples) == std::vector<double>{9.0, 10.1});
  CHECK(r.report.dropped_low == 1);
  CHECK(r.report.dropped_high == 1);
  CHECK(r.report.kept == 2);
  CHECK(r.report.balanced());

  CHECK(clean_outliers(with_magnitudes({6.0, 17.0})).samples.size() == 2);

  const auto clean = with_magnitudes({7.0, 9.8, 12.0});
  const auto once = clean_outliers(clean);
  CHECK(once.samples == clean);
  CHECK(clean_outliers(once.samples).samples == once.samples);
}

TEST_CASE("clean_outliers rejects inverted bounds", "[ingest]") {
  try {
    clean_outliers(with_magnitudes({9.0}), 17.0, 6.0);
    FAIL("expected configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Configuration);
  }
  CHECK_THROWS_AS(clean_outliers(with_magnitudes({9.0}), 6.0, 6.0), Error);
}

TEST_CASE("clean_outliers bounds, order and idempotence on random vectors", "[ingest][property]") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 25.0);
  std::uniform_int_distribution<int> len(0, 200);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> mags(static_cast<std::size_t>(len(rng)));
    for (double& m : mags) m = u(rng);
    const auto input = with_magnitudes(mags);
    const auto once = clean_outliers(input);
    for (const auto& s : once.samples) {
      CHECK(s.magnitude >= 6.0);
      CHECK(s.magnitude <= 17.0);
    }
    for (std::size_t i = 1; i < once.samples.size(); ++i) CHECK(once.samples[i - 1].seq < once.samples[i].seq);
    CHECK(once.report.balanced());
    CHECK(clean_outliers(once.samples).samples == once.samples);
  }
}

TEST_CASE("windowize examples", "[ingest]") {
  {
    std::vector<AccelSample> s{at("2019-06-01T10:00:00Z", 0), at("2019-06-01T10:59:59Z", 1)};
    CHECK(windowize(s).size() == 1);
  }
  {
    std::vector<AccelSample> s{at("2019-06-01T10:59:59Z", 0), at("2019-06-01T11:00:00Z", 1)};
    const auto w = windowize(s);
    REQUIRE(w.size() == 2);
    CHECK(format_timestamp(w[0].window_start) == "2019-06-01T10:00:00.000Z");
    CHECK(format_timestamp(w[1].window_start) == "2019-06-01T11:00:00.000Z");
  }
  CHECK(windowize(std::vector<AccelSample>{}).empty());
}

TEST_CASE("windowize can anchor at each device's first sample", "[ingest]") {
  std::vector<AccelSample> s{at("2019-06-01T10:59:59Z", 0), at("2019-06-01T11:00:00Z", 1),
                             at("2019-06-01T11:59:59Z", 2)};
  WindowOptions opts;
  opts.alignment = WindowAlignment::FirstSample;
  const auto w = windowize(s, opts);
  REQUIRE(w.size() == 2);
  CHECK(w[0].samples.size() == 2);
  CHECK(format_timestamp(w[1].window_start) == "2019-06-01T11:59:59.000Z");
}

TEST_CASE("windowize conserves samples and separates devices", "[ingest][property]") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<long long> t(0, 10LL * 3600 * 1000);
  std::vector<AccelSample> samples;
  for (std::uint64_t i = 0; i < 5000; ++i) {
    samples.push_back(AccelSample::make(i % 3 == 0 ? "a" : "b", i, Timestamp{std::chrono::milliseconds(t(rng))}, 0, 0, 9.8));
  }
  for (auto alignment : {WindowAlignment::Epoch, WindowAlignment::FirstSample}) {
    WindowOptions opts;
    opts.alignment = alignment;
    const auto windows = windowize(samples, opts);
    std::size_t total = 0;
    for (const auto& w : windows) {
      total += w.samples.size();
      CHECK_FALSE(w.samples.empty());
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto& s = w.samples[i];
        CHECK(s.device_id == w.device_id);
        CHECK(s.timestamp >= w.window_start);
        CHECK(s.timestamp < w.window_end());
        if (i > 0) CHECK(w.samples[i - 1].timestamp <= s.timestamp);
      }
    }
    CHECK(total == samples.size());
  }
}
