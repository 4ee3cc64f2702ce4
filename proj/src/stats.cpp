#include "palm/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

#include "palm/errors.hpp"

namespace palm::stats {

namespace {

void put(std::ostream& out, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.write(buf, ptr - buf);
}

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

// Two-pass mean and sample standard deviation.
Moments moments(std::span<const double> values) {
  Moments m;
  const double n = static_cast<double>(values.size());
  m.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.std = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return m;
}

}  // namespace

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(ErrorKind::InsufficientData, "quantile of empty data");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

StatSummary summarize(std::span<const double> values, double duration_minutes) {
  if (values.size() < 2) {
    throw Error(ErrorKind::InsufficientData, "summary needs at least 2 samples");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());

  StatSummary s;
  s.n = sorted.size();
  const auto m = moments(sorted);
  s.mean = m.mean;
  s.std = m.std;
  s.min = sorted.front();
  s.max = sorted.back();
  s.q25 = quantile_sorted(sorted, 0.25);
  s.median = quantile_sorted(sorted, 0.5);
  s.q75 = quantile_sorted(sorted, 0.75);
  s.iqr = s.q75 - s.q25;
  s.whisker_low = s.q25 - 1.5 * s.iqr;
  s.whisker_high = s.q75 + 1.5 * s.iqr;
  s.whisker_span = s.whisker_high - s.whisker_low;
  const auto below = std::lower_bound(sorted.begin(), sorted.end(), s.whisker_low) - sorted.begin();
  const auto above = sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), s.whisker_high);
  s.outlier_count = static_cast<std::size_t>(below + above);
  s.duration_minutes = duration_minutes;
  return s;
}

StatSummary summarize(const SampleWindow& window) {
  const auto values = window.magnitudes();
  return summarize(values, static_cast<double>(window.nominal_duration.count()) / 60.0);
}

double whisker_span_from_quartiles(double q25, double q75) {
  if (q75 < q25) throw Error(ErrorKind::Ordering, "q75 must not be below q25");
  return 4.0 * (q75 - q25);
}

HistogramResult histogram(std::span<const double> values, std::size_t bin_count) {
  if (bin_count == 0) throw Error(ErrorKind::Configuration, "bin_count must be at least 1");
  if (values.empty()) throw Error(ErrorKind::InsufficientData, "histogram needs at least 1 sample");

  auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it;
  double hi = *hi_it;
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  HistogramResult h;
  h.bin_count = bin_count;
  h.bin_edges.resize(bin_count + 1);
  const double width = (hi - lo) / static_cast<double>(bin_count);
  for (std::size_t i = 0; i <= bin_count; ++i) h.bin_edges[i] = lo + width * static_cast<double>(i);
  h.bin_edges.back() = hi;
  h.counts.assign(bin_count, 0);
  for (double v : values) {
    auto index = static_cast<std::size_t>(std::floor((v - lo) / width));
    if (v < lo) index = 0;
    index = std::min(index, bin_count - 1);
    // floor() can land one bin off when v sits on an edge.
    while (index > 0 && v < h.bin_edges[index]) --index;
    while (index + 1 < bin_count && v >= h.bin_edges[index + 1]) ++index;
    ++h.counts[index];
  }
  return h;
}

HistogramResult histogram(const SampleWindow& window, std::size_t bin_count) {
  const auto values = window.magnitudes();
  return histogram(values, bin_count);
}

double EcdfResult::evaluate(double v) const {
  if (n == 0) return 0.0;
  const auto it = std::upper_bound(values.begin(), values.end(), v);
  if (it == values.begin()) return 0.0;
  return fractions[static_cast<std::size_t>(it - values.begin()) - 1];
}

EcdfResult ecdf(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorKind::InsufficientData, "ecdf needs at least 1 sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  EcdfResult e;
  e.n = sorted.size();
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i + 1 < sorted.size() && sorted[i + 1] == sorted[i]) continue;
    e.values.push_back(sorted[i]);
    e.cumulative_counts.push_back(i + 1);
  }
  e.fractions.reserve(e.values.size());
  for (std::size_t c : e.cumulative_counts) {
    e.fractions.push_back(static_cast<double>(c) / static_cast<double>(e.n));
  }
  e.fractions.back() = 1.0;
  return e;
}

EcdfResult ecdf(const SampleWindow& window) {
  const auto values = window.magnitudes();
  return ecdf(values);
}

namespace {

Moments ecdf_moments(const EcdfResult& e) {
  const double n = static_cast<double>(e.n);
  double sum = 0.0;
  std::size_t prev = 0;
  for (std::size_t i = 0; i < e.values.size(); ++i) {
    sum += e.values[i] * static_cast<double>(e.cumulative_counts[i] - prev);
    prev = e.cumulative_counts[i];
  }
  Moments m;
  m.mean = sum / n;
  double ss = 0.0;
  prev = 0;
  for (std::size_t i = 0; i < e.values.size(); ++i) {
    const double d = e.values[i] - m.mean;
    ss += d * d * static_cast<double>(e.cumulative_counts[i] - prev);
    prev = e.cumulative_counts[i];
  }
  m.std = e.n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return m;
}

}  // namespace

DistributionComparison compare_distributions(const EcdfResult& before, const EcdfResult& after) {
  if (before.n == 0 || after.n == 0) {
    throw Error(ErrorKind::InsufficientData, "distribution comparison needs non-empty inputs");
  }
  // Both step functions only change at their support points, so the sup is
  // attained on the merged support.
  DistributionComparison c;
  std::size_t i = 0, j = 0;
  double fb = 0.0, fa = 0.0;
  while (i < before.values.size() || j < after.values.size()) {
    const double vb = i < before.values.size() ? before.values[i] : std::numeric_limits<double>::infinity();
    const double va = j < after.values.size() ? after.values[j] : std::numeric_limits<double>::infinity();
    const double v = std::min(vb, va);
    if (vb == v) fb = before.fractions[i++];
    if (va == v) fa = after.fractions[j++];
    c.ks_statistic = std::max(c.ks_statistic, std::abs(fb - fa));
  }
  const auto mb = ecdf_moments(before);
  const auto ma = ecdf_moments(after);
  c.mean_shift = ma.mean - mb.mean;
  c.spread_ratio = mb.std > 0.0 ? ma.std / mb.std : std::numeric_limits<double>::infinity();
  return c;
}

void write_summary_csv_header(std::ostream& out) {
  out << "dataset,sample_size,mean,std,median,min,p25,p50,p75,max,duration_minutes\n";
}

void write_summary_csv_row(std::ostream& out, std::string_view dataset, const StatSummary& s) {
  out << dataset << ',' << s.n;
  for (double v : {s.mean, s.std, s.median, s.min, s.q25, s.median, s.q75, s.max, s.duration_minutes}) {
    out << ',';
    put(out, v);
  }
  out << '\n';
}

void write_csv(std::ostream& out, const HistogramResult& h) {
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    put(out, h.bin_edges[i]);
    out << ',';
    put(out, h.bin_edges[i + 1]);
    out << ',' << h.counts[i] << '\n';
  }
}

void write_csv(std::ostream& out, const EcdfResult& e, std::size_t max_points) {
  out << "value,fraction\n";
  const std::size_t m = e.values.size();
  auto row = [&](std::size_t i) {
    put(out, e.values[i]);
    out << ',';
    put(out, e.fractions[i]);
    out << '\n';
  };
  if (m <= max_points || max_points < 2) {
    for (std::size_t i = 0; i < m; ++i) row(i);
    return;
  }
  std::size_t last = m;
  for (std::size_t k = 0; k < max_points; ++k) {
    const std::size_t i = static_cast<std::size_t>(
        std::llround(static_cast<double>(k) * static_cast<double>(m - 1) / static_cast<double>(max_points - 1)));
    if (i == last) continue;
    row(i);
    last = i;
  }
}

void to_json(nlohmann::json& j, const StatSummary& s) {
  j = nlohmann::json{{"n", s.n},
                     {"mean", s.mean},
                     {"std", s.std},
                     {"median", s.median},
                     {"min", s.min},
                     {"max", s.max},
                     {"q25", s.q25},
                     {"q75", s.q75},
                     {"iqr", s.iqr},
                     {"whisker_low", s.whisker_low},
                     {"whisker_high", s.whisker_high},
                     {"whisker_span", s.whisker_span},
                     {"outlier_count", s.outlier_count},
                     {"duration_minutes", s.duration_minutes}};
}

void from_json(const nlohmann::json& j, StatSummary& s) {
  s.n = j.at("n").get<std::size_t>();
  s.mean = j.at("mean").get<double>();
  s.std = j.at("std").get<double>();
  s.median = j.at("median").get<double>();
  s.min = j.at("min").get<double>();
  s.max = j.at("max").get<double>();
  s.q25 = j.at("q25").get<double>();
  s.q75 = j.at("q75").get<double>();
  s.iqr = j.at("iqr").get<double>();
  s.whisker_low = j.at("whisker_low").get<double>();
  s.whisker_high = j.at("whisker_high").get<double>();
  s.whisker_span = j.at("whisker_span").get<double>();
  s.outlier_count = j.value("outlier_count", std::size_t{0});
  s.duration_minutes = j.value("duration_minutes", 60.0);
}

void to_json(nlohmann::json& j, const HistogramResult& h) {
  j = nlohmann::json{{"bin_count", h.bin_count}, {"bin_edges", h.bin_edges}, {"counts", h.counts}};
}

void to_json(nlohmann::json& j, const DistributionComparison& c) {
  j = nlohmann::json{{"ks_statistic", c.ks_statistic},
                     {"mean_shift", c.mean_shift},
                     {"spread_ratio", c.spread_ratio}};
}

}  // namespace palm::stats
