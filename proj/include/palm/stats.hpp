#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "palm/telemetry.hpp"

namespace palm::stats {

/// Box-plot measures for one window. Quartiles use linear interpolation
/// between order statistics (position (n - 1) p); std uses n - 1.
struct StatSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  double iqr = 0.0;
  double whisker_low = 0.0;
  double whisker_high = 0.0;
  double whisker_span = 0.0;
  std::size_t outlier_count = 0;  // samples outside the whiskers
  double duration_minutes = 60.0;

  bool operator==(const StatSummary&) const = default;
};

struct HistogramResult {
  std::size_t bin_count = 50;
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
};

struct EcdfResult {
  std::vector<double> values;                  // sorted, unique
  std::vector<std::size_t> cumulative_counts;  // #samples <= values[i]
  std::vector<double> fractions;               // cumulative_counts / n
  std::size_t n = 0;

  /// F(v) = #samples <= v / n.
  double evaluate(double v) const;
};

struct DistributionComparison {
  double ks_statistic = 0.0;
  double mean_shift = 0.0;    // mean_after - mean_before
  double spread_ratio = 0.0;  // std_after / std_before (inf when std_before == 0)
};

inline constexpr std::size_t kDefaultBins = 50;

/// Interpolated quantile of already-sorted data.
double quantile_sorted(std::span<const double> sorted, double p);

StatSummary summarize(std::span<const double> values, double duration_minutes = 60.0);
StatSummary summarize(const SampleWindow& window);

double whisker_span_from_quartiles(double q25, double q75);

HistogramResult histogram(std::span<const double> values, std::size_t bin_count = kDefaultBins);
HistogramResult histogram(const SampleWindow& window, std::size_t bin_count = kDefaultBins);

EcdfResult ecdf(std::span<const double> values);
EcdfResult ecdf(const SampleWindow& window);

DistributionComparison compare_distributions(const EcdfResult& before, const EcdfResult& after);

/// Header and row in the column order of the central-tendency table:
/// dataset, sample size, mean, std, median, min, 25th, 50th, 75th, max, duration.
void write_summary_csv_header(std::ostream& out);
void write_summary_csv_row(std::ostream& out, std::string_view dataset, const StatSummary& s);

void write_csv(std::ostream& out, const HistogramResult& h);
/// At most max_points rows, endpoints kept.
void write_csv(std::ostream& out, const EcdfResult& e, std::size_t max_points = 2000);

void to_json(nlohmann::json& j, const StatSummary& s);
void from_json(const nlohmann::json& j, StatSummary& s);
void to_json(nlohmann::json& j, const HistogramResult& h);
void to_json(nlohmann::json& j, const DistributionComparison& c);

}  // namespace palm::stats
