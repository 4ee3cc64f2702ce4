#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "palm/spectral.hpp"
#include "palm/stats.hpp"
#include "palm/telemetry.hpp"

namespace palm::detector {

/// Flat key/value thresholds. Every key is optional in the document form.
struct DetectorConfig {
  double fft_abs_threshold = 0.004;
  double fft_fraction = 0.10;
  double pad_min = 0.0;
  double whisker_ratio_min = 1.3;
  double mean_shift_sigmas = 0.5;
  bool fft_level_enabled = true;

  std::size_t psd_segment_length = spectral::kDefaultSegmentLength;
  double psd_overlap = spectral::kDefaultOverlap;
  double band_lo_hz = 0.0;
  double band_hi_hz = 10.0;
  double peak_threshold = spectral::kDefaultPeakThreshold;

  bool operator==(const DetectorConfig&) const = default;
};

// Throws Configuration with the offending key on bad values or unknown keys.
DetectorConfig detector_config_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const DetectorConfig& c);

enum class Indicator { FftLevel, PsdPad, WhiskerRatio, MeanShift };
inline constexpr std::array<Indicator, 4> kIndicators{Indicator::FftLevel, Indicator::PsdPad,
                                                      Indicator::WhiskerRatio, Indicator::MeanShift};
std::string_view to_string(Indicator i) noexcept;

struct IndicatorResult {
  bool fired = false;
  bool evaluable = true;
  double value = 0.0;
  double threshold = 0.0;

  bool operator==(const IndicatorResult&) const = default;
};

struct BaselineProfile {
  DeviceId device_id;
  Placement placement = Placement::Inside;
  stats::StatSummary stat;
  spectral::PeakSet psd_peaks;  // over the configured band
  spectral::PeakSet fft_peaks;
  bool psd_evaluable = true;
  Timestamp established_at{};
  std::size_t source_window_count = 0;
};

struct HealthAssessment {
  DeviceId device_id;
  Timestamp window_start{};
  std::map<Indicator, IndicatorResult> indicators;
  int fired_count = 0;
  Likelihood likelihood = Likelihood::Low;
};

/// 0-1 fired indicators -> Low, 2 -> Medium, 3-4 -> High.
Likelihood classify(int fired_count);

/// Statistical and spectral evidence from the concatenated healthy windows.
/// Throws InsufficientData when no windows are given.
BaselineProfile build_baseline(const DeviceId& device, Placement placement,
                               std::span<const SampleWindow> healthy_windows,
                               const DetectorConfig& config = {});

/// Same as above over bare magnitudes; `minutes` is the nominal covered duration.
BaselineProfile build_baseline(const DeviceId& device, Placement placement, std::span<const double> values,
                               double sample_rate_hz, double minutes, std::size_t window_count,
                               Timestamp established_at, const DetectorConfig& config = {});

/// Evaluates the four indicators of one window against a baseline.
/// Throws Comparison when the placements differ.
HealthAssessment assess_window(const SampleWindow& window, Placement placement,
                               const BaselineProfile& baseline, const DetectorConfig& config = {});

HealthAssessment assess_values(const DeviceId& device, Timestamp window_start, std::span<const double> values,
                               double sample_rate_hz, double minutes, Placement placement,
                               const BaselineProfile& baseline, const DetectorConfig& config = {});

/// Statistics-only evidence (I3 whisker ratio, I4 mean shift); I1 and I2 are
/// reported as not evaluable.
HealthAssessment assess_summary(const DeviceId& device, Timestamp window_start,
                                const stats::StatSummary& window, const BaselineProfile& baseline,
                                const DetectorConfig& config = {});

/// Read-mostly store of per-device, per-placement baselines.
class BaselineStore {
 public:
  void put(BaselineProfile profile);
  std::optional<BaselineProfile> get(const DeviceId& device, Placement placement) const;
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::pair<DeviceId, Placement>, std::shared_ptr<const BaselineProfile>> profiles_;
};

void to_json(nlohmann::json& j, const IndicatorResult& r);
void from_json(const nlohmann::json& j, IndicatorResult& r);
void to_json(nlohmann::json& j, const HealthAssessment& a);
void from_json(const nlohmann::json& j, HealthAssessment& a);
void to_json(nlohmann::json& j, const BaselineProfile& b);

}  // namespace palm::detector
