#include "palm/detector.hpp"

#include <cmath>
#include <limits>
#include <mutex>

#include "palm/errors.hpp"

namespace palm::detector {

namespace {

std::vector<double> concatenate(std::span<const SampleWindow> windows) {
  std::size_t total = 0;
  for (const auto& w : windows) total += w.samples.size();
  std::vector<double> out;
  out.reserve(total);
  for (const auto& w : windows) {
    for (const auto& s : w.samples) out.push_back(s.magnitude);
  }
  return out;
}

spectral::SpectralSettings psd_settings(const DetectorConfig& c, double fs) {
  return spectral::SpectralSettings{spectral::SpectrumKind::WelchPsd, fs, c.psd_segment_length,
                                    c.psd_overlap, true, c.band_lo_hz, c.band_hi_hz};
}

spectral::PeakSet band_peaks(std::span<const double> values, double fs, const DetectorConfig& c) {
  const auto psd = spectral::welch_psd(values, fs, c.psd_segment_length, c.psd_overlap, true);
  return spectral::extract_peaks(spectral::band_slice(psd, c.band_lo_hz, c.band_hi_hz), c.peak_threshold);
}

IndicatorResult whisker_indicator(const stats::StatSummary& window, const stats::StatSummary& baseline,
                                  const DetectorConfig& c) {
  IndicatorResult r;
  r.threshold = c.whisker_ratio_min;
  if (baseline.whisker_span > 0.0) {
    r.value = window.whisker_span / baseline.whisker_span;
  } else {
    r.value = window.whisker_span > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  }
  r.fired = r.value >= r.threshold;
  return r;
}

IndicatorResult mean_shift_indicator(const stats::StatSummary& window, const stats::StatSummary& baseline,
                                     const DetectorConfig& c) {
  IndicatorResult r;
  r.value = std::abs(window.mean - baseline.mean);
  r.threshold = c.mean_shift_sigmas * baseline.std;
  r.fired = r.value > 0.0 && r.value >= r.threshold;
  return r;
}

HealthAssessment finish(HealthAssessment a) {
  a.fired_count = 0;
  for (const auto& [_, r] : a.indicators) a.fired_count += r.fired ? 1 : 0;
  a.likelihood = classify(a.fired_count);
  return a;
}

void check_number(const nlohmann::json& j, std::string_view key) {
  if (!j.is_number()) throw Error(ErrorKind::Configuration, "detector key '" + std::string(key) + "' must be a number");
}

}  // namespace

std::string_view to_string(Indicator i) noexcept {
  switch (i) {
    case Indicator::FftLevel: return "fft_level";
    case Indicator::PsdPad: return "psd_pad";
    case Indicator::WhiskerRatio: return "whisker_ratio";
    case Indicator::MeanShift: return "mean_shift";
  }
  return "unknown";
}

DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::Configuration, "detector config must be a key/value map");
  DetectorConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "fft_level_enabled") {
      if (!value.is_boolean()) throw Error(ErrorKind::Configuration, "detector key 'fft_level_enabled' must be a boolean");
      c.fft_level_enabled = value.get<bool>();
      continue;
    }
    check_number(value, key);
    const double v = value.get<double>();
    if (key == "fft_abs_threshold") c.fft_abs_threshold = v;
    else if (key == "fft_fraction") c.fft_fraction = v;
    else if (key == "pad_min") c.pad_min = v;
    else if (key == "whisker_ratio_min") c.whisker_ratio_min = v;
    else if (key == "mean_shift_sigmas") c.mean_shift_sigmas = v;
    else if (key == "psd_segment_length") c.psd_segment_length = static_cast<std::size_t>(v);
    else if (key == "psd_overlap") c.psd_overlap = v;
    else if (key == "band_lo_hz") c.band_lo_hz = v;
    else if (key == "band_hi_hz") c.band_hi_hz = v;
    else if (key == "peak_threshold") c.peak_threshold = v;
    else throw Error(ErrorKind::Configuration, "unknown detector key '" + key + "'");
  }
  if (c.fft_abs_threshold < 0.0 || c.fft_fraction < 0.0 || c.fft_fraction > 1.0) {
    throw Error(ErrorKind::Configuration, "fft thresholds out of range");
  }
  if (c.whisker_ratio_min <= 0.0 || c.mean_shift_sigmas < 0.0) {
    throw Error(ErrorKind::Configuration, "statistical thresholds out of range");
  }
  if (c.psd_segment_length < 2 || c.psd_overlap < 0.0 || c.psd_overlap >= 1.0) {
    throw Error(ErrorKind::Configuration, "psd settings out of range");
  }
  if (c.band_lo_hz < 0.0 || c.band_hi_hz < c.band_lo_hz) {
    throw Error(ErrorKind::Configuration, "band must satisfy 0 <= band_lo_hz <= band_hi_hz");
  }
  if (c.peak_threshold < 0.0 || c.peak_threshold > 1.0) {
    throw Error(ErrorKind::Configuration, "peak_threshold must be in [0, 1]");
  }
  return c;
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = nlohmann::json{{"fft_abs_threshold", c.fft_abs_threshold},
                     {"fft_fraction", c.fft_fraction},
                     {"fft_level_enabled", c.fft_level_enabled},
                     {"pad_min", c.pad_min},
                     {"whisker_ratio_min", c.whisker_ratio_min},
                     {"mean_shift_sigmas", c.mean_shift_sigmas},
                     {"psd_segment_length", c.psd_segment_length},
                     {"psd_overlap", c.psd_overlap},
                     {"band_lo_hz", c.band_lo_hz},
                     {"band_hi_hz", c.band_hi_hz},
                     {"peak_threshold", c.peak_threshold}};
}

Likelihood classify(int fired_count) {
  if (fired_count >= 3) return Likelihood::High;
  if (fired_count == 2) return Likelihood::Medium;
  return Likelihood::Low;
}

BaselineProfile build_baseline(const DeviceId& device, Placement placement,
                               std::span<const SampleWindow> healthy_windows, const DetectorConfig& config) {
  if (healthy_windows.empty()) throw Error(ErrorKind::InsufficientData, "baseline needs at least one healthy window");
  double minutes = 0.0;
  for (const auto& w : healthy_windows) minutes += static_cast<double>(w.nominal_duration.count()) / 60.0;
  Timestamp latest = healthy_windows.front().window_end();
  for (const auto& w : healthy_windows) latest = std::max(latest, w.window_end());
  return build_baseline(device, placement, concatenate(healthy_windows), healthy_windows.front().sample_rate_hz,
                        minutes, healthy_windows.size(), latest, config);
}

BaselineProfile build_baseline(const DeviceId& device, Placement placement, std::span<const double> values,
                               double sample_rate_hz, double minutes, std::size_t window_count,
                               Timestamp established_at, const DetectorConfig& config) {
  if (window_count == 0) throw Error(ErrorKind::InsufficientData, "baseline needs at least one healthy window");
  BaselineProfile b;
  b.device_id = device;
  b.placement = placement;
  b.stat = stats::summarize(values, minutes);
  if (values.size() >= config.psd_segment_length) {
    b.psd_peaks = band_peaks(values, sample_rate_hz, config);
  } else {
    b.psd_evaluable = false;
    b.psd_peaks.threshold_fraction = config.peak_threshold;
    b.psd_peaks.settings = psd_settings(config, sample_rate_hz);
  }
  b.fft_peaks = spectral::extract_peaks(spectral::fft_spectrum(values, sample_rate_hz, true), config.peak_threshold);
  b.established_at = established_at;
  b.source_window_count = window_count;
  return b;
}

HealthAssessment assess_window(const SampleWindow& window, Placement placement, const BaselineProfile& baseline,
                               const DetectorConfig& config) {
  return assess_values(window.device_id, window.window_start, window.magnitudes(), window.sample_rate_hz,
                       static_cast<double>(window.nominal_duration.count()) / 60.0, placement, baseline, config);
}

HealthAssessment assess_values(const DeviceId& device, Timestamp window_start, std::span<const double> values,
                               double sample_rate_hz, double minutes, Placement placement,
                               const BaselineProfile& baseline, const DetectorConfig& config) {
  if (placement != baseline.placement) {
    throw Error(ErrorKind::Comparison, "window placement differs from baseline placement");
  }
  const auto stat = stats::summarize(values, minutes);

  HealthAssessment a;
  a.device_id = device;
  a.window_start = window_start;

  IndicatorResult fft;
  fft.threshold = config.fft_fraction;
  if (config.fft_level_enabled) {
    const auto spectrum = spectral::fft_spectrum(values, sample_rate_hz, true);
    std::size_t above = 0;
    for (std::size_t k = 1; k < spectrum.amplitudes.size(); ++k) {
      if (spectrum.amplitudes[k] > config.fft_abs_threshold) ++above;
    }
    const std::size_t bins = spectrum.amplitudes.size() - 1;
    fft.value = bins > 0 ? static_cast<double>(above) / static_cast<double>(bins) : 0.0;
    fft.fired = fft.value > fft.threshold;
  } else {
    fft.evaluable = false;
  }
  a.indicators[Indicator::FftLevel] = fft;

  IndicatorResult pad;
  pad.threshold = config.pad_min;
  if (values.size() >= config.psd_segment_length && baseline.psd_evaluable) {
    const auto current = band_peaks(values, sample_rate_hz, config);
    pad.value = spectral::peaks_average_difference(current, baseline.psd_peaks);
    pad.fired = pad.value > pad.threshold;
  } else {
    pad.evaluable = false;
  }
  a.indicators[Indicator::PsdPad] = pad;

  a.indicators[Indicator::WhiskerRatio] = whisker_indicator(stat, baseline.stat, config);
  a.indicators[Indicator::MeanShift] = mean_shift_indicator(stat, baseline.stat, config);
  return finish(std::move(a));
}

HealthAssessment assess_summary(const DeviceId& device, Timestamp window_start, const stats::StatSummary& window,
                                const BaselineProfile& baseline, const DetectorConfig& config) {
  HealthAssessment a;
  a.device_id = device;
  a.window_start = window_start;
  a.indicators[Indicator::FftLevel] = IndicatorResult{false, false, 0.0, config.fft_fraction};
  a.indicators[Indicator::PsdPad] = IndicatorResult{false, false, 0.0, config.pad_min};
  a.indicators[Indicator::WhiskerRatio] = whisker_indicator(window, baseline.stat, config);
  a.indicators[Indicator::MeanShift] = mean_shift_indicator(window, baseline.stat, config);
  return finish(std::move(a));
}

void BaselineStore::put(BaselineProfile profile) {
  auto key = std::make_pair(profile.device_id, profile.placement);
  auto shared = std::make_shared<const BaselineProfile>(std::move(profile));
  std::unique_lock lock(mutex_);
  profiles_[std::move(key)] = std::move(shared);
}

std::optional<BaselineProfile> BaselineStore::get(const DeviceId& device, Placement placement) const {
  std::shared_lock lock(mutex_);
  auto it = profiles_.find({device, placement});
  if (it == profiles_.end()) return std::nullopt;
  return *it->second;
}

std::size_t BaselineStore::size() const {
  std::shared_lock lock(mutex_);
  return profiles_.size();
}

void to_json(nlohmann::json& j, const IndicatorResult& r) {
  j = nlohmann::json{{"fired", r.fired},
                     {"evaluable", r.evaluable},
                     {"value", std::isfinite(r.value) ? nlohmann::json(r.value) : nlohmann::json(nullptr)},
                     {"threshold", r.threshold}};
}

void from_json(const nlohmann::json& j, IndicatorResult& r) {
  r.fired = j.at("fired").get<bool>();
  r.evaluable = j.value("evaluable", true);
  const auto& v = j.at("value");
  r.value = v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
  r.threshold = j.at("threshold").get<double>();
}

void to_json(nlohmann::json& j, const HealthAssessment& a) {
  nlohmann::json indicators = nlohmann::json::object();
  for (const auto& [kind, r] : a.indicators) indicators[std::string(to_string(kind))] = r;
  const auto level = level_for(a.likelihood);
  j = nlohmann::json{{"device_id", a.device_id},
                     {"window_start", format_timestamp(a.window_start)},
                     {"indicators", std::move(indicators)},
                     {"fired_count", a.fired_count},
                     {"likelihood", to_string(a.likelihood)},
                     {"level", to_string(level)},
                     {"color", color_for(level)}};
}

void from_json(const nlohmann::json& j, HealthAssessment& a) {
  a.device_id = j.at("device_id").get<std::string>();
  a.window_start = parse_timestamp(j.at("window_start").get<std::string>());
  a.indicators.clear();
  for (Indicator kind : kIndicators) {
    const auto& ind = j.at("indicators");
    if (auto it = ind.find(std::string(to_string(kind))); it != ind.end()) {
      a.indicators[kind] = it->get<IndicatorResult>();
    }
  }
  a.fired_count = j.at("fired_count").get<int>();
  a.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  if (a.fired_count < 0 || a.fired_count > 4 || classify(a.fired_count) != a.likelihood) {
    throw Error(ErrorKind::Validation, "assessment likelihood inconsistent with fired_count");
  }
}

void to_json(nlohmann::json& j, const BaselineProfile& b) {
  j = nlohmann::json{{"device_id", b.device_id},
                     {"placement", to_string(b.placement)},
                     {"stat", b.stat},
                     {"psd_peaks", b.psd_peaks},
                     {"psd_evaluable", b.psd_evaluable},
                     {"fft_peaks", b.fft_peaks},
                     {"established_at", format_timestamp(b.established_at)},
                     {"source_window_count", b.source_window_count}};
}

}  // namespace palm::detector
