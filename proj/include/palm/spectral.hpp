#pragma once

#include <complex>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palm/telemetry.hpp"

namespace palm::spectral {

enum class SpectrumKind { Fft, WelchPsd };

/// Settings a spectral estimate was produced with. Two estimates are only
/// comparable when these match exactly.
struct SpectralSettings {
  SpectrumKind kind = SpectrumKind::WelchPsd;
  double sample_rate_hz = 100.0;
  std::size_t segment_length = 0;  // Welch only; 0 for FFT spectra
  double overlap_fraction = 0.0;   // Welch only
  bool detrend = true;
  double band_lo_hz = 0.0;
  double band_hi_hz = 0.0;  // 0 means "up to Nyquist"

  bool operator==(const SpectralSettings&) const = default;
};

struct SpectrumResult {
  double sample_rate_hz = 0.0;
  std::size_t n_fft = 0;
  bool detrend = true;
  double band_lo_hz = 0.0;
  double band_hi_hz = 0.0;
  std::vector<double> freqs;
  std::vector<double> amplitudes;
  std::vector<double> normalized;  // amplitudes / max(amplitudes); all-zero stays all-zero

  SpectralSettings settings() const;
};

struct PsdResult {
  double sample_rate_hz = 0.0;
  std::size_t segment_length = 2048;
  double overlap_fraction = 0.5;
  bool detrend = true;
  std::size_t segment_count = 0;
  double band_lo_hz = 0.0;
  double band_hi_hz = 0.0;
  std::vector<double> freqs;
  std::vector<double> power_density;  // (m/s^2)^2 / Hz

  SpectralSettings settings() const;
};

struct Peak {
  double freq_hz = 0.0;
  double value = 0.0;
  bool operator==(const Peak&) const = default;
};

struct PeakSet {
  double threshold_fraction = 0.6;
  std::vector<Peak> peaks;
  double peak_average = 0.0;
  std::optional<SpectralSettings> settings;
};

inline constexpr std::size_t kDefaultSegmentLength = 2048;
inline constexpr double kDefaultOverlap = 0.5;
inline constexpr double kDefaultPeakThreshold = 0.6;

/// Symmetric Hann taper w[k] = 0.5 - 0.5 cos(2 pi k / (n - 1)); n == 1 gives {1}.
std::vector<double> hanning_window(std::size_t n);

/// In-place radix-2 transform; data.size() must be a power of two.
void fft_inplace(std::span<std::complex<double>> data);

std::size_t next_power_of_two(std::size_t n);

/// Hann-windowed, zero-padded magnitude spectrum. Amplitudes use one-sided
/// window-sum correction (2/sum(w), 1/sum(w) at DC and Nyquist) so a unit
/// sine on a bin reads 1.0.
SpectrumResult fft_spectrum(std::span<const double> values, double sample_rate_hz,
                            bool detrend = true);
SpectrumResult fft_spectrum(const SampleWindow& window, bool detrend = true);

/// Welch average of Hann-windowed periodograms, one-sided density scaling
/// 1/(fs * sum(w^2)). Throws InsufficientData when fewer than one segment.
PsdResult welch_psd(std::span<const double> values, double sample_rate_hz,
                    std::size_t segment_length = kDefaultSegmentLength,
                    double overlap_fraction = kDefaultOverlap, bool detrend = true);
PsdResult welch_psd(const SampleWindow& window, std::size_t segment_length = kDefaultSegmentLength,
                    double overlap_fraction = kDefaultOverlap, bool detrend = true);

/// Bins with f_lo <= freq <= f_hi, order preserved.
PsdResult band_slice(const PsdResult& psd, double f_lo = 0.0, double f_hi = 10.0);
SpectrumResult band_slice(const SpectrumResult& spectrum, double f_lo, double f_hi);

/// Strict local maxima (plateaus counted once at their leftmost index) whose
/// value is at least threshold_fraction * max(values).
PeakSet extract_peaks(std::span<const double> values, std::span<const double> freqs,
                      double threshold_fraction = kDefaultPeakThreshold);
PeakSet extract_peaks(const PsdResult& psd, double threshold_fraction = kDefaultPeakThreshold);
PeakSet extract_peaks(const SpectrumResult& spectrum,
                      double threshold_fraction = kDefaultPeakThreshold);

/// after.peak_average - before.peak_average. Throws Comparison when the two
/// sets were produced with different settings.
double peaks_average_difference(const PeakSet& after, const PeakSet& before);

/// Plot-ready "freq_hz,value" CSV.
void write_csv(std::ostream& out, std::span<const double> freqs, std::span<const double> values);

void to_json(nlohmann::json& j, const SpectralSettings& s);
void from_json(const nlohmann::json& j, SpectralSettings& s);
void to_json(nlohmann::json& j, const SpectrumResult& s);
void to_json(nlohmann::json& j, const PsdResult& p);
void to_json(nlohmann::json& j, const PeakSet& p);
void from_json(const nlohmann::json& j, PeakSet& p);

}  // namespace palm::spectral
