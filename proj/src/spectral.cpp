#include "palm/spectral.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>

#include "palm/errors.hpp"

namespace palm::spectral {

namespace {

constexpr double kBandEpsilon = 1e-9;

double mean_of(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

void check_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::RejectedSample, "non-finite value in spectral input");
  }
}

std::vector<double> normalize(const std::vector<double>& values) {
  const double peak = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
  std::vector<double> out(values.size(), 0.0);
  if (peak > 0.0) {
    std::transform(values.begin(), values.end(), out.begin(), [peak](double v) { return v / peak; });
  }
  return out;
}

std::pair<std::size_t, std::size_t> band_bounds(std::span<const double> freqs, double f_lo, double f_hi) {
  const double nyquist = freqs.empty() ? 0.0 : freqs.back();
  if (f_lo < 0.0 || f_lo > f_hi || f_hi > nyquist * (1.0 + kBandEpsilon)) {
    throw Error(ErrorKind::Configuration, "band must satisfy 0 <= f_lo <= f_hi <= fs/2");
  }
  const double lo = f_lo - kBandEpsilon * std::max(1.0, f_lo);
  const double hi = f_hi + kBandEpsilon * std::max(1.0, f_hi);
  const auto first = std::lower_bound(freqs.begin(), freqs.end(), lo) - freqs.begin();
  const auto last = std::upper_bound(freqs.begin(), freqs.end(), hi) - freqs.begin();
  if (first >= last) throw Error(ErrorKind::EmptyBand, "band contains no frequency bins");
  return {static_cast<std::size_t>(first), static_cast<std::size_t>(last)};
}

}  // namespace

SpectralSettings SpectrumResult::settings() const {
  return SpectralSettings{SpectrumKind::Fft, sample_rate_hz, 0, 0.0, detrend, band_lo_hz, band_hi_hz};
}

SpectralSettings PsdResult::settings() const {
  return SpectralSettings{SpectrumKind::WelchPsd, sample_rate_hz, segment_length, overlap_fraction,
                          detrend, band_lo_hz, band_hi_hz};
}

std::vector<double> hanning_window(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::Size, "window length must be at least 1");
  if (n == 1) return {1.0};
  std::vector<double> w(n);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / denom);
  }
  // cos() rounding leaves the endpoints and mirror pairs a few ulp apart.
  for (std::size_t k = 0; k < n / 2; ++k) w[n - 1 - k] = w[k];
  w.front() = 0.0;
  w.back() = 0.0;
  return w;
}

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::span<std::complex<double>> data) {
  const std::size_t n = data.size();
  if (n == 0 || (n & (n - 1)) != 0) throw Error(ErrorKind::Size, "FFT length must be a power of two");

  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i], data[j]);
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    // Twiddles computed directly per index; recurrence drift hurts long transforms.
    std::vector<std::complex<double>> twiddle(half);
    for (std::size_t k = 0; k < half; ++k) {
      twiddle[k] = std::polar(1.0, angle * static_cast<double>(k));
    }
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const auto u = data[i + k];
        const auto v = data[i + k + half] * twiddle[k];
        data[i + k] = u + v;
        data[i + k + half] = u - v;
      }
    }
  }
}

SpectrumResult fft_spectrum(std::span<const double> values, double sample_rate_hz, bool detrend) {
  if (values.empty()) throw Error(ErrorKind::EmptyInput, "cannot compute spectrum of empty window");
  if (!(sample_rate_hz > 0.0)) throw Error(ErrorKind::Configuration, "sample rate must be positive");
  check_finite(values);

  const std::size_t n = values.size();
  const std::size_t n_fft = next_power_of_two(n);
  const auto window = hanning_window(n);
  const double offset = detrend ? mean_of(values) : 0.0;

  std::vector<std::complex<double>> buffer(n_fft);
  for (std::size_t i = 0; i < n; ++i) buffer[i] = (values[i] - offset) * window[i];
  fft_inplace(buffer);

  const double window_sum = std::accumulate(window.begin(), window.end(), 0.0);
  const double scale = window_sum > 0.0 ? 1.0 / window_sum : 0.0;

  SpectrumResult out;
  out.sample_rate_hz = sample_rate_hz;
  out.n_fft = n_fft;
  out.detrend = detrend;
  const std::size_t bins = n_fft / 2 + 1;
  out.freqs.resize(bins);
  out.amplitudes.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    out.freqs[k] = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n_fft);
    const bool edge = k == 0 || k == n_fft / 2;
    out.amplitudes[k] = std::abs(buffer[k]) * scale * (edge ? 1.0 : 2.0);
  }
  out.band_hi_hz = sample_rate_hz / 2.0;
  out.normalized = normalize(out.amplitudes);
  return out;
}

SpectrumResult fft_spectrum(const SampleWindow& window, bool detrend) {
  const auto values = window.magnitudes();
  return fft_spectrum(values, window.sample_rate_hz, detrend);
}

PsdResult welch_psd(std::span<const double> values, double sample_rate_hz, std::size_t segment_length,
                    double overlap_fraction, bool detrend) {
  if (segment_length < 2) throw Error(ErrorKind::Configuration, "segment length must be at least 2");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) {
    throw Error(ErrorKind::Configuration, "overlap fraction must be in [0, 1)");
  }
  if (!(sample_rate_hz > 0.0)) throw Error(ErrorKind::Configuration, "sample rate must be positive");
  if (values.size() < segment_length) {
    throw Error(ErrorKind::InsufficientData,
                "need at least " + std::to_string(segment_length) + " samples for one PSD segment, got " +
                    std::to_string(values.size()));
  }
  check_finite(values);

  const auto window = hanning_window(segment_length);
  const double window_power = std::inner_product(window.begin(), window.end(), window.begin(), 0.0);
  const std::size_t overlap = static_cast<std::size_t>(std::llround(overlap_fraction * segment_length));
  const std::size_t step = std::max<std::size_t>(1, segment_length - overlap);
  const std::size_t n_fft = next_power_of_two(segment_length);
  const std::size_t bins = segment_length / 2 + 1;

  PsdResult out;
  out.sample_rate_hz = sample_rate_hz;
  out.segment_length = segment_length;
  out.overlap_fraction = overlap_fraction;
  out.detrend = detrend;
  out.band_hi_hz = sample_rate_hz / 2.0;
  out.freqs.resize(bins);
  out.power_density.assign(bins, 0.0);
  for (std::size_t k = 0; k < bins; ++k) {
    out.freqs[k] = static_cast<double>(k) * sample_rate_hz / static_cast<double>(segment_length);
  }

  // Non-power-of-two segment lengths fall back to a direct DFT per bin.
  const bool radix2 = n_fft == segment_length;
  std::vector<std::complex<double>> buffer(segment_length);
  std::vector<double> segment(segment_length);
  for (std::size_t start = 0; start + segment_length <= values.size(); start += step) {
    const auto chunk = values.subspan(start, segment_length);
    const double offset = detrend ? mean_of(chunk) : 0.0;
    for (std::size_t i = 0; i < segment_length; ++i) segment[i] = (chunk[i] - offset) * window[i];

    if (radix2) {
      for (std::size_t i = 0; i < segment_length; ++i) buffer[i] = segment[i];
      fft_inplace(buffer);
    } else {
      for (std::size_t k = 0; k < bins; ++k) {
        std::complex<double> acc{};
        for (std::size_t i = 0; i < segment_length; ++i) {
          acc += segment[i] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * i % segment_length) /
                                                   static_cast<double>(segment_length));
        }
        buffer[k] = acc;
      }
    }
    for (std::size_t k = 0; k < bins; ++k) {
      const bool edge = k == 0 || (segment_length % 2 == 0 && k == segment_length / 2);
      out.power_density[k] += std::norm(buffer[k]) * (edge ? 1.0 : 2.0);
    }
    ++out.segment_count;
  }

  const double scale = 1.0 / (sample_rate_hz * window_power * static_cast<double>(out.segment_count));
  for (double& p : out.power_density) p *= scale;
  return out;
}

PsdResult welch_psd(const SampleWindow& window, std::size_t segment_length, double overlap_fraction,
                    bool detrend) {
  const auto values = window.magnitudes();
  return welch_psd(values, window.sample_rate_hz, segment_length, overlap_fraction, detrend);
}

PsdResult band_slice(const PsdResult& psd, double f_lo, double f_hi) {
  const auto [first, last] = band_bounds(psd.freqs, f_lo, f_hi);
  PsdResult out = psd;
  out.freqs.assign(psd.freqs.begin() + first, psd.freqs.begin() + last);
  out.power_density.assign(psd.power_density.begin() + first, psd.power_density.begin() + last);
  out.band_lo_hz = f_lo;
  out.band_hi_hz = f_hi;
  return out;
}

SpectrumResult band_slice(const SpectrumResult& spectrum, double f_lo, double f_hi) {
  const auto [first, last] = band_bounds(spectrum.freqs, f_lo, f_hi);
  SpectrumResult out = spectrum;
  out.freqs.assign(spectrum.freqs.begin() + first, spectrum.freqs.begin() + last);
  out.amplitudes.assign(spectrum.amplitudes.begin() + first, spectrum.amplitudes.begin() + last);
  out.normalized = normalize(out.amplitudes);
  out.band_lo_hz = f_lo;
  out.band_hi_hz = f_hi;
  return out;
}

PeakSet extract_peaks(std::span<const double> values, std::span<const double> freqs,
                      double threshold_fraction) {
  if (values.size() != freqs.size()) {
    throw Error(ErrorKind::Size, "values and freqs must have the same length");
  }
  PeakSet out;
  out.threshold_fraction = threshold_fraction;
  if (values.size() < 3) return out;

  const double top = *std::max_element(values.begin(), values.end());
  const double cutoff = threshold_fraction * top;
  const std::size_t n = values.size();
  std::size_t i = 1;
  while (i + 1 < n) {
    if (!(values[i] > values[i - 1])) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < n && values[j] == values[i]) ++j;
    if (j < n && values[j] < values[i] && values[i] >= cutoff && values[i] > 0.0) {
      out.peaks.push_back(Peak{freqs[i], values[i]});
    }
    i = j;
  }
  if (!out.peaks.empty()) {
    double sum = 0.0;
    for (const auto& p : out.peaks) sum += p.value;
    out.peak_average = sum / static_cast<double>(out.peaks.size());
  }
  return out;
}

PeakSet extract_peaks(const PsdResult& psd, double threshold_fraction) {
  auto out = extract_peaks(psd.power_density, psd.freqs, threshold_fraction);
  out.settings = psd.settings();
  return out;
}

PeakSet extract_peaks(const SpectrumResult& spectrum, double threshold_fraction) {
  auto out = extract_peaks(spectrum.amplitudes, spectrum.freqs, threshold_fraction);
  out.settings = spectrum.settings();
  return out;
}

double peaks_average_difference(const PeakSet& after, const PeakSet& before) {
  if (after.threshold_fraction != before.threshold_fraction || after.settings != before.settings) {
    throw Error(ErrorKind::Comparison, "peak sets were computed with different spectral settings");
  }
  return after.peak_average - before.peak_average;
}

void write_csv(std::ostream& out, std::span<const double> freqs, std::span<const double> values) {
  out << "freq_hz,value\n";
  char buf[64];
  for (std::size_t i = 0; i < freqs.size() && i < values.size(); ++i) {
    auto r = std::to_chars(buf, buf + sizeof buf, freqs[i]);
    *r.ptr++ = ',';
    r = std::to_chars(r.ptr, buf + sizeof buf, values[i]);
    out.write(buf, r.ptr - buf);
    out << '\n';
  }
}

void to_json(nlohmann::json& j, const SpectralSettings& s) {
  j = nlohmann::json{{"kind", s.kind == SpectrumKind::Fft ? "fft" : "welch_psd"},
                     {"sample_rate_hz", s.sample_rate_hz},
                     {"segment_length", s.segment_length},
                     {"overlap_fraction", s.overlap_fraction},
                     {"detrend", s.detrend},
                     {"band_lo_hz", s.band_lo_hz},
                     {"band_hi_hz", s.band_hi_hz}};
}

void from_json(const nlohmann::json& j, SpectralSettings& s) {
  s.kind = j.at("kind").get<std::string>() == "fft" ? SpectrumKind::Fft : SpectrumKind::WelchPsd;
  s.sample_rate_hz = j.at("sample_rate_hz").get<double>();
  s.segment_length = j.at("segment_length").get<std::size_t>();
  s.overlap_fraction = j.at("overlap_fraction").get<double>();
  s.detrend = j.at("detrend").get<bool>();
  s.band_lo_hz = j.at("band_lo_hz").get<double>();
  s.band_hi_hz = j.at("band_hi_hz").get<double>();
}

void to_json(nlohmann::json& j, const SpectrumResult& s) {
  j = nlohmann::json{{"sample_rate_hz", s.sample_rate_hz},
                     {"n_fft", s.n_fft},
                     {"detrend", s.detrend},
                     {"band_lo_hz", s.band_lo_hz},
                     {"band_hi_hz", s.band_hi_hz},
                     {"freqs", s.freqs},
                     {"amplitudes", s.amplitudes},
                     {"normalized", s.normalized}};
}

void to_json(nlohmann::json& j, const PsdResult& p) {
  j = nlohmann::json{{"sample_rate_hz", p.sample_rate_hz},
                     {"segment_length", p.segment_length},
                     {"overlap_fraction", p.overlap_fraction},
                     {"detrend", p.detrend},
                     {"segment_count", p.segment_count},
                     {"band_lo_hz", p.band_lo_hz},
                     {"band_hi_hz", p.band_hi_hz},
                     {"freqs", p.freqs},
                     {"power_density", p.power_density}};
}

void to_json(nlohmann::json& j, const PeakSet& p) {
  nlohmann::json peaks = nlohmann::json::array();
  for (const auto& peak : p.peaks) peaks.push_back({{"freq_hz", peak.freq_hz}, {"value", peak.value}});
  j = nlohmann::json{{"threshold_fraction", p.threshold_fraction},
                     {"peaks", std::move(peaks)},
                     {"peak_average", p.peak_average}};
  if (p.settings) j["settings"] = *p.settings;
}

void from_json(const nlohmann::json& j, PeakSet& p) {
  p.threshold_fraction = j.at("threshold_fraction").get<double>();
  p.peak_average = j.at("peak_average").get<double>();
  p.peaks.clear();
  for (const auto& peak : j.at("peaks")) {
    p.peaks.push_back(Peak{peak.at("freq_hz").get<double>(), peak.at("value").get<double>()});
  }
  p.settings.reset();
  if (auto it = j.find("settings"); it != j.end()) p.settings = it->get<SpectralSettings>();
}

}  // namespace palm::spectral
