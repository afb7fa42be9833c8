#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "despk/corpus.hpp"

namespace despk {

/// Analysis parameters for the 19-descriptor pipeline. The defaults are the
/// pinned conformance configuration; change them and the frozen test vectors
/// no longer apply.
struct AnalysisConfig {
  int sample_rate = 16000;
  int window = 320;   // 20 ms
  int hop = 160;      // 10 ms
  int fft_size = 512;
  int n_mels = 40;
  int n_mfcc = 13;
  double rolloff_fraction = 0.85;
  double pitch_min_hz = 50.0;
  double pitch_max_hz = 500.0;
  double voicing_threshold = 0.3;  // normalized autocorrelation peak
  double log_floor = 1e-10;        // mel energy floor before the log
  bool pitch_include_unvoiced = true;  // unvoiced zeros enter the mean/std

  int frame_samples() const { return sample_rate; }  // 1-second frames
  int n_bins() const { return fft_size / 2 + 1; }
  double bin_hz(int k) const {
    return static_cast<double>(k) * sample_rate / fft_size;
  }
  int windows_per_frame() const { return (frame_samples() - window) / hop + 1; }

  void validate() const {
    if (sample_rate != kSampleRate)
      throw std::runtime_error("dsp: sample_rate must be 16000");
    if (window > fft_size) throw std::runtime_error("dsp: window must be <= fft_size");
    if (hop > window || hop <= 0) throw std::runtime_error("dsp: need 0 < hop <= window");
    if (n_mfcc > n_mels) throw std::runtime_error("dsp: n_mfcc must be <= n_mels");
    if ((fft_size & (fft_size - 1)) != 0)
      throw std::runtime_error("dsp: fft_size must be a power of two");
    if (!(pitch_min_hz > 0 && pitch_max_hz > pitch_min_hz))
      throw std::runtime_error("dsp: bad pitch range");
  }
};

inline constexpr int kNumDescriptors = 19;  // 13 MFCC + rms, zcr, centroid, rolloff, flatness, pitch

struct DescriptorFrame {
  std::array<double, 13> mfcc{};
  double rms = 0.0;
  double zcr = 0.0;
  double centroid = 0.0;  // Hz
  double rolloff = 0.0;   // Hz
  double flatness = 0.0;  // [0, 1]
  double pitch = 0.0;     // Hz, 0 when unvoiced
};

// ---------------------------------------------------------------------------
// Windowing

/// Periodic Hann window of the analysis length.
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * M_PI * i / static_cast<double>(n)));
  return w;
}

/// Splits one 1-second frame into raw analysis windows (99 for the default
/// 20 ms / 10 ms configuration). Spectral descriptors apply the Hann weight
/// afterwards; zcr/rms/pitch consume these raw views directly.
inline std::vector<std::span<const double>> window_frames(
    std::span<const double> audio, const AnalysisConfig& cfg) {
  if (static_cast<int>(audio.size()) != cfg.frame_samples())
    throw std::runtime_error("window_frames: expected exactly " +
                             std::to_string(cfg.frame_samples()) + " samples, got " +
                             std::to_string(audio.size()));
  std::vector<std::span<const double>> out;
  const int n = cfg.windows_per_frame();
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(audio.subspan(static_cast<std::size_t>(i) * cfg.hop,
                                static_cast<std::size_t>(cfg.window)));
  return out;
}

// ---------------------------------------------------------------------------
// Time-domain descriptors

inline double rms(std::span<const double> w) {
  if (w.empty()) throw std::runtime_error("rms: empty window");
  double acc = 0.0;
  for (double x : w) acc += x * x;
  return std::sqrt(acc / static_cast<double>(w.size()));
}

/// Sign changes per sample pair; sign(x) is x >= 0, so exact zeros count
/// with the positive half-line.
inline double zcr(std::span<const double> w) {
  if (w.size() < 2) throw std::runtime_error("zcr: window too short");
  long flips = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i)
    flips += ((w[i] >= 0.0) != (w[i + 1] >= 0.0)) ? 1 : 0;
  return static_cast<double>(flips) / static_cast<double>(w.size() - 1);
}

// ---------------------------------------------------------------------------
// Spectrum

namespace detail {

/// In-place iterative radix-2 FFT.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

}  // namespace detail

/// Applies the Hann weight and zero-pads the raw window to fft_size.
inline std::vector<double> prepare_spectral_window(std::span<const double> raw,
                                                   const AnalysisConfig& cfg) {
  if (static_cast<int>(raw.size()) != cfg.window)
    throw std::runtime_error("prepare_spectral_window: wrong window length");
  static thread_local std::vector<double> hann;
  if (static_cast<int>(hann.size()) != cfg.window) hann = hann_window(cfg.window);
  std::vector<double> out(static_cast<std::size_t>(cfg.fft_size), 0.0);
  for (int i = 0; i < cfg.window; ++i)
    out[static_cast<std::size_t>(i)] = raw[static_cast<std::size_t>(i)] * hann[static_cast<std::size_t>(i)];
  return out;
}

/// One-sided magnitude and power spectra (fft_size/2 + 1 bins).
struct Spectra {
  std::vector<double> magnitude;
  std::vector<double> power;
};

inline Spectra compute_spectrum(std::span<const double> windowed,
                                const AnalysisConfig& cfg) {
  if (static_cast<int>(windowed.size()) != cfg.fft_size)
    throw std::runtime_error("compute_spectrum: buffer must be fft_size long");
  std::vector<std::complex<double>> buf(windowed.begin(), windowed.end());
  detail::fft(buf);
  Spectra s;
  const int nb = cfg.n_bins();
  s.magnitude.resize(static_cast<std::size_t>(nb));
  s.power.resize(static_cast<std::size_t>(nb));
  for (int k = 0; k < nb; ++k) {
    double re = buf[static_cast<std::size_t>(k)].real();
    double im = buf[static_cast<std::size_t>(k)].imag();
    double p = re * re + im * im;
    s.power[static_cast<std::size_t>(k)] = p;
    s.magnitude[static_cast<std::size_t>(k)] = std::sqrt(p);
  }
  return s;
}

struct SpectrumDescriptors {
  double centroid = 0.0;
  double rolloff = 0.0;
  double flatness = 1.0;
};

/// Centroid and roll-off on the magnitude spectrum, flatness on the power
/// spectrum. An all-zero spectrum maps to (0, 0, 1) by convention.
inline SpectrumDescriptors spectrum_descriptors(const Spectra& s,
                                                const AnalysisConfig& cfg) {
  SpectrumDescriptors d;
  const int nb = cfg.n_bins();
  double total_mag = 0.0;
  for (double m : s.magnitude) total_mag += m;
  if (total_mag <= 0.0) return {0.0, 0.0, 1.0};

  double weighted = 0.0;
  for (int k = 0; k < nb; ++k)
    weighted += cfg.bin_hz(k) * s.magnitude[static_cast<std::size_t>(k)];
  d.centroid = weighted / total_mag;

  const double target = cfg.rolloff_fraction * total_mag;
  double cum = 0.0;
  d.rolloff = cfg.bin_hz(nb - 1);
  for (int k = 0; k < nb; ++k) {
    cum += s.magnitude[static_cast<std::size_t>(k)];
    if (cum >= target) {
      d.rolloff = cfg.bin_hz(k);
      break;
    }
  }

  const double tiny = 1e-30;
  double log_sum = 0.0, sum = 0.0;
  for (double p : s.power) {
    double q = p < tiny ? tiny : p;
    log_sum += std::log(q);
    sum += q;
  }
  double geo = std::exp(log_sum / nb);
  d.flatness = geo / (sum / nb);
  return d;
}

inline SpectrumDescriptors spectrum_descriptors(std::span<const double> windowed,
                                                const AnalysisConfig& cfg) {
  return spectrum_descriptors(compute_spectrum(windowed, cfg), cfg);
}

// ---------------------------------------------------------------------------
// Mel filterbank + MFCC

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Precomputed triangular filterbank (HTK mel scale, unit peak) and the
/// orthonormal DCT-II rows used for the cepstrum.
class MelBank {
 public:
  explicit MelBank(const AnalysisConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int nb = cfg.n_bins();
    const double mel_max = hz_to_mel(cfg.sample_rate / 2.0);
    std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
    for (int i = 0; i < cfg.n_mels + 2; ++i)
      edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_max * i / (cfg.n_mels + 1));
    weights_.assign(static_cast<std::size_t>(cfg.n_mels) * nb, 0.0);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double lo = edges[static_cast<std::size_t>(m)];
      const double mid = edges[static_cast<std::size_t>(m) + 1];
      const double hi = edges[static_cast<std::size_t>(m) + 2];
      for (int k = 0; k < nb; ++k) {
        const double f = cfg.bin_hz(k);
        double w = 0.0;
        if (f > lo && f <= mid)
          w = (f - lo) / (mid - lo);
        else if (f > mid && f < hi)
          w = (hi - f) / (hi - mid);
        weights_[static_cast<std::size_t>(m) * nb + k] = w;
      }
    }
    dct_.assign(static_cast<std::size_t>(cfg.n_mfcc) * cfg.n_mels, 0.0);
    const double n = cfg.n_mels;
    for (int k = 0; k < cfg.n_mfcc; ++k) {
      const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
      for (int i = 0; i < cfg.n_mels; ++i)
        dct_[static_cast<std::size_t>(k) * cfg.n_mels + i] =
            scale * std::cos(M_PI * k * (2.0 * i + 1.0) / (2.0 * n));
    }
  }

  std::array<double, 13> mfcc_from_power(std::span<const double> power) const {
    const int nb = cfg_.n_bins();
    if (static_cast<int>(power.size()) != nb)
      throw std::runtime_error("mfcc_from_power: wrong spectrum size");
    std::vector<double> log_mel(static_cast<std::size_t>(cfg_.n_mels));
    for (int m = 0; m < cfg_.n_mels; ++m) {
      double e = 0.0;
      const double* row = &weights_[static_cast<std::size_t>(m) * nb];
      for (int k = 0; k < nb; ++k) e += row[k] * power[static_cast<std::size_t>(k)];
      log_mel[static_cast<std::size_t>(m)] = std::log(e < cfg_.log_floor ? cfg_.log_floor : e);
    }
    std::array<double, 13> out{};
    for (int k = 0; k < cfg_.n_mfcc; ++k) {
      double acc = 0.0;
      const double* row = &dct_[static_cast<std::size_t>(k) * cfg_.n_mels];
      for (int i = 0; i < cfg_.n_mels; ++i) acc += row[i] * log_mel[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(k)] = acc;
    }
    return out;
  }

  const AnalysisConfig& config() const { return cfg_; }

 private:
  AnalysisConfig cfg_;
  std::vector<double> weights_;  // n_mels x n_bins
  std::vector<double> dct_;      // n_mfcc x n_mels
};

/// MFCC of one Hann-windowed, zero-padded analysis window.
inline std::array<double, 13> mfcc(std::span<const double> windowed, const MelBank& bank) {
  Spectra s = compute_spectrum(windowed, bank.config());
  return bank.mfcc_from_power(s.power);
}

// ---------------------------------------------------------------------------
// Pitch (autocorrelation)

/// Autocorrelation peak search over lags covering [pitch_min_hz,
/// pitch_max_hz]; a window whose normalized peak falls below the voicing
/// threshold is unvoiced and reports 0.
inline double pitch(std::span<const double> w, const AnalysisConfig& cfg) {
  const int n = static_cast<int>(w.size());
  if (n != cfg.window) throw std::runtime_error("pitch: wrong window length");
  double r0 = 0.0;
  for (double x : w) r0 += x * x;
  if (r0 <= 0.0) return 0.0;
  const int lag_min = static_cast<int>(std::ceil(cfg.sample_rate / cfg.pitch_max_hz));
  const int lag_max =
      std::min(static_cast<int>(std::floor(cfg.sample_rate / cfg.pitch_min_hz)), n - 1);
  double best = 0.0;
  int best_lag = 0;
  for (int lag = lag_min; lag <= lag_max; ++lag) {
    double r = 0.0;
    for (int t = 0; t + lag < n; ++t) r += w[static_cast<std::size_t>(t)] * w[static_cast<std::size_t>(t + lag)];
    if (r > best) {
      best = r;
      best_lag = lag;
    }
  }
  if (best_lag == 0 || best / r0 < cfg.voicing_threshold) return 0.0;
  return static_cast<double>(cfg.sample_rate) / best_lag;
}

// ---------------------------------------------------------------------------
// Per-second aggregation

/// Mean and population std of each descriptor over the frame's windows,
/// interleaved mean-first in the order [mfcc0..mfcc12, rms, zcr, centroid,
/// rolloff, flatness, pitch] -> 38 values.
inline std::array<double, kFeatureDim> aggregate_frame(
    std::span<const DescriptorFrame> frames) {
  if (frames.size() < 2)
    throw std::runtime_error("aggregate_frame: need at least 2 windows");
  std::array<double, kNumDescriptors> sum{}, sum2{};
  auto values = [](const DescriptorFrame& d) {
    std::array<double, kNumDescriptors> v{};
    for (int i = 0; i < 13; ++i) v[static_cast<std::size_t>(i)] = d.mfcc[static_cast<std::size_t>(i)];
    v[13] = d.rms;
    v[14] = d.zcr;
    v[15] = d.centroid;
    v[16] = d.rolloff;
    v[17] = d.flatness;
    v[18] = d.pitch;
    return v;
  };
  for (const auto& f : frames) {
    auto v = values(f);
    for (int i = 0; i < kNumDescriptors; ++i) {
      sum[static_cast<std::size_t>(i)] += v[static_cast<std::size_t>(i)];
      sum2[static_cast<std::size_t>(i)] += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
    }
  }
  const double n = static_cast<double>(frames.size());
  std::array<double, kFeatureDim> out{};
  for (int i = 0; i < kNumDescriptors; ++i) {
    const double mean = sum[static_cast<std::size_t>(i)] / n;
    double var = sum2[static_cast<std::size_t>(i)] / n - mean * mean;
    if (var < 0) var = 0;  // rounding guard
    out[static_cast<std::size_t>(2 * i)] = mean;
    out[static_cast<std::size_t>(2 * i + 1)] = std::sqrt(var);
  }
  return out;
}

/// Full descriptor set for one raw analysis window.
inline DescriptorFrame analyze_window(std::span<const double> raw, const MelBank& bank) {
  const AnalysisConfig& cfg = bank.config();
  DescriptorFrame d;
  d.rms = rms(raw);
  d.zcr = zcr(raw);
  d.pitch = pitch(raw, cfg);
  std::vector<double> prepared = prepare_spectral_window(raw, cfg);
  Spectra s = compute_spectrum(prepared, cfg);
  SpectrumDescriptors sd = spectrum_descriptors(s, cfg);
  d.centroid = sd.centroid;
  d.rolloff = sd.rolloff;
  d.flatness = sd.flatness;
  d.mfcc = bank.mfcc_from_power(s.power);
  return d;
}

/// 38-dim feature vector of one 1-second frame.
inline std::array<double, kFeatureDim> extract_second(std::span<const double> audio,
                                                      const MelBank& bank) {
  auto windows = window_frames(audio, bank.config());
  std::vector<DescriptorFrame> ds;
  ds.reserve(windows.size());
  for (auto w : windows) ds.push_back(analyze_window(w, bank));
  return aggregate_frame(ds);
}

/// Slices a recording into whole 1-second frames (a trailing partial second
/// is dropped) and extracts each.
inline std::vector<std::array<double, kFeatureDim>> extract_recording(
    std::span<const double> audio, const MelBank& bank) {
  const int fs = bank.config().frame_samples();
  std::vector<std::array<double, kFeatureDim>> out;
  for (std::size_t off = 0; off + static_cast<std::size_t>(fs) <= audio.size();
       off += static_cast<std::size_t>(fs))
    out.push_back(extract_second(audio.subspan(off, static_cast<std::size_t>(fs)), bank));
  return out;
}

}  // namespace despk
