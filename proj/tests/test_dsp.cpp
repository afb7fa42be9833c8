#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "despk/dsp.hpp"
#include "despk/rng.hpp"
#include "despk/wav.hpp"

using namespace despk;

namespace {

std::vector<double> tone(double hz, double amp, int n, double phase = 0.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t)
    v[static_cast<std::size_t>(t)] = amp * std::sin(2.0 * M_PI * hz * t / 16000.0 + phase);
  return v;
}

// ---------------------------------------------------------------------------
// Independent MFCC oracle: direct O(N^2) DFT, freshly coded HTK mel weights
// and DCT-II normalization. Shares no code with the implementation.

std::array<double, 13> oracle_mfcc(std::span<const double> raw, const AnalysisConfig& cfg) {
  const int N = cfg.fft_size;
  std::vector<double> x(static_cast<std::size_t>(N), 0.0);
  for (int i = 0; i < cfg.window; ++i) {
    double h = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.window);
    x[static_cast<std::size_t>(i)] = raw[static_cast<std::size_t>(i)] * h;
  }
  const int nb = N / 2 + 1;
  std::vector<double> power(static_cast<std::size_t>(nb));
  for (int k = 0; k < nb; ++k) {
    double re = 0.0, im = 0.0;
    for (int t = 0; t < N; ++t) {
      double ang = -2.0 * M_PI * k * t / N;
      re += x[static_cast<std::size_t>(t)] * std::cos(ang);
      im += x[static_cast<std::size_t>(t)] * std::sin(ang);
    }
    power[static_cast<std::size_t>(k)] = re * re + im * im;
  }
  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto imel = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double top = mel(8000.0);
  std::vector<double> log_mel(40);
  for (int b = 0; b < 40; ++b) {
    double lo = imel(top * b / 41.0);
    double mid = imel(top * (b + 1) / 41.0);
    double hi = imel(top * (b + 2) / 41.0);
    double acc = 0.0;
    for (int k = 0; k < nb; ++k) {
      double f = 16000.0 * k / N;
      double w = 0.0;
      if (f > lo && f <= mid)
        w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi)
        w = (hi - f) / (hi - mid);
      acc += w * power[static_cast<std::size_t>(k)];
    }
    log_mel[static_cast<std::size_t>(b)] = std::log(std::max(acc, 1e-10));
  }
  std::array<double, 13> out{};
  for (int k = 0; k < 13; ++k) {
    double acc = 0.0;
    for (int b = 0; b < 40; ++b)
      acc += log_mel[static_cast<std::size_t>(b)] *
             std::cos(M_PI * k * (2.0 * b + 1.0) / 80.0);
    out[static_cast<std::size_t>(k)] = acc * (k == 0 ? std::sqrt(1.0 / 40.0) : std::sqrt(2.0 / 40.0));
  }
  return out;
}

}  // namespace

TEST_CASE("window_frames: 1 second yields 99 windows with the right offsets") {
  AnalysisConfig cfg;
  std::vector<double> audio(16000, 0.0);
  audio[0] = 1.0;
  audio[319] = 2.0;
  audio[320] = 3.0;
  auto windows = window_frames(audio, cfg);
  REQUIRE(windows.size() == 99);
  CHECK(windows[0][0] == 1.0);
  CHECK(windows[0][319] == 2.0);  // window 0 covers [0, 320)
  CHECK(windows[1][160] == 3.0);  // window 1 starts at 160
  for (auto w : windows) CHECK(w.size() == 320);

  std::vector<double> zeros(16000, 0.0);
  for (auto w : window_frames(zeros, cfg))
    for (double x : w) CHECK(x == 0.0);

  std::vector<double> wrong(15999, 0.0);
  CHECK_THROWS(window_frames(wrong, cfg));
}

TEST_CASE("rms: zeros, constants and sines") {
  std::vector<double> zeros(320, 0.0);
  CHECK(rms(zeros) == 0.0);
  std::vector<double> c(320, -0.25);
  CHECK(rms(c) == Catch::Approx(0.25));
  // amplitude A over an integer number of periods -> A/sqrt(2)
  auto s = tone(100.0, 0.5, 320);
  CHECK(std::fabs(rms(s) - 0.5 / std::sqrt(2.0)) < 1e-3);
}

TEST_CASE("zcr: constants, alternation, counted sign flips") {
  std::vector<double> c(320, 0.7);
  CHECK(zcr(c) == 0.0);
  std::vector<double> alt(320);
  for (int i = 0; i < 320; ++i) alt[static_cast<std::size_t>(i)] = i % 2 ? -1.0 : 1.0;
  CHECK(zcr(alt) == 1.0);
  // 100 Hz with a quarter-period phase puts 4 crossings strictly inside the
  // window: zeros near samples 40, 120, 200, 280.
  std::vector<double> cosine(320);
  for (int t = 0; t < 320; ++t)
    cosine[static_cast<std::size_t>(t)] = std::cos(2.0 * M_PI * 100.0 * t / 16000.0);
  CHECK(zcr(cosine) == Catch::Approx(4.0 / 319.0));
}

TEST_CASE("spectrum descriptors: tone centroid within one bin") {
  AnalysisConfig cfg;
  auto s = tone(1000.0, 0.8, 320);
  auto prepared = prepare_spectral_window(s, cfg);
  auto d = spectrum_descriptors(prepared, cfg);
  CHECK(std::fabs(d.centroid - 1000.0) < 16000.0 / 512.0);  // +- 1 bin
  CHECK(d.rolloff <= 8000.0);
  CHECK(d.flatness < 0.1);  // pure tone is maximally peaky
}

TEST_CASE("spectrum descriptors: averaged white-noise spectrum is flat") {
  AnalysisConfig cfg;
  SplitMix64 rng(2024);
  const int trials = 200;
  Spectra avg;
  avg.power.assign(static_cast<std::size_t>(cfg.n_bins()), 0.0);
  for (int i = 0; i < trials; ++i) {
    std::vector<double> noise(320);
    for (double& x : noise) x = rng.normal();
    auto prepared = prepare_spectral_window(noise, cfg);
    Spectra s = compute_spectrum(prepared, cfg);
    for (std::size_t k = 0; k < s.power.size(); ++k) avg.power[k] += s.power[k] / trials;
  }
  avg.magnitude.resize(avg.power.size());
  for (std::size_t k = 0; k < avg.power.size(); ++k)
    avg.magnitude[k] = std::sqrt(avg.power[k]);
  auto d = spectrum_descriptors(avg, cfg);
  CHECK(d.flatness > 0.9);
  // centroid of a flat magnitude spectrum sits near mid-band
  CHECK(d.centroid > 2000.0);
}

TEST_CASE("spectrum descriptors: silence convention (0, 0, 1)") {
  AnalysisConfig cfg;
  std::vector<double> zeros(512, 0.0);
  auto d = spectrum_descriptors(zeros, cfg);
  CHECK(d.centroid == 0.0);
  CHECK(d.rolloff == 0.0);
  CHECK(d.flatness == 1.0);
}

TEST_CASE("mfcc: positive scaling shifts only coefficient zero") {
  AnalysisConfig cfg;
  MelBank bank(cfg);
  SplitMix64 rng(5);
  std::vector<double> raw(320);
  for (double& x : raw) x = rng.normal() + 0.2;
  auto p1 = prepare_spectral_window(raw, cfg);
  auto c1 = mfcc(p1, bank);
  for (double& x : raw) x *= 3.7;
  auto p2 = prepare_spectral_window(raw, cfg);
  auto c2 = mfcc(p2, bank);
  for (int k = 1; k < 13; ++k)
    CHECK(std::fabs(c1[static_cast<std::size_t>(k)] - c2[static_cast<std::size_t>(k)]) < 1e-6);
  // c0 shifts by sqrt(40) * 2 ln(alpha)
  CHECK(c2[0] - c1[0] == Catch::Approx(std::sqrt(40.0) * 2.0 * std::log(3.7)).epsilon(1e-6));
}

TEST_CASE("mfcc: silence hits the log floor exactly") {
  AnalysisConfig cfg;
  MelBank bank(cfg);
  std::vector<double> zeros(512, 0.0);
  auto c = mfcc(zeros, bank);
  CHECK(c[0] == Catch::Approx(std::sqrt(40.0) * std::log(1e-10)).epsilon(1e-12));
  for (int k = 1; k < 13; ++k) CHECK(std::fabs(c[static_cast<std::size_t>(k)]) < 1e-9);
}

TEST_CASE("mfcc: dual-implementation oracle agrees to 1e-6") {
  AnalysisConfig cfg;
  MelBank bank(cfg);
  SplitMix64 rng(77);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> raw(320);
    for (double& x : raw) x = rng.normal() * 0.3;
    auto prepared = prepare_spectral_window(raw, cfg);
    auto ours = mfcc(prepared, bank);
    auto ref = oracle_mfcc(raw, cfg);
    for (int k = 0; k < 13; ++k) {
      INFO("trial " << trial << " coefficient " << k);
      CHECK(std::fabs(ours[static_cast<std::size_t>(k)] - ref[static_cast<std::size_t>(k)]) < 1e-6);
    }
  }
}

TEST_CASE("pitch: known tone, noise, silence") {
  AnalysisConfig cfg;
  auto s = tone(200.0, 0.6, 320);
  CHECK(std::fabs(pitch(s, cfg) - 200.0) < 5.0);

  SplitMix64 rng(31);
  int voiced = 0;
  const int trials = 100;
  for (int i = 0; i < trials; ++i) {
    std::vector<double> noise(320);
    for (double& x : noise) x = rng.normal();
    if (pitch(noise, cfg) != 0.0) ++voiced;
  }
  CHECK(voiced <= trials / 20);  // unvoiced in >= 95% of trials

  std::vector<double> zeros(320, 0.0);
  CHECK(pitch(zeros, cfg) == 0.0);
}

TEST_CASE("aggregate_frame: ordering, stds, hand oracle") {
  DescriptorFrame a, b, c;
  a.rms = 1.0;
  b.rms = 2.0;
  c.rms = 3.0;
  a.zcr = b.zcr = c.zcr = 0.25;
  a.mfcc[0] = -1.0;
  b.mfcc[0] = 1.0;
  c.mfcc[0] = 3.0;
  a.pitch = 100.0;
  b.pitch = 0.0;
  c.pitch = 200.0;
  std::vector<DescriptorFrame> frames = {a, b, c};
  auto v = aggregate_frame(frames);
  REQUIRE(v.size() == 38);
  // mfcc0 mean/std at slots 0/1
  CHECK(v[0] == Catch::Approx(1.0));
  CHECK(v[1] == Catch::Approx(std::sqrt(8.0 / 3.0)));
  // rms occupies slots 26/27
  CHECK(v[26] == Catch::Approx(2.0));
  CHECK(v[27] == Catch::Approx(std::sqrt(2.0 / 3.0)));
  // zcr slots 28/29: identical values have zero std
  CHECK(v[28] == Catch::Approx(0.25));
  CHECK(v[29] == Catch::Approx(0.0).margin(1e-15));
  // pitch slots 36/37, unvoiced zeros included in the statistics
  CHECK(v[36] == Catch::Approx(100.0));
  CHECK(v[37] == Catch::Approx(std::sqrt(20000.0 / 3.0)));

  std::vector<DescriptorFrame> identical = {a, a, a};
  auto u = aggregate_frame(identical);
  for (int i = 1; i < 38; i += 2) CHECK(u[static_cast<std::size_t>(i)] == 0.0);

  std::vector<DescriptorFrame> one = {a};
  CHECK_THROWS(aggregate_frame(one));
}

TEST_CASE("extract_second: deterministic, finite, time-shift robust") {
  AnalysisConfig cfg;
  MelBank bank(cfg);
  SplitMix64 rng(12);
  std::vector<double> audio(16000);
  for (int t = 0; t < 16000; ++t)
    audio[static_cast<std::size_t>(t)] =
        0.4 * std::sin(2.0 * M_PI * 200.0 * t / 16000.0) + 0.05 * rng.normal();

  auto f1 = extract_second(audio, bank);
  auto f2 = extract_second(audio, bank);
  for (int i = 0; i < 38; ++i)
    CHECK(f1[static_cast<std::size_t>(i)] == f2[static_cast<std::size_t>(i)]);  // bitwise
  for (double x : f1) CHECK(std::isfinite(x));

  // pure periodic signal shifted by one full period: descriptor means move
  // by less than 1e-6 (phase offset keeps zeros off the sample grid, where
  // the sign of +-1e-16 sine noise is arbitrary)
  auto p1 = tone(200.0, 0.4, 16000, 0.3);
  std::vector<double> p2(16000);
  for (int t = 0; t < 16000; ++t)
    p2[static_cast<std::size_t>(t)] =
        0.4 * std::sin(2.0 * M_PI * 200.0 * (t + 80) / 16000.0 + 0.3);
  auto g1 = extract_second(p1, bank);
  auto g2 = extract_second(p2, bank);
  for (int i = 0; i < 38; i += 2) {
    INFO("descriptor mean slot " << i);
    CHECK(std::fabs(g1[static_cast<std::size_t>(i)] - g2[static_cast<std::size_t>(i)]) < 1e-6);
  }
}

TEST_CASE("amplitude invariance set") {
  AnalysisConfig cfg;
  MelBank bank(cfg);
  SplitMix64 rng(8);
  std::vector<double> audio(16000);
  for (int t = 0; t < 16000; ++t)
    audio[static_cast<std::size_t>(t)] =
        0.3 * std::sin(2.0 * M_PI * 310.0 * t / 16000.0) + 0.1 * rng.normal();
  auto f1 = extract_second(audio, bank);
  for (double& x : audio) x *= 2.5;
  auto f2 = extract_second(audio, bank);

  auto close = [&](int slot) {
    return std::fabs(f1[static_cast<std::size_t>(slot)] - f2[static_cast<std::size_t>(slot)]) < 1e-6;
  };
  // mfcc[1..12] mean and std
  for (int k = 1; k < 13; ++k) {
    CHECK(close(2 * k));
    CHECK(close(2 * k + 1));
  }
  CHECK_FALSE(close(0));   // mfcc0 mean shifts with log amplitude
  CHECK_FALSE(close(26));  // rms mean scales
  for (int slot : {28, 29, 30, 31, 32, 33, 34, 35, 36, 37}) CHECK(close(slot));
}

TEST_CASE("extract_recording drops the trailing partial second") {
  AnalysisConfig cfg;
  MelBank bank(cfg);
  std::vector<double> audio(16000 * 3 + 8000, 0.01);
  auto frames = extract_recording(audio, bank);
  CHECK(frames.size() == 3);
}

TEST_CASE("wav round trip on the int16 grid") {
  namespace fs = std::filesystem;
  std::vector<double> samples(1600);
  SplitMix64 rng(3);
  for (double& x : samples)
    x = static_cast<double>(static_cast<int>(rng.below(65536)) - 32768) / 32768.0;
  auto path = (fs::temp_directory_path() / "despk_test.wav").string();
  write_wav(path, samples, 16000);
  auto wav = read_wav(path);
  CHECK(wav.sample_rate == 16000);
  REQUIRE(wav.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    CHECK(wav.samples[i] == Catch::Approx(samples[i]).margin(1.0 / 32768.0));
  fs::remove(path);
}

TEST_CASE("wav reader rejects non-wav and stereo input") {
  namespace fs = std::filesystem;
  auto path = (fs::temp_directory_path() / "despk_bogus.wav").string();
  write_text_file(path, "definitely not RIFF data");
  CHECK_THROWS(read_wav(path));
  fs::remove(path);
}
