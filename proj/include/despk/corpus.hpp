#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "despk/io_util.hpp"
#include "despk/rng.hpp"

namespace despk {

inline constexpr int kFeatureDim = 38;
inline constexpr int kSampleRate = 16000;
inline constexpr double kSeverityMax = 20.0;

struct RecordingRef {
  std::string recording_id;
  std::vector<std::uint32_t> frames;  // frame indices local to this recording
};

struct SpeakerRecord {
  std::string speaker_id;
  bool victim = false;
  std::optional<double> severity;  // present iff victim, in [0, 20]
  std::vector<RecordingRef> recordings;
};

/// One 1-second frame: the 38-dim descriptor vector plus its provenance.
struct FrameFeatures {
  std::string speaker_id;
  std::string recording_id;
  std::uint32_t frame_index = 0;
  int label = 0;  // 1 = victim
  std::optional<double> severity;
  std::array<double, kFeatureDim> features{};
};

using FeatureSet = std::vector<FrameFeatures>;

inline bool valid_id(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
              (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '-';
    if (!ok) return false;
  }
  return true;
}

struct CorpusManifest {
  std::vector<SpeakerRecord> speakers;
  int sample_rate = kSampleRate;
  double frame_seconds = 1.0;

  int n_victims() const {
    int n = 0;
    for (const auto& s : speakers) n += s.victim ? 1 : 0;
    return n;
  }
  int n_non_victims() const { return static_cast<int>(speakers.size()) - n_victims(); }

  std::size_t n_frames() const {
    std::size_t n = 0;
    for (const auto& s : speakers)
      for (const auto& r : s.recordings) n += r.frames.size();
    return n;
  }

  const SpeakerRecord* find_speaker(std::string_view id) const {
    for (const auto& s : speakers)
      if (s.speaker_id == id) return &s;
    return nullptr;
  }

  void validate() const {
    if (sample_rate != kSampleRate)
      throw std::runtime_error("manifest: sample_rate must be 16000, got " +
                               std::to_string(sample_rate));
    if (!(frame_seconds > 0))
      throw std::runtime_error("manifest: frame_seconds must be positive");
    std::set<std::string> ids;
    for (const auto& s : speakers) {
      if (!valid_id(s.speaker_id))
        throw std::runtime_error("manifest: invalid speaker_id '" + s.speaker_id + "'");
      if (!ids.insert(s.speaker_id).second)
        throw std::runtime_error("manifest: duplicate speaker_id '" + s.speaker_id + "'");
      if (s.victim != s.severity.has_value())
        throw std::runtime_error("manifest: speaker '" + s.speaker_id +
                                 "': severity must be present iff condition is victim");
      if (s.severity && !(*s.severity >= 0.0 && *s.severity <= kSeverityMax))
        throw std::runtime_error("manifest: speaker '" + s.speaker_id +
                                 "': severity out of [0, 20]");
      std::set<std::string> recs;
      for (const auto& r : s.recordings) {
        if (!valid_id(r.recording_id))
          throw std::runtime_error("manifest: invalid recording_id '" + r.recording_id + "'");
        if (!recs.insert(r.recording_id).second)
          throw std::runtime_error("manifest: speaker '" + s.speaker_id +
                                   "': duplicate recording_id '" + r.recording_id + "'");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Per-speaker z-score normalization (population std, epsilon guard)

struct ZScoreStats {
  double mean = 0.0;
  double stddev = 0.0;
  bool constant = false;  // std below epsilon; output was forced to zero
};

/// Normalizes one speaker's samples in place to mean 0 / variance 1 using
/// the population (1/N) standard deviation. A constant signal (std below
/// 1e-12) is mapped to all zeros and flagged so the caller can warn.
inline ZScoreStats zscore_per_speaker(std::span<double> samples) {
  if (samples.empty())
    throw std::runtime_error("zscore_per_speaker: need at least one sample");
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : samples) var += (x - mean) * (x - mean);
  var /= n;
  const double sd = std::sqrt(var);
  ZScoreStats st{mean, sd, false};
  if (sd < 1e-12) {
    st.constant = true;
    for (double& x : samples) x = 0.0;
    return st;
  }
  for (double& x : samples) x = (x - mean) / sd;
  return st;
}

// ---------------------------------------------------------------------------
// GBVV-style segment subsampling: drop one segment per block of four

/// Returns the sorted indices retained when removing one uniformly chosen
/// element from every consecutive block of 4; a trailing block shorter than
/// 4 is kept whole. Deterministic for a fixed seed.
inline std::vector<std::size_t> subsample_keep_indices(std::size_t n,
                                                       std::uint64_t seed) {
  if (n == 0)
    throw std::runtime_error("subsample_victim_segments: empty segment list");
  SplitMix64 rng(seed);
  std::vector<std::size_t> keep;
  keep.reserve(n - n / 4);
  std::size_t full_blocks = n / 4;
  for (std::size_t b = 0; b < full_blocks; ++b) {
    std::size_t drop = 4 * b + static_cast<std::size_t>(rng.below(4));
    for (std::size_t i = 4 * b; i < 4 * b + 4; ++i)
      if (i != drop) keep.push_back(i);
  }
  for (std::size_t i = 4 * full_blocks; i < n; ++i) keep.push_back(i);
  return keep;
}

template <class T>
std::vector<T> subsample_victim_segments(const std::vector<T>& segments,
                                         std::uint64_t seed) {
  std::vector<T> out;
  auto keep = subsample_keep_indices(segments.size(), seed);
  out.reserve(keep.size());
  for (std::size_t i : keep) out.push_back(segments[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Feature store (text table; see README for the exact schema)

namespace detail {

inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline double parse_double(std::string_view s, std::size_t line, const char* what) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw std::runtime_error("features line " + std::to_string(line) +
                             ": bad " + std::string(what) + " '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

inline std::string feature_csv_header() {
  std::string h = "speaker_id,recording_id,frame_index,label,severity";
  for (int i = 0; i < kFeatureDim; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), ",f%02d", i);
    h += buf;
  }
  return h;
}

inline std::string features_to_csv(const FeatureSet& set) {
  std::string out = feature_csv_header();
  out += '\n';
  for (const auto& f : set) {
    out += f.speaker_id;
    out += ',';
    out += f.recording_id;
    out += ',';
    out += std::to_string(f.frame_index);
    out += ',';
    out += std::to_string(f.label);
    out += ',';
    if (f.severity) out += detail::format_g9(*f.severity);
    for (double v : f.features) {
      out += ',';
      out += detail::format_g9(v);
    }
    out += '\n';
  }
  return out;
}

/// Parses the feature table, rejecting wrong column counts, non-finite
/// values and duplicate (speaker, recording, frame_index) keys; every error
/// names the offending 1-based line.
inline FeatureSet parse_features_csv(std::string_view text) {
  FeatureSet set;
  std::set<std::string> keys;
  std::size_t line_no = 0;
  std::size_t start = 0;
  const std::string expected_header = feature_csv_header();
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != expected_header)
        throw std::runtime_error("features line 1: unexpected header");
      continue;
    }
    auto cols = detail::split_csv(line);
    if (cols.size() != 5 + kFeatureDim)
      throw std::runtime_error("features line " + std::to_string(line_no) + ": expected " +
                               std::to_string(5 + kFeatureDim) + " columns, got " +
                               std::to_string(cols.size()));
    FrameFeatures f;
    f.speaker_id = std::string(cols[0]);
    f.recording_id = std::string(cols[1]);
    if (!valid_id(f.speaker_id) || !valid_id(f.recording_id))
      throw std::runtime_error("features line " + std::to_string(line_no) + ": bad id");
    f.frame_index = static_cast<std::uint32_t>(
        detail::parse_double(cols[2], line_no, "frame_index"));
    double label = detail::parse_double(cols[3], line_no, "label");
    if (label != 0.0 && label != 1.0)
      throw std::runtime_error("features line " + std::to_string(line_no) +
                               ": label must be 0 or 1");
    f.label = static_cast<int>(label);
    if (!cols[4].empty())
      f.severity = detail::parse_double(cols[4], line_no, "severity");
    for (int i = 0; i < kFeatureDim; ++i) {
      double v = detail::parse_double(cols[5 + i], line_no, "feature");
      if (!std::isfinite(v))
        throw std::runtime_error("features line " + std::to_string(line_no) +
                                 ": non-finite feature f" + std::to_string(i));
      f.features[static_cast<std::size_t>(i)] = v;
    }
    std::string key = f.speaker_id + "," + f.recording_id + "," + std::to_string(f.frame_index);
    if (!keys.insert(key).second)
      throw std::runtime_error("features line " + std::to_string(line_no) +
                               ": duplicate frame key (" + key + ")");
    set.push_back(std::move(f));
  }
  return set;
}

inline void save_features(const FeatureSet& set, const std::string& path) {
  for (const auto& f : set)
    for (double v : f.features)
      if (!std::isfinite(v))
        throw std::runtime_error("save_features: non-finite feature for speaker " +
                                 f.speaker_id);
  write_text_file(path, features_to_csv(set));
}

inline FeatureSet load_features(const std::string& path) {
  return parse_features_csv(read_text_file(path));
}

}  // namespace despk
