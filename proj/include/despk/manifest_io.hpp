#pragma once

#include <string>

#include <json.hpp>

#include "despk/corpus.hpp"
#include "despk/io_util.hpp"

namespace despk {

// nlohmann::json orders object keys alphabetically, which makes the
// serialized manifest reproducible byte for byte.

inline std::string manifest_to_json(const CorpusManifest& m) {
  nlohmann::json j;
  j["sample_rate"] = m.sample_rate;
  j["frame_seconds"] = m.frame_seconds;
  j["n_victims"] = m.n_victims();
  j["n_non_victims"] = m.n_non_victims();
  auto& speakers = j["speakers"];
  speakers = nlohmann::json::array();
  for (const auto& s : m.speakers) {
    nlohmann::json js;
    js["speaker_id"] = s.speaker_id;
    js["condition"] = s.victim ? "victim" : "non_victim";
    if (s.severity) js["severity"] = *s.severity;
    auto& recs = js["recordings"];
    recs = nlohmann::json::array();
    for (const auto& r : s.recordings) {
      nlohmann::json jr;
      jr["recording_id"] = r.recording_id;
      jr["frames"] = r.frames;
      recs.push_back(std::move(jr));
    }
    speakers.push_back(std::move(js));
  }
  return j.dump(2) + "\n";
}

inline CorpusManifest manifest_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("manifest: invalid JSON: ") + e.what());
  }
  CorpusManifest m;
  try {
    m.sample_rate = j.at("sample_rate").get<int>();
    m.frame_seconds = j.at("frame_seconds").get<double>();
    for (const auto& js : j.at("speakers")) {
      SpeakerRecord s;
      s.speaker_id = js.at("speaker_id").get<std::string>();
      std::string cond = js.at("condition").get<std::string>();
      if (cond != "victim" && cond != "non_victim")
        throw std::runtime_error("manifest: unknown condition '" + cond + "'");
      s.victim = cond == "victim";
      if (js.contains("severity")) s.severity = js.at("severity").get<double>();
      for (const auto& jr : js.at("recordings")) {
        RecordingRef r;
        r.recording_id = jr.at("recording_id").get<std::string>();
        r.frames = jr.at("frames").get<std::vector<std::uint32_t>>();
        s.recordings.push_back(std::move(r));
      }
      m.speakers.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("manifest: missing or mistyped field: ") + e.what());
  }
  m.validate();
  return m;
}

inline void save_manifest(const CorpusManifest& m, const std::string& path) {
  m.validate();
  write_text_file(path, manifest_to_json(m));
}

inline CorpusManifest load_manifest(const std::string& path) {
  return manifest_from_json(read_text_file(path));
}

/// Cross-checks that the feature store and the manifest describe the same
/// frames: identical keys, one recording per frame, matching labels.
inline void validate_manifest_features(const CorpusManifest& m, const FeatureSet& set) {
  std::set<std::string> manifest_keys;
  for (const auto& s : m.speakers)
    for (const auto& r : s.recordings)
      for (std::uint32_t fi : r.frames) {
        std::string key = s.speaker_id + "," + r.recording_id + "," + std::to_string(fi);
        if (!manifest_keys.insert(key).second)
          throw std::runtime_error("manifest: frame listed twice: " + key);
      }
  if (manifest_keys.size() != set.size())
    throw std::runtime_error("manifest lists " + std::to_string(manifest_keys.size()) +
                             " frames but feature store has " + std::to_string(set.size()));
  for (const auto& f : set) {
    std::string key = f.speaker_id + "," + f.recording_id + "," + std::to_string(f.frame_index);
    if (!manifest_keys.count(key))
      throw std::runtime_error("feature store frame missing from manifest: " + key);
    const SpeakerRecord* s = m.find_speaker(f.speaker_id);
    if (!s || (s->victim ? 1 : 0) != f.label)
      throw std::runtime_error("feature store label disagrees with manifest for " + key);
  }
}

}  // namespace despk
