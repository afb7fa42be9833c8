#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "despk/corpus.hpp"
#include "despk/stats.hpp"

namespace despk {

struct ConfusionMatrix2x2 {
  long tp = 0, fn = 0, fp = 0, tn = 0;  // positive class = victim

  void add(int pred, int label) {
    if (label == 1)
      pred == 1 ? ++tp : ++fn;
    else
      pred == 1 ? ++fp : ++tn;
  }
  long total() const { return tp + fn + fp + tn; }
  ConfusionMatrix2x2& operator+=(const ConfusionMatrix2x2& o) {
    tp += o.tp;
    fn += o.fn;
    fp += o.fp;
    tn += o.tn;
    return *this;
  }
};

/// Percentages. A metric whose denominator is zero is reported as absent
/// ("n/a" in reports), never silently as 0.
struct MetricsBundle {
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

inline MetricsBundle metrics(const ConfusionMatrix2x2& cm) {
  MetricsBundle m;
  const double tp = static_cast<double>(cm.tp);
  if (cm.total() > 0)
    m.accuracy = 100.0 * (tp + cm.tn) / static_cast<double>(cm.total());
  if (cm.tp + cm.fp > 0) m.precision = 100.0 * tp / static_cast<double>(cm.tp + cm.fp);
  if (cm.tp + cm.fn > 0) m.recall = 100.0 * tp / static_cast<double>(cm.tp + cm.fn);
  if (m.precision && m.recall && *m.precision + *m.recall > 0)
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  return m;
}

struct FramePrediction {
  double p_victim = 0.0;
  int pred = 0;
};

/// Majority vote over one user's frame predictions. A tie in vote counts is
/// broken toward the class with the larger summed probability mass, which is
/// deterministic and permutation-invariant.
inline int majority_vote(std::span<const FramePrediction> frames) {
  if (frames.empty()) throw std::runtime_error("majority_vote: no frame predictions");
  long votes1 = 0;
  double mass1 = 0.0;
  for (const auto& f : frames) {
    votes1 += f.pred == 1 ? 1 : 0;
    mass1 += f.p_victim;
  }
  long votes0 = static_cast<long>(frames.size()) - votes1;
  if (votes1 != votes0) return votes1 > votes0 ? 1 : 0;
  double mass0 = static_cast<double>(frames.size()) - mass1;
  return mass1 >= mass0 ? 1 : 0;
}

/// Mean and population std of per-fold accuracies.
inline MeanStd loso_aggregate(std::span<const double> fold_accuracies) {
  if (fold_accuracies.size() < 2)
    throw std::runtime_error("loso_aggregate: need >= 2 folds");
  return mean_and_population_std(fold_accuracies);
}

// ---------------------------------------------------------------------------
// Severity (EGS-R style) correlation analysis

struct VictimOutcome {
  double severity = 0.0;
  bool correct = false;
};

struct SeverityReport {
  std::size_t n_correct = 0;
  std::size_t n_misclassified = 0;
  std::optional<double> mean_correct;
  std::optional<double> mean_misclassified;
  std::optional<double> scaled_correct;        // mean / 20 * 100, exact
  std::optional<double> scaled_misclassified;
  std::optional<TTestResult> test;  // absent when a group has < 2 members
};

inline SeverityReport severity_analysis(std::span<const VictimOutcome> outcomes,
                                        TTestKind kind = TTestKind::pooled) {
  SeverityReport r;
  std::vector<double> correct, mis;
  for (const auto& o : outcomes) (o.correct ? correct : mis).push_back(o.severity);
  r.n_correct = correct.size();
  r.n_misclassified = mis.size();
  auto mean_of = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    return m / static_cast<double>(v.size());
  };
  if (!correct.empty()) {
    r.mean_correct = mean_of(correct);
    r.scaled_correct = *r.mean_correct / kSeverityMax * 100.0;
  }
  if (!mis.empty()) {
    r.mean_misclassified = mean_of(mis);
    r.scaled_misclassified = *r.mean_misclassified / kSeverityMax * 100.0;
  }
  if (correct.size() >= 2 && mis.size() >= 2)
    r.test = ttest_two_sample(correct, mis, kind);
  return r;
}

// ---------------------------------------------------------------------------
// LOSO run evaluation

struct PredictionRow {
  std::string speaker_id;
  std::string recording_id;
  std::uint32_t frame_index = 0;
  int label = 0;
  double p_victim = 0.0;
  int pred = 0;
};

struct FoldSummary {
  std::size_t fold = 0;
  std::string speaker_id;
  std::size_t n_frames = 0;
  double frame_accuracy = 0.0;  // percent
  int user_label = 0;
  int user_pred = 0;
  bool user_correct = false;
};

struct LosoEvaluation {
  std::vector<FoldSummary> folds;
  ConfusionMatrix2x2 frame_cm;  // pooled over folds
  ConfusionMatrix2x2 user_cm;
  MeanStd frame_accuracy;       // mean +- population std over folds, percent
  double user_accuracy = 0.0;   // percent
  SeverityReport severity;
};

/// Aggregates one LOSO run from per-fold held-out predictions. Folds are
/// ordered by fold index; each fold's rows must all belong to its held-out
/// speaker.
inline LosoEvaluation evaluate_loso(
    const std::vector<std::vector<PredictionRow>>& per_fold,
    const CorpusManifest& manifest, TTestKind kind = TTestKind::pooled) {
  LosoEvaluation ev;
  std::vector<double> fold_accs;
  std::vector<VictimOutcome> outcomes;
  long users_correct = 0;
  for (std::size_t i = 0; i < per_fold.size(); ++i) {
    const auto& rows = per_fold[i];
    if (rows.empty()) throw std::runtime_error("evaluate_loso: fold without predictions");
    FoldSummary fs;
    fs.fold = i;
    fs.speaker_id = rows.front().speaker_id;
    fs.n_frames = rows.size();
    const SpeakerRecord* spk = manifest.find_speaker(fs.speaker_id);
    if (!spk) throw std::runtime_error("evaluate_loso: unknown speaker " + fs.speaker_id);
    long hit = 0;
    std::vector<FramePrediction> frames;
    frames.reserve(rows.size());
    for (const auto& r : rows) {
      if (r.speaker_id != fs.speaker_id)
        throw std::runtime_error("evaluate_loso: fold mixes speakers");
      ev.frame_cm.add(r.pred, r.label);
      hit += r.pred == r.label ? 1 : 0;
      frames.push_back({r.p_victim, r.pred});
    }
    fs.frame_accuracy = 100.0 * static_cast<double>(hit) / static_cast<double>(rows.size());
    fs.user_label = spk->victim ? 1 : 0;
    fs.user_pred = majority_vote(frames);
    fs.user_correct = fs.user_pred == fs.user_label;
    ev.user_cm.add(fs.user_pred, fs.user_label);
    users_correct += fs.user_correct ? 1 : 0;
    fold_accs.push_back(fs.frame_accuracy);
    if (spk->victim)
      outcomes.push_back({spk->severity.value_or(0.0), fs.user_correct});
    ev.folds.push_back(std::move(fs));
  }
  if (fold_accs.size() >= 2) ev.frame_accuracy = loso_aggregate(fold_accs);
  else if (fold_accs.size() == 1) ev.frame_accuracy = {fold_accs[0], 0.0};
  ev.user_accuracy =
      100.0 * static_cast<double>(users_correct) / static_cast<double>(per_fold.size());
  ev.severity = severity_analysis(outcomes, kind);
  return ev;
}

// ---------------------------------------------------------------------------
// Report rendering (pure string assembly; byte-stable for identical inputs)

namespace detail {

inline std::string fmt2(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string fmt2(const std::optional<double>& v) {
  return v ? fmt2(*v) : std::string("n/a");
}

inline std::string fmt4(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

struct SpeakerProbeResult {
  double accuracy = 0.0;            // percent, top-1
  std::optional<double> accuracy_std;  // across folds (USM) when applicable
  std::size_t n_test_frames = 0;
};

struct RunEvaluation {
  const CorpusManifest* manifest = nullptr;
  std::optional<LosoEvaluation> icm;
  std::optional<LosoEvaluation> dam;
  std::optional<SpeakerProbeResult> ism;
  std::optional<SpeakerProbeResult> usm;
};

inline std::string folds_csv(const LosoEvaluation& ev) {
  std::string out = "fold,speaker_id,frame_acc,user_correct\n";
  for (const auto& f : ev.folds) {
    out += std::to_string(f.fold) + "," + f.speaker_id + "," +
           detail::format_g9(f.frame_accuracy) + "," + (f.user_correct ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string confusion_csv(const std::vector<std::pair<std::string, ConfusionMatrix2x2>>& rows) {
  std::string out = "model,tp,fn,fp,tn\n";
  for (const auto& [name, cm] : rows)
    out += name + "," + std::to_string(cm.tp) + "," + std::to_string(cm.fn) + "," +
           std::to_string(cm.fp) + "," + std::to_string(cm.tn) + "\n";
  return out;
}

inline std::string severity_csv(const std::vector<std::pair<std::string, SeverityReport>>& rows) {
  std::string out = "model,group,n,mean_severity,scaled_pct,p_value\n";
  for (const auto& [name, r] : rows) {
    std::string p = r.test ? detail::format_g9(r.test->p) : std::string();
    out += name + ",correct," + std::to_string(r.n_correct) + "," +
           (r.mean_correct ? detail::format_g9(*r.mean_correct) : std::string()) + "," +
           (r.scaled_correct ? detail::format_g9(*r.scaled_correct) : std::string()) + "," + p + "\n";
    out += name + ",misclassified," + std::to_string(r.n_misclassified) + "," +
           (r.mean_misclassified ? detail::format_g9(*r.mean_misclassified) : std::string()) + "," +
           (r.scaled_misclassified ? detail::format_g9(*r.scaled_misclassified) : std::string()) +
           "," + p + "\n";
  }
  return out;
}

inline std::string build_report_text(const RunEvaluation& run) {
  if (!run.manifest) throw std::runtime_error("build_report_text: manifest required");
  const CorpusManifest& m = *run.manifest;
  std::string out;
  out += "despeaker run report\n";
  out += "====================\n\n";

  std::size_t victim_frames = 0;
  for (const auto& f : m.speakers)
    if (f.victim)
      for (const auto& r : f.recordings) victim_frames += r.frames.size();
  std::size_t total_frames = m.n_frames();
  out += "corpus: " + std::to_string(m.speakers.size()) + " speakers (" +
         std::to_string(m.n_victims()) + " victims / " + std::to_string(m.n_non_victims()) +
         " non-victims), " + std::to_string(total_frames) + " frames\n";
  if (total_frames > 0) {
    double share = 100.0 * static_cast<double>(victim_frames) / static_cast<double>(total_frames);
    out += "frame class balance: " + detail::fmt2(share) + "% victim vs " +
           detail::fmt2(100.0 - share) + "% non-victim\n";
  }
  out += "\n";

  auto loso_block = [&](const char* name, const LosoEvaluation& ev) {
    MetricsBundle fl = metrics(ev.frame_cm);
    MetricsBundle ul = metrics(ev.user_cm);
    out += std::string(name) + " (" + std::to_string(ev.folds.size()) + " LOSO folds)\n";
    out += "  FL accuracy  " + detail::fmt2(ev.frame_accuracy.mean) + " +- " +
           detail::fmt2(ev.frame_accuracy.stddev) + "\n";
    out += "  FL precision " + detail::fmt2(fl.precision) + "\n";
    out += "  FL recall    " + detail::fmt2(fl.recall) + "\n";
    out += "  FL F1        " + detail::fmt2(fl.f1) + "\n";
    out += "  UL accuracy  " + detail::fmt2(ev.user_accuracy) + "\n";
    out += "  UL precision " + detail::fmt2(ul.precision) + "\n";
    out += "  UL recall    " + detail::fmt2(ul.recall) + "\n";
    out += "  UL F1        " + detail::fmt2(ul.f1) + "\n";
    out += "  FL confusion [tp fn fp tn] = [" + std::to_string(ev.frame_cm.tp) + " " +
           std::to_string(ev.frame_cm.fn) + " " + std::to_string(ev.frame_cm.fp) + " " +
           std::to_string(ev.frame_cm.tn) + "]\n";
    out += "  UL confusion [tp fn fp tn] = [" + std::to_string(ev.user_cm.tp) + " " +
           std::to_string(ev.user_cm.fn) + " " + std::to_string(ev.user_cm.fp) + " " +
           std::to_string(ev.user_cm.tn) + "]\n\n";
  };

  out += "GBVV condition detection\n";
  out += "------------------------\n";
  if (run.icm) loso_block("ICM", *run.icm);
  if (run.dam) loso_block("DAM", *run.dam);
  if (run.icm && run.dam)
    out += "UL accuracy side by side: ICM " + detail::fmt2(run.icm->user_accuracy) +
           "  DAM " + detail::fmt2(run.dam->user_accuracy) + "\n\n";
  if (!run.icm && !run.dam) out += "(no condition model trained)\n\n";

  out += "speaker identification\n";
  out += "----------------------\n";
  if (run.ism)
    out += "ISM top-1 accuracy " + detail::fmt2(run.ism->accuracy) + " (" +
           std::to_string(run.ism->n_test_frames) + " held-out frames)\n";
  if (run.usm) {
    out += "USM top-1 accuracy " + detail::fmt2(run.usm->accuracy);
    if (run.usm->accuracy_std) out += " +- " + detail::fmt2(*run.usm->accuracy_std);
    out += " (probes on frozen DAM embeddings)\n";
  }
  if (run.ism && run.usm && run.ism->accuracy > 0) {
    double drop = 100.0 * (run.ism->accuracy - run.usm->accuracy) / run.ism->accuracy;
    out += "relative speaker-identification drop: " + detail::fmt2(drop) + "%\n";
  }
  if (!run.ism && !run.usm) out += "(no speaker model trained)\n";
  out += "\n";

  bool any_sev = (run.icm && run.icm->severity.n_correct + run.icm->severity.n_misclassified > 0) ||
                 (run.dam && run.dam->severity.n_correct + run.dam->severity.n_misclassified > 0);
  if (any_sev) {
    out += "severity analysis (victims only, score scale 0-20)\n";
    out += "--------------------------------------------------\n";
    auto sev_block = [&](const char* name, const SeverityReport& r) {
      out += std::string(name) + " correctly classified:   n=" + std::to_string(r.n_correct) +
             " mean " + detail::fmt2(r.mean_correct) + " scaled " +
             detail::fmt2(r.scaled_correct) + "%\n";
      out += std::string(name) + " misclassified:          n=" +
             std::to_string(r.n_misclassified) + " mean " + detail::fmt2(r.mean_misclassified) +
             " scaled " + detail::fmt2(r.scaled_misclassified) + "%\n";
      if (r.test)
        out += std::string(name) + " two-tailed p = " + detail::fmt4(r.test->p) +
               (r.test->degenerate ? " (degenerate variance)" : "") + "\n";
      else
        out += std::string(name) + " p = n/a (group with < 2 members)\n";
    };
    if (run.icm) sev_block("ICM", run.icm->severity);
    if (run.dam) sev_block("DAM", run.dam->severity);
  }
  return out;
}

}  // namespace despk
