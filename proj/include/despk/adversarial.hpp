#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "despk/corpus.hpp"
#include "despk/eval.hpp"
#include "despk/nn.hpp"

namespace despk {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double lambda = 0.2;  // weight of the condition loss in the composite objective
  SgdConfig opt;
  int init_epochs = 20;       // ICM/ISM pretraining cap
  int init_patience = 5;      // plateau epochs before early stop
  double init_min_delta = 1e-4;
  enum class Granularity { pass, batch };
  Granularity granularity = Granularity::pass;  // what one "step" spans
  double split_train_fraction = 0.8;  // recording-level train share for ISM/USM
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lambda > 0.0 && lambda < 1.0))
      throw ConfigError("train: lambda must be in (0, 1)");
    if (init_epochs < 1) throw ConfigError("train: init_epochs must be >= 1");
    if (init_patience < 1) throw ConfigError("train: init_patience must be >= 1");
    if (!(split_train_fraction > 0.0 && split_train_fraction < 1.0))
      throw ConfigError("train: split_train_fraction must be in (0, 1)");
    if (!(opt.momentum >= 0.0 && opt.momentum < 1.0))
      throw ConfigError("train: momentum must be in [0, 1)");
    if (!(opt.starter_lr > 0.0)) throw ConfigError("train: starter_lr must be positive");
    if (!(opt.decay_steps > 0.0)) throw ConfigError("train: decay_steps must be positive");
    if (!(opt.decay_rate > 0.0)) throw ConfigError("train: decay_rate must be positive");
  }
};

/// One LOSO fold: the held-out speaker plus the dense speaker-index mapping
/// used by the fold's speaker head.
struct FoldSpec {
  std::string held_out;
  std::vector<std::string> train_speakers;  // sorted
  std::map<std::string, int> spk_index;

  static FoldSpec make(const CorpusManifest& m, const std::string& held_out) {
    FoldSpec f;
    f.held_out = held_out;
    bool found = false;
    for (const auto& s : m.speakers) {
      if (s.speaker_id == held_out) {
        found = true;
        continue;
      }
      f.train_speakers.push_back(s.speaker_id);
    }
    if (!found) throw std::runtime_error("fold: unknown held-out speaker " + held_out);
    if (f.train_speakers.empty())
      throw std::runtime_error("fold: no training speakers left");
    std::sort(f.train_speakers.begin(), f.train_speakers.end());
    for (std::size_t i = 0; i < f.train_speakers.size(); ++i)
      f.spk_index[f.train_speakers[i]] = static_cast<int>(i);
    return f;
  }

  int n_speakers() const { return static_cast<int>(train_speakers.size()); }
};

struct AuditLog {
  std::vector<std::string> lines;
  void add(std::string line) { lines.push_back(std::move(line)); }
  std::string text() const {
    std::string out;
    for (const auto& l : lines) {
      out += l;
      out += '\n';
    }
    return out;
  }
};

namespace detail {

inline void audit(AuditLog* log, const std::string& line) {
  if (log) log->add(line);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Frame gathering

/// Columnized view of a feature subset, with row provenance kept so batch
/// audits can re-verify the LOSO contract against the original store.
struct FrameData {
  Mat x;
  std::vector<int> cond_labels;
  std::vector<int> spk_labels;  // -1 when the speaker is outside the label space
  std::vector<std::size_t> source_rows;
  std::vector<const FrameFeatures*> frames;
};

template <class Pred>
FrameData gather_frames(const FeatureSet& set, const std::map<std::string, int>* spk_index,
                        Pred keep) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (keep(set[i])) rows.push_back(i);
  FrameData d;
  d.x = Mat(static_cast<int>(rows.size()), kFeatureDim);
  d.cond_labels.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const FrameFeatures& f = set[rows[r]];
    for (int j = 0; j < kFeatureDim; ++j)
      d.x.at(static_cast<int>(r), j) = f.features[static_cast<std::size_t>(j)];
    d.cond_labels.push_back(f.label);
    int spk = -1;
    if (spk_index) {
      auto it = spk_index->find(f.speaker_id);
      spk = it == spk_index->end() ? -1 : it->second;
    }
    d.spk_labels.push_back(spk);
    d.source_rows.push_back(rows[r]);
    d.frames.push_back(&f);
  }
  return d;
}

inline FrameData gather_fold_training(const FeatureSet& set, const FoldSpec& fold) {
  FrameData d = gather_frames(set, &fold.spk_index, [&](const FrameFeatures& f) {
    return fold.spk_index.count(f.speaker_id) > 0;
  });
  for (const auto* f : d.frames)
    if (f->speaker_id == fold.held_out)
      throw std::runtime_error("LOSO violation: held-out frame gathered for training");
  return d;
}

inline FrameData gather_speaker(const FeatureSet& set, const std::string& speaker_id) {
  return gather_frames(set, nullptr,
                       [&](const FrameFeatures& f) { return f.speaker_id == speaker_id; });
}

// ---------------------------------------------------------------------------
// Recording-level splits (ISM/USM evaluation)

struct RecordingSplit {
  std::set<std::string> train;  // "<speaker>/<recording>"
  std::set<std::string> test;
};

/// Assigns each of a speaker's recordings wholly to train or test,
/// approximately train_fraction by recording count (at least one on each
/// side). Deterministic per seed.
inline void split_by_recording(const SpeakerRecord& spk, double train_fraction,
                               std::uint64_t seed, RecordingSplit& out) {
  const std::size_t n = spk.recordings.size();
  if (n < 2)
    throw std::runtime_error("split_by_recording: speaker '" + spk.speaker_id +
                             "' has a single recording; cannot split");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& r : spk.recordings) ids.push_back(r.recording_id);
  std::sort(ids.begin(), ids.end());
  SplitMix64 rng(derive_seed(seed, "split", fnv1a64(spk.speaker_id)));
  rng.shuffle(ids);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::max<std::size_t>(1, std::min(n - 1, n_train));
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? out.train : out.test).insert(spk.speaker_id + "/" + ids[i]);
}

inline RecordingSplit split_corpus_by_recording(const CorpusManifest& m,
                                                std::span<const std::string> speakers,
                                                double train_fraction, std::uint64_t seed) {
  RecordingSplit split;
  for (const auto& id : speakers) {
    const SpeakerRecord* spk = m.find_speaker(id);
    if (!spk) throw std::runtime_error("split_by_recording: unknown speaker " + id);
    split_by_recording(*spk, train_fraction, seed, split);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Batching

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;  // indices into a FrameData
};

inline BatchPlan make_batches(std::size_t n, int batch_size, std::uint64_t shuffle_seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  SplitMix64 rng(shuffle_seed);
  rng.shuffle(idx);
  BatchPlan plan;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    plan.batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                              idx.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return plan;
}

inline Mat slice_rows(const Mat& x, std::span<const std::size_t> rows) {
  Mat out(static_cast<int>(rows.size()), x.cols);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(x.row(static_cast<int>(rows[r])), static_cast<std::size_t>(x.cols),
                out.row(static_cast<int>(r)));
  return out;
}

template <class T>
std::vector<T> slice(const std::vector<T>& v, std::span<const std::size_t> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(v[r]);
  return out;
}

/// Counts batch rows belonging to the held-out speaker. Zero by
/// construction; the count is logged so the LOSO contract is audited, not
/// assumed.
inline long count_heldout_rows(const FrameData& data, const BatchPlan& plan,
                               const std::string& held_out) {
  long n = 0;
  for (const auto& batch : plan.batches)
    for (std::size_t i : batch)
      if (data.frames[i]->speaker_id == held_out) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Epoch traces and plateau stopping

struct EpochStats {
  std::optional<double> l_cond;
  std::optional<double> l_spk;
  std::optional<double> l_total;
};

using EpochCallback = std::function<void(int epoch, const EpochStats&)>;

class PlateauStopper {
 public:
  PlateauStopper(int patience, double min_delta)
      : patience_(patience), min_delta_(min_delta) {}
  bool update(double loss) {
    if (loss < best_ - min_delta_) {
      best_ = loss;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ >= patience_;
  }

 private:
  int patience_;
  double min_delta_;
  double best_ = HUGE_VAL;
  int stale_ = 0;
};

// ---------------------------------------------------------------------------
// Primitive update steps

namespace detail {

/// Condition update: encoder + condition head descend the condition loss,
/// optionally scaled. Returns the batch loss. When `scale` differs from 1
/// the logged loss stays unscaled.
inline double condition_update(Model& m, SgdOptimizer& enc_opt, SgdOptimizer& cond_opt,
                               const Mat& xb, std::span<const int> yb) {
  StackCache enc_cache, cond_cache;
  const Mat& emb = stack_forward(m.encoder, xb, enc_cache);
  const Mat& probs = stack_forward(m.cond_head, emb, cond_cache);
  XentResult xe = cross_entropy(probs, yb, LossKind::sparse_condition);
  StackGrads cond_grads, enc_grads;
  stack_backward(m.cond_head, cond_cache, xe.dlogits, true, cond_grads);
  stack_backward(m.encoder, enc_cache, cond_grads.dx, false, enc_grads);
  enc_opt.step(m.encoder, enc_grads);
  cond_opt.step(m.cond_head, cond_grads);
  return xe.loss;
}

/// Speaker-head-only update on frozen embeddings (domain step / probes).
inline double speaker_head_update(Stack& spk_head, SgdOptimizer& spk_opt, const Mat& emb,
                                  std::span<const int> yb) {
  StackCache cache;
  const Mat& probs = stack_forward(spk_head, emb, cache);
  XentResult xe = cross_entropy(probs, yb, LossKind::categorical_speaker);
  StackGrads grads;
  stack_backward(spk_head, cache, xe.dlogits, true, grads);
  spk_opt.step(spk_head, grads);
  return xe.loss;
}

/// Joint speaker update: encoder + speaker head descend the speaker loss
/// (ISM pretraining; no gradient reversal involved).
inline double speaker_joint_update(Model& m, SgdOptimizer& enc_opt, SgdOptimizer& spk_opt,
                                   const Mat& xb, std::span<const int> yb) {
  StackCache enc_cache, spk_cache;
  const Mat& emb = stack_forward(m.encoder, xb, enc_cache);
  const Mat& probs = stack_forward(m.spk_head, emb, spk_cache);
  XentResult xe = cross_entropy(probs, yb, LossKind::categorical_speaker);
  StackGrads spk_grads, enc_grads;
  stack_backward(m.spk_head, spk_cache, xe.dlogits, true, spk_grads);
  stack_backward(m.encoder, enc_cache, spk_grads.dx, false, enc_grads);
  enc_opt.step(m.encoder, enc_grads);
  spk_opt.step(m.spk_head, spk_grads);
  return xe.loss;
}

struct MainStepLosses {
  double l_cond = 0.0;
  double l_spk = 0.0;
};

}  // namespace detail

/// Gradients of the composite main-step objective
/// lambda*L_cond - (1-lambda)*L_spk for one batch. The speaker-loss gradient
/// reaches the encoder through the gradient reversal layer; the speaker
/// head's own gradients are computed but never applied (it is frozen during
/// main steps).
struct MainGradients {
  StackGrads encoder;
  StackGrads cond_head;
  double l_cond = 0.0;
  double l_spk = 0.0;
};

inline MainGradients compute_main_gradients(const Model& m, const Mat& xb,
                                            std::span<const int> cond_y,
                                            std::span<const int> spk_y, double lambda) {
  MainGradients out;
  StackCache enc_cache, cond_cache, spk_cache;
  const Mat& emb = stack_forward(m.encoder, xb, enc_cache);
  const Mat& cond_probs = stack_forward(m.cond_head, emb, cond_cache);
  Mat spk_in = GradientReversal::forward(emb);
  const Mat& spk_probs = stack_forward(m.spk_head, spk_in, spk_cache);

  XentResult xe_cond = cross_entropy(cond_probs, cond_y, LossKind::sparse_condition);
  XentResult xe_spk = cross_entropy(spk_probs, spk_y, LossKind::categorical_speaker);
  out.l_cond = xe_cond.loss;
  out.l_spk = xe_spk.loss;

  Mat dz_cond = xe_cond.dlogits;
  for (double& v : dz_cond.v) v *= lambda;
  Mat dz_spk = xe_spk.dlogits;
  for (double& v : dz_spk.v) v *= 1.0 - lambda;

  StackGrads spk_grads;
  stack_backward(m.cond_head, cond_cache, dz_cond, true, out.cond_head);
  stack_backward(m.spk_head, spk_cache, dz_spk, true, spk_grads);

  Mat reversed = GradientReversal::backward(std::move(spk_grads.dx));
  Mat enc_upstream = out.cond_head.dx;
  for (std::size_t i = 0; i < enc_upstream.v.size(); ++i) enc_upstream.v[i] += reversed.v[i];
  stack_backward(m.encoder, enc_cache, enc_upstream, false, out.encoder);
  return out;
}

namespace detail {

inline MainStepLosses adversarial_main_update(Model& m, SgdOptimizer& enc_opt,
                                              SgdOptimizer& cond_opt, const Mat& xb,
                                              std::span<const int> cond_y,
                                              std::span<const int> spk_y, double lambda) {
  MainGradients g = compute_main_gradients(m, xb, cond_y, spk_y, lambda);
  enc_opt.step(m.encoder, g.encoder);
  cond_opt.step(m.cond_head, g.cond_head);
  return {g.l_cond, g.l_spk};
}

inline std::string freeze_status(const std::string& before, const Stack& s) {
  return before == stack_bytes(s) ? "1" : "0";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ICM: isolated condition model

struct IcmResult {
  Model model;
  std::vector<EpochStats> trace;
  int epochs_run = 0;
};

/// Trains encoder + condition head on condition labels only; the speaker
/// head stays at its initialization (audited bitwise per epoch).
inline IcmResult train_icm(const FeatureSet& set, const FoldSpec& fold,
                           const TrainConfig& cfg, AuditLog* audit = nullptr) {
  cfg.validate();
  FrameData data = gather_fold_training(set, fold);
  if (data.x.rows == 0) throw std::runtime_error("train_icm: empty training set");
  const std::uint64_t base = derive_seed(cfg.seed, "icm", fnv1a64(fold.held_out));
  IcmResult r;
  r.model = make_model(fold.n_speakers(), derive_seed(base, "init"));
  SgdOptimizer enc_opt(r.model.encoder, cfg.opt), cond_opt(r.model.cond_head, cfg.opt);
  PlateauStopper stop(cfg.init_patience, cfg.init_min_delta);
  detail::audit(audit, "procedure=icm held_out=" + fold.held_out +
                           " train_speakers=" + std::to_string(fold.n_speakers()) +
                           " frames=" + std::to_string(data.x.rows));
  for (int epoch = 0; epoch < cfg.init_epochs; ++epoch) {
    BatchPlan plan = make_batches(static_cast<std::size_t>(data.x.rows), cfg.batch_size,
                                  derive_seed(base, "shuffle", static_cast<std::uint64_t>(epoch)));
    const long leaked = count_heldout_rows(data, plan, fold.held_out);
    if (leaked != 0) throw std::runtime_error("train_icm: LOSO leak detected");
    std::string spk_before = stack_bytes(r.model.spk_head);
    double loss = 0.0;
    for (const auto& batch : plan.batches) {
      Mat xb = slice_rows(data.x, batch);
      auto yb = slice(data.cond_labels, batch);
      loss += detail::condition_update(r.model, enc_opt, cond_opt, xb, yb) *
              static_cast<double>(batch.size());
    }
    loss /= static_cast<double>(data.x.rows);
    detail::audit(audit, "epoch=" + std::to_string(epoch) + " phase=cond_pretrain updates=" +
                             std::to_string(plan.batches.size()) +
                             " l_cond=" + detail::format_g9(loss) +
                             " frozen=spk_head frozen_ok=" +
                             detail::freeze_status(spk_before, r.model.spk_head) +
                             " heldout_frames=0");
    EpochStats st;
    st.l_cond = loss;
    r.trace.push_back(st);
    ++r.epochs_run;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_icm: non-finite loss at epoch " + std::to_string(epoch));
    if (stop.update(loss)) break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// ISM: isolated speaker model

struct IsmResult {
  Model model;
  std::vector<EpochStats> trace;
  double test_accuracy = 0.0;  // percent, top-1 on held-out recordings
  std::size_t n_test_frames = 0;
  int epochs_run = 0;
};

/// Top-1 accuracy of a speaker stack on embedded (or raw) inputs.
inline double top1_accuracy(const Mat& probs, std::span<const int> labels) {
  long hit = 0;
  for (int i = 0; i < probs.rows; ++i) {
    const double* r = probs.row(i);
    int arg = 0;
    for (int j = 1; j < probs.cols; ++j)
      if (r[j] > r[arg]) arg = j;
    hit += arg == labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  return probs.rows == 0 ? 0.0 : 100.0 * static_cast<double>(hit) / probs.rows;
}

/// Trains a fresh encoder + speaker head end to end over the given speaker
/// label space, under a subject-dependent recording-level split.
inline IsmResult train_ism(const FeatureSet& set, const CorpusManifest& manifest,
                           std::span<const std::string> speakers, const TrainConfig& cfg,
                           AuditLog* audit = nullptr, std::string_view seed_tag = "ism") {
  cfg.validate();
  if (speakers.size() < 2) throw std::runtime_error("train_ism: need >= 2 speakers");
  std::vector<std::string> sorted(speakers.begin(), speakers.end());
  std::sort(sorted.begin(), sorted.end());
  std::map<std::string, int> spk_index;
  for (std::size_t i = 0; i < sorted.size(); ++i) spk_index[sorted[i]] = static_cast<int>(i);

  const std::uint64_t base =
      derive_seed(cfg.seed, seed_tag, fnv1a64(sorted.front() + "|" + sorted.back()) ^
                                          (sorted.size() * 0x9e37ULL));
  RecordingSplit split =
      split_corpus_by_recording(manifest, sorted, cfg.split_train_fraction, base);

  auto in_split = [&](const FrameFeatures& f, const std::set<std::string>& side) {
    return spk_index.count(f.speaker_id) > 0 &&
           side.count(f.speaker_id + "/" + f.recording_id) > 0;
  };
  FrameData train = gather_frames(set, &spk_index, [&](const FrameFeatures& f) {
    return in_split(f, split.train);
  });
  FrameData test = gather_frames(set, &spk_index, [&](const FrameFeatures& f) {
    return in_split(f, split.test);
  });
  if (train.x.rows == 0 || test.x.rows == 0)
    throw std::runtime_error("train_ism: empty train or test partition");

  IsmResult r;
  r.model = make_model(static_cast<int>(sorted.size()), derive_seed(base, "init"));
  SgdOptimizer enc_opt(r.model.encoder, cfg.opt), spk_opt(r.model.spk_head, cfg.opt);
  PlateauStopper stop(cfg.init_patience, cfg.init_min_delta);
  detail::audit(audit, "procedure=ism speakers=" + std::to_string(sorted.size()) +
                           " train_frames=" + std::to_string(train.x.rows) +
                           " test_frames=" + std::to_string(test.x.rows));
  for (int epoch = 0; epoch < cfg.init_epochs; ++epoch) {
    BatchPlan plan = make_batches(static_cast<std::size_t>(train.x.rows), cfg.batch_size,
                                  derive_seed(base, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::string cond_before = stack_bytes(r.model.cond_head);
    double loss = 0.0;
    for (const auto& batch : plan.batches) {
      Mat xb = slice_rows(train.x, batch);
      auto yb = slice(train.spk_labels, batch);
      loss += detail::speaker_joint_update(r.model, enc_opt, spk_opt, xb, yb) *
              static_cast<double>(batch.size());
    }
    loss /= static_cast<double>(train.x.rows);
    detail::audit(audit, "epoch=" + std::to_string(epoch) + " phase=spk_pretrain updates=" +
                             std::to_string(plan.batches.size()) +
                             " l_spk=" + detail::format_g9(loss) +
                             " frozen=cond_head frozen_ok=" +
                             detail::freeze_status(cond_before, r.model.cond_head) +
                             " heldout_frames=0");
    EpochStats st;
    st.l_spk = loss;
    r.trace.push_back(st);
    ++r.epochs_run;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_ism: non-finite loss at epoch " + std::to_string(epoch));
    if (stop.update(loss)) break;
  }
  Mat emb = stack_infer(r.model.encoder, test.x);
  Mat probs = stack_infer(r.model.spk_head, emb);
  r.test_accuracy = top1_accuracy(probs, test.spk_labels);
  r.n_test_frames = static_cast<std::size_t>(test.x.rows);
  detail::audit(audit, "ism_test_top1=" + detail::format_g9(r.test_accuracy));
  return r;
}

// ---------------------------------------------------------------------------
// DAM: domain-adversarial model

struct DamResult {
  Model model;
  std::vector<EpochStats> trace;
};

/// One adversarial epoch: a domain step (speaker head trains on frozen-
/// encoder embeddings) followed by two main steps (encoder + condition head
/// descend the composite loss with the speaker head frozen). Freeze
/// contracts are verified bitwise and logged.
inline EpochStats dam_epoch(Model& m, SgdOptimizer& enc_opt, SgdOptimizer& cond_opt,
                            SgdOptimizer& spk_opt, const FrameData& data,
                            const FoldSpec& fold, const TrainConfig& cfg, int epoch,
                            std::uint64_t base_seed, AuditLog* audit = nullptr) {
  EpochStats stats;
  const auto n = static_cast<std::size_t>(data.x.rows);
  auto plan_for = [&](const char* tag, int sub) {
    return make_batches(n, cfg.batch_size,
                        derive_seed(base_seed, std::string("shuffle-") + tag,
                                    static_cast<std::uint64_t>(epoch) * 8 +
                                        static_cast<std::uint64_t>(sub)));
  };

  if (cfg.granularity == TrainConfig::Granularity::pass) {
    // Domain step: only the speaker head may change.
    {
      BatchPlan plan = plan_for("domain", 0);
      long leaked = count_heldout_rows(data, plan, fold.held_out);
      if (leaked != 0) throw std::runtime_error("dam_epoch: LOSO leak in domain step");
      std::string enc_before = stack_bytes(m.encoder);
      std::string cond_before = stack_bytes(m.cond_head);
      double loss = 0.0;
      for (const auto& batch : plan.batches) {
        Mat xb = slice_rows(data.x, batch);
        Mat emb = stack_infer(m.encoder, xb);  // encoder frozen: inference only
        auto yb = slice(data.spk_labels, batch);
        loss += detail::speaker_head_update(m.spk_head, spk_opt, emb, yb) *
                static_cast<double>(batch.size());
      }
      loss /= static_cast<double>(n);
      detail::audit(audit,
                    "epoch=" + std::to_string(epoch) + " phase=domain updates=" +
                        std::to_string(plan.batches.size()) + " l_spk=" +
                        detail::format_g9(loss) + " frozen=encoder,cond_head frozen_ok=" +
                        detail::freeze_status(enc_before, m.encoder) +
                        detail::freeze_status(cond_before, m.cond_head) +
                        " heldout_frames=" + std::to_string(leaked));
    }
    // Two main steps: speaker head frozen, composite objective.
    double l_cond_acc = 0.0, l_spk_acc = 0.0;
    for (int main = 0; main < 2; ++main) {
      BatchPlan plan = plan_for("main", main + 1);
      long leaked = count_heldout_rows(data, plan, fold.held_out);
      if (leaked != 0) throw std::runtime_error("dam_epoch: LOSO leak in main step");
      std::string spk_before = stack_bytes(m.spk_head);
      double lc = 0.0, ls = 0.0;
      for (const auto& batch : plan.batches) {
        Mat xb = slice_rows(data.x, batch);
        auto cy = slice(data.cond_labels, batch);
        auto sy = slice(data.spk_labels, batch);
        auto losses =
            detail::adversarial_main_update(m, enc_opt, cond_opt, xb, cy, sy, cfg.lambda);
        lc += losses.l_cond * static_cast<double>(batch.size());
        ls += losses.l_spk * static_cast<double>(batch.size());
      }
      lc /= static_cast<double>(n);
      ls /= static_cast<double>(n);
      l_cond_acc += lc;
      l_spk_acc += ls;
      detail::audit(audit, "epoch=" + std::to_string(epoch) + " phase=main updates=" +
                               std::to_string(plan.batches.size()) + " l_cond=" +
                               detail::format_g9(lc) + " l_spk=" + detail::format_g9(ls) +
                               " frozen=spk_head frozen_ok=" +
                               detail::freeze_status(spk_before, m.spk_head) +
                               " heldout_frames=" + std::to_string(leaked));
    }
    // trace row: the main-step losses that actually form L_T
    stats.l_cond = l_cond_acc / 2.0;
    stats.l_spk = l_spk_acc / 2.0;
    stats.l_total = total_loss(*stats.l_cond, *stats.l_spk, cfg.lambda);
  } else {
    // Batch granularity: the three-step cycle runs per minibatch.
    BatchPlan plan = plan_for("batch", 0);
    long leaked = count_heldout_rows(data, plan, fold.held_out);
    if (leaked != 0) throw std::runtime_error("dam_epoch: LOSO leak");
    double ld = 0.0, lc = 0.0, ls = 0.0;
    for (const auto& batch : plan.batches) {
      Mat xb = slice_rows(data.x, batch);
      auto cy = slice(data.cond_labels, batch);
      auto sy = slice(data.spk_labels, batch);
      Mat emb = stack_infer(m.encoder, xb);
      ld += detail::speaker_head_update(m.spk_head, spk_opt, emb, sy) *
            static_cast<double>(batch.size());
      for (int main = 0; main < 2; ++main) {
        auto losses =
            detail::adversarial_main_update(m, enc_opt, cond_opt, xb, cy, sy, cfg.lambda);
        lc += losses.l_cond * static_cast<double>(batch.size()) / 2.0;
        ls += losses.l_spk * static_cast<double>(batch.size()) / 2.0;
      }
    }
    stats.l_cond = lc / static_cast<double>(n);
    stats.l_spk = ls / static_cast<double>(n);
    stats.l_total = total_loss(*stats.l_cond, *stats.l_spk, cfg.lambda);
    detail::audit(audit, "epoch=" + std::to_string(epoch) +
                             " schedule=batch domain_l_spk=" + detail::format_g9(
                                 ld / static_cast<double>(n)) + " domain_updates=" +
                             std::to_string(plan.batches.size()) + " main_updates=" +
                             std::to_string(plan.batches.size() * 2) +
                             " heldout_frames=" + std::to_string(leaked));
  }
  return stats;
}

/// Full adversarial training for one fold, starting from ICM/ISM-initialized
/// parameters (encoder + condition head from the ICM, speaker head from the
/// ISM).
inline DamResult train_dam(const FeatureSet& set, const FoldSpec& fold,
                           const TrainConfig& cfg, Model init, AuditLog* audit = nullptr,
                           const EpochCallback& on_epoch = {}) {
  cfg.validate();
  FrameData data = gather_fold_training(set, fold);
  if (data.x.rows == 0) throw std::runtime_error("train_dam: empty training set");
  if (init.spk_head.output_dim() != fold.n_speakers())
    throw std::runtime_error("train_dam: speaker head width " +
                             std::to_string(init.spk_head.output_dim()) +
                             " != fold speakers " + std::to_string(fold.n_speakers()));
  const std::uint64_t base = derive_seed(cfg.seed, "dam", fnv1a64(fold.held_out));
  DamResult r;
  r.model = std::move(init);
  SgdOptimizer enc_opt(r.model.encoder, cfg.opt), cond_opt(r.model.cond_head, cfg.opt),
      spk_opt(r.model.spk_head, cfg.opt);
  detail::audit(audit, "procedure=dam held_out=" + fold.held_out +
                           " train_speakers=" + std::to_string(fold.n_speakers()) +
                           " frames=" + std::to_string(data.x.rows) + " epochs=" +
                           std::to_string(cfg.epochs) + " lambda=" +
                           detail::format_g9(cfg.lambda));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats st =
        dam_epoch(r.model, enc_opt, cond_opt, spk_opt, data, fold, cfg, epoch, base, audit);
    r.trace.push_back(st);
    if (on_epoch) on_epoch(epoch, st);
    bool finite = (!st.l_cond || std::isfinite(*st.l_cond)) &&
                  (!st.l_spk || std::isfinite(*st.l_spk)) &&
                  (!st.l_total || std::isfinite(*st.l_total));
    if (!finite)
      throw std::runtime_error("train_dam: diverged (non-finite loss) at epoch " +
                               std::to_string(epoch) + " after " +
                               std::to_string(r.trace.size()) + " trace rows");
  }
  detail::audit(audit, "loso_leak_audit=pass heldout_frames_total=0");
  return r;
}

// ---------------------------------------------------------------------------
// USM: speaker probe on frozen embeddings

struct UsmResult {
  Stack spk_head;
  std::vector<EpochStats> trace;
  double test_accuracy = 0.0;
  std::size_t n_test_frames = 0;
  int epochs_run = 0;
};

/// Trains a fresh speaker head on the frozen encoder's embeddings to measure
/// how much identity survives. The encoder is checksummed before and after;
/// any mutation aborts.
inline UsmResult train_usm(const Stack& frozen_encoder, const FeatureSet& set,
                           const CorpusManifest& manifest,
                           std::span<const std::string> speakers, const TrainConfig& cfg,
                           AuditLog* audit = nullptr, std::string_view seed_tag = "usm") {
  cfg.validate();
  if (speakers.size() < 2) throw std::runtime_error("train_usm: need >= 2 speakers");
  const std::string enc_before = stack_bytes(frozen_encoder);

  std::vector<std::string> sorted(speakers.begin(), speakers.end());
  std::sort(sorted.begin(), sorted.end());
  std::map<std::string, int> spk_index;
  for (std::size_t i = 0; i < sorted.size(); ++i) spk_index[sorted[i]] = static_cast<int>(i);

  const std::uint64_t base =
      derive_seed(cfg.seed, seed_tag, fnv1a64(sorted.front() + "|" + sorted.back()) ^
                                          (sorted.size() * 0x9e37ULL));
  RecordingSplit split =
      split_corpus_by_recording(manifest, sorted, cfg.split_train_fraction, base);
  auto in_split = [&](const FrameFeatures& f, const std::set<std::string>& side) {
    return spk_index.count(f.speaker_id) > 0 &&
           side.count(f.speaker_id + "/" + f.recording_id) > 0;
  };
  FrameData train = gather_frames(set, &spk_index, [&](const FrameFeatures& f) {
    return in_split(f, split.train);
  });
  FrameData test = gather_frames(set, &spk_index, [&](const FrameFeatures& f) {
    return in_split(f, split.test);
  });
  if (train.x.rows == 0 || test.x.rows == 0)
    throw std::runtime_error("train_usm: empty train or test partition");

  // Embeddings are computed once; the encoder itself is never touched again.
  Mat train_emb = stack_infer(frozen_encoder, train.x);
  Mat test_emb = stack_infer(frozen_encoder, test.x);

  UsmResult r;
  {
    SplitMix64 rng(derive_seed(base, "init"));
    const int dims[] = {frozen_encoder.output_dim(), kHiddenDim,
                        static_cast<int>(sorted.size())};
    const Activation acts[] = {Activation::relu, Activation::softmax};
    r.spk_head = make_stack(dims, acts, rng);
  }
  SgdOptimizer spk_opt(r.spk_head, cfg.opt);
  PlateauStopper stop(cfg.init_patience, cfg.init_min_delta);
  detail::audit(audit, "procedure=usm speakers=" + std::to_string(sorted.size()) +
                           " train_frames=" + std::to_string(train.x.rows) +
                           " test_frames=" + std::to_string(test.x.rows));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    BatchPlan plan = make_batches(static_cast<std::size_t>(train_emb.rows), cfg.batch_size,
                                  derive_seed(base, "shuffle", static_cast<std::uint64_t>(epoch)));
    double loss = 0.0;
    for (const auto& batch : plan.batches) {
      Mat eb = slice_rows(train_emb, batch);
      auto yb = slice(train.spk_labels, batch);
      loss += detail::speaker_head_update(r.spk_head, spk_opt, eb, yb) *
              static_cast<double>(batch.size());
    }
    loss /= static_cast<double>(train_emb.rows);
    EpochStats st;
    st.l_spk = loss;
    r.trace.push_back(st);
    ++r.epochs_run;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_usm: non-finite loss at epoch " + std::to_string(epoch));
    if (stop.update(loss)) break;
  }
  Mat probs = stack_infer(r.spk_head, test_emb);
  r.test_accuracy = top1_accuracy(probs, test.spk_labels);
  r.n_test_frames = static_cast<std::size_t>(test.x.rows);

  if (stack_bytes(frozen_encoder) != enc_before)
    throw std::runtime_error("train_usm: encoder mutated during probe training");
  detail::audit(audit, "usm_test_top1=" + detail::format_g9(r.test_accuracy) +
                           " encoder_frozen_ok=1 encoder_checksum=" +
                           std::to_string(stack_checksum(frozen_encoder)));
  return r;
}

// ---------------------------------------------------------------------------
// Held-out prediction (fold evaluation)

inline std::vector<PredictionRow> predict_condition(const Model& m, const FeatureSet& set,
                                                    const std::string& speaker_id) {
  FrameData d = gather_speaker(set, speaker_id);
  std::vector<PredictionRow> rows;
  if (d.x.rows == 0) return rows;
  Mat emb = stack_infer(m.encoder, d.x);
  Mat probs = stack_infer(m.cond_head, emb);
  rows.reserve(static_cast<std::size_t>(d.x.rows));
  for (int i = 0; i < d.x.rows; ++i) {
    const FrameFeatures& f = *d.frames[static_cast<std::size_t>(i)];
    PredictionRow r;
    r.speaker_id = f.speaker_id;
    r.recording_id = f.recording_id;
    r.frame_index = f.frame_index;
    r.label = f.label;
    r.p_victim = probs.at(i, 1);
    r.pred = probs.at(i, 1) > probs.at(i, 0) ? 1 : 0;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace despk
