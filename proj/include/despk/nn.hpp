#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "despk/rng.hpp"

namespace despk {

inline constexpr int kInputDim = 38;
inline constexpr int kEmbedDim = 128;
inline constexpr int kHiddenDim = 64;
inline constexpr int kCondClasses = 2;

/// Dense row-major matrix. All training math is 64-bit; the
/// finite-difference acceptance checks need the headroom.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return v.size(); }

  bool finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

namespace detail {

// C = A * B
inline void matmul(const Mat& a, const Mat& b, Mat& c) {
  if (a.cols != b.rows) throw std::runtime_error("matmul: shape mismatch");
  c = Mat(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    double* crow = c.row(i);
    const double* arow = a.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      const double* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C = A^T * B
inline void matmul_tn(const Mat& a, const Mat& b, Mat& c) {
  if (a.rows != b.rows) throw std::runtime_error("matmul_tn: shape mismatch");
  c = Mat(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      double* crow = c.row(i);
      const double aki = arow[i];
      for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

// C = A * B^T
inline void matmul_nt(const Mat& a, const Mat& b, Mat& c) {
  if (a.cols != b.cols) throw std::runtime_error("matmul_nt: shape mismatch");
  c = Mat(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      crow[j] = acc;
    }
  }
}

}  // namespace detail

enum class Activation { relu, linear, softmax };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::linear: return "linear";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "linear") return Activation::linear;
  if (s == "softmax") return Activation::softmax;
  throw std::runtime_error("unknown activation '" + s + "'");
}

struct DenseLayer {
  int in = 0, out = 0;
  Mat w;                   // [in x out]
  std::vector<double> b;   // [out]
  Activation act = Activation::linear;
};

/// A feed-forward stack of dense layers. Softmax is only legal as the final
/// activation.
struct Stack {
  std::vector<DenseLayer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().out; }

  void validate() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.w.rows != l.in || l.w.cols != l.out || static_cast<int>(l.b.size()) != l.out)
        throw std::runtime_error("stack: inconsistent layer shape at index " + std::to_string(i));
      if (i + 1 < layers.size()) {
        if (l.out != layers[i + 1].in)
          throw std::runtime_error("stack: dimension break between layers " +
                                   std::to_string(i) + " and " + std::to_string(i + 1));
        if (l.act == Activation::softmax)
          throw std::runtime_error("stack: softmax only allowed on the output layer");
      }
      if (!l.w.finite())
        throw std::runtime_error("stack: non-finite weights at layer " + std::to_string(i));
    }
  }
};

namespace detail {

inline void softmax_rows(Mat& m) {
  for (int i = 0; i < m.rows; ++i) {
    double* r = m.row(i);
    double mx = r[0];
    for (int j = 1; j < m.cols; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (int j = 0; j < m.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (int j = 0; j < m.cols; ++j) r[j] /= sum;
  }
}

inline void apply_activation(Mat& m, Activation act) {
  switch (act) {
    case Activation::relu:
      for (double& x : m.v) x = x > 0 ? x : 0.0;
      break;
    case Activation::linear:
      break;
    case Activation::softmax:
      softmax_rows(m);
      break;
  }
}

}  // namespace detail

struct StackCache {
  std::vector<Mat> inputs;  // inputs[i] feeds layer i
  std::vector<Mat> zs;      // pre-activations
  Mat out;
};

/// Forward pass; fills the cache needed for a later backward pass.
inline const Mat& stack_forward(const Stack& s, const Mat& x, StackCache& cache) {
  if (s.layers.empty()) throw std::runtime_error("stack_forward: empty stack");
  if (x.cols != s.input_dim())
    throw std::runtime_error("stack_forward: input dim " + std::to_string(x.cols) +
                             " != expected " + std::to_string(s.input_dim()));
  if (x.rows < 1) throw std::runtime_error("stack_forward: empty batch");
  cache.inputs.assign(1, x);
  cache.zs.clear();
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    const DenseLayer& l = s.layers[li];
    Mat z;
    detail::matmul(cache.inputs.back(), l.w, z);
    for (int i = 0; i < z.rows; ++i) {
      double* r = z.row(i);
      for (int j = 0; j < z.cols; ++j) r[j] += l.b[static_cast<std::size_t>(j)];
    }
    cache.zs.push_back(z);
    detail::apply_activation(z, l.act);
    if (li + 1 < s.layers.size())
      cache.inputs.push_back(std::move(z));
    else
      cache.out = std::move(z);
  }
  return cache.out;
}

/// Forward pass without gradient bookkeeping.
inline Mat stack_infer(const Stack& s, const Mat& x) {
  StackCache c;
  stack_forward(s, x, c);
  return std::move(c.out);
}

struct LayerGrads {
  Mat dw;
  std::vector<double> db;
};

struct StackGrads {
  std::vector<LayerGrads> layers;
  Mat dx;  // gradient w.r.t. the stack input

  bool finite() const {
    for (const auto& l : layers) {
      if (!l.dw.finite()) return false;
      for (double x : l.db)
        if (!std::isfinite(x)) return false;
    }
    return true;
  }

  void scale(double f) {
    for (auto& l : layers) {
      for (double& x : l.dw.v) x *= f;
      for (double& x : l.db) x *= f;
    }
    for (double& x : dx.v) x *= f;
  }
};

/// Reverse pass. `upstream` is dL/d(output) for relu/linear output stacks;
/// a softmax output stack instead expects dL/d(logits) (the caller fuses
/// softmax with cross-entropy), flagged by upstream_is_dz.
inline void stack_backward(const Stack& s, const StackCache& cache, const Mat& upstream,
                           bool upstream_is_dz, StackGrads& grads) {
  const auto n = s.layers.size();
  if (cache.zs.size() != n) throw std::runtime_error("stack_backward: stale cache");
  grads.layers.assign(n, {});
  Mat delta;  // dL/dz of current layer
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t li = n - 1 - step;
    const DenseLayer& l = s.layers[li];
    Mat da;
    const Mat* da_ptr;
    if (step == 0) {
      if (l.act == Activation::softmax && !upstream_is_dz)
        throw std::runtime_error("stack_backward: softmax output requires logit gradients");
      da_ptr = &upstream;
    } else {
      detail::matmul_nt(delta, s.layers[li + 1].w, da);
      da_ptr = &da;
    }
    Mat dz;
    if (l.act == Activation::relu) {
      dz = *da_ptr;
      const Mat& z = cache.zs[li];
      for (std::size_t i = 0; i < dz.v.size(); ++i)
        if (z.v[i] <= 0.0) dz.v[i] = 0.0;
    } else {
      dz = *da_ptr;  // linear, or softmax with fused logit gradient
    }
    LayerGrads& lg = grads.layers[li];
    detail::matmul_tn(cache.inputs[li], dz, lg.dw);
    lg.db.assign(static_cast<std::size_t>(l.out), 0.0);
    for (int i = 0; i < dz.rows; ++i) {
      const double* r = dz.row(i);
      for (int j = 0; j < l.out; ++j) lg.db[static_cast<std::size_t>(j)] += r[j];
    }
    delta = std::move(dz);
  }
  detail::matmul_nt(delta, s.layers[0].w, grads.dx);
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { sparse_condition, categorical_speaker };

struct XentResult {
  double loss = 0.0;
  Mat dlogits;  // (probs - onehot) / batch
};

/// Mean negative log-likelihood plus the fused softmax gradient w.r.t.
/// logits. Probabilities are clamped at 1e-15 before the log.
inline XentResult cross_entropy(const Mat& probs, std::span<const int> labels,
                                LossKind kind) {
  if (static_cast<int>(labels.size()) != probs.rows)
    throw std::runtime_error("cross_entropy: batch size mismatch");
  const char* what =
      kind == LossKind::sparse_condition ? "condition" : "speaker";
  XentResult r;
  r.dlogits = probs;
  const double inv_b = 1.0 / probs.rows;
  for (int i = 0; i < probs.rows; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probs.cols)
      throw std::runtime_error(std::string("cross_entropy: ") + what + " label " +
                               std::to_string(y) + " out of range [0, " +
                               std::to_string(probs.cols) + ")");
    double p = probs.at(i, y);
    r.loss -= std::log(p < 1e-15 ? 1e-15 : p);
    r.dlogits.at(i, y) -= 1.0;
  }
  r.loss *= inv_b;
  for (double& x : r.dlogits.v) x *= inv_b;
  return r;
}

/// Composite adversarial objective: lambda * L_cond - (1 - lambda) * L_spk.
inline double total_loss(double l_cond, double l_spk, double lambda) {
  return lambda * l_cond - (1.0 - lambda) * l_spk;
}

// ---------------------------------------------------------------------------
// Gradient reversal

/// Identity on the forward pass; exact negation of the upstream gradient on
/// the backward pass. Placing this between the encoder and the speaker head
/// is what turns speaker-loss descent into encoder-side ascent.
struct GradientReversal {
  static Mat forward(Mat x) { return x; }
  static Mat backward(Mat g) {
    for (double& x : g.v) x = -x;
    return g;
  }
};

// ---------------------------------------------------------------------------
// Momentum SGD with exponential learning-rate decay

struct SgdConfig {
  double momentum = 0.9;
  double starter_lr = 1e-9;     // Table-bound default; see profiles
  double decay_steps = 10000;
  double decay_rate = 0.96;
};

/// Per-stack optimizer: velocity per parameter tensor, shared step counter.
/// lr(t) = starter_lr * decay_rate^(t / decay_steps), staircase-free.
class SgdOptimizer {
 public:
  SgdOptimizer(const Stack& s, SgdConfig cfg) : cfg_(cfg) {
    for (const auto& l : s.layers) {
      vw_.emplace_back(l.in, l.out);
      vb_.emplace_back(static_cast<std::size_t>(l.out), 0.0);
    }
  }

  double lr() const {
    return cfg_.starter_lr * std::pow(cfg_.decay_rate, static_cast<double>(t_) / cfg_.decay_steps);
  }
  std::int64_t steps() const { return t_; }
  const SgdConfig& config() const { return cfg_; }

  void step(Stack& s, const StackGrads& grads) {
    if (s.layers.size() != vw_.size() || grads.layers.size() != vw_.size())
      throw std::runtime_error("sgd: stack/gradient shape mismatch");
    if (!grads.finite())
      throw std::runtime_error("sgd: non-finite gradient at step " + std::to_string(t_) +
                               "; update rejected");
    const double eta = lr();
    for (std::size_t li = 0; li < s.layers.size(); ++li) {
      DenseLayer& l = s.layers[li];
      Mat& vw = vw_[li];
      const Mat& dw = grads.layers[li].dw;
      for (std::size_t i = 0; i < vw.v.size(); ++i) {
        vw.v[i] = cfg_.momentum * vw.v[i] - eta * dw.v[i];
        l.w.v[i] += vw.v[i];
      }
      auto& vb = vb_[li];
      const auto& db = grads.layers[li].db;
      for (std::size_t i = 0; i < vb.size(); ++i) {
        vb[i] = cfg_.momentum * vb[i] - eta * db[i];
        l.b[i] += vb[i];
      }
    }
    ++t_;
  }

 private:
  SgdConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Mat> vw_;
  std::vector<std::vector<double>> vb_;
};

// ---------------------------------------------------------------------------
// Initialization and the three-block model

inline DenseLayer make_dense(int in, int out, Activation act, SplitMix64& rng) {
  DenseLayer l;
  l.in = in;
  l.out = out;
  l.act = act;
  l.w = Mat(in, out);
  l.b.assign(static_cast<std::size_t>(out), 0.0);
  // He-uniform for relu layers, Glorot-uniform for output layers.
  const double limit = act == Activation::relu
                           ? std::sqrt(6.0 / in)
                           : std::sqrt(6.0 / (in + out));
  for (double& x : l.w.v) x = rng.uniform(-limit, limit);
  return l;
}

inline Stack make_stack(std::span<const int> dims, std::span<const Activation> acts,
                        SplitMix64& rng) {
  if (dims.size() < 2 || acts.size() != dims.size() - 1)
    throw std::runtime_error("make_stack: need n+1 dims for n activations");
  Stack s;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    s.layers.push_back(make_dense(dims[i], dims[i + 1], acts[i], rng));
  s.validate();
  return s;
}

/// Encoder + condition head + speaker head. The speaker head width K is the
/// number of speakers the current training task distinguishes.
struct Model {
  Stack encoder;    // 38 -> 64 -> 128, relu/relu
  Stack cond_head;  // 128 -> 64 -> 2, relu/softmax
  Stack spk_head;   // 128 -> 64 -> K, relu/softmax
};

inline Model make_model(int n_speakers, std::uint64_t seed) {
  if (n_speakers < 2) throw std::runtime_error("make_model: need >= 2 speakers");
  Model m;
  {
    SplitMix64 rng(derive_seed(seed, "encoder"));
    const int dims[] = {kInputDim, kHiddenDim, kEmbedDim};
    const Activation acts[] = {Activation::relu, Activation::relu};
    m.encoder = make_stack(dims, acts, rng);
  }
  {
    SplitMix64 rng(derive_seed(seed, "cond_head"));
    const int dims[] = {kEmbedDim, kHiddenDim, kCondClasses};
    const Activation acts[] = {Activation::relu, Activation::softmax};
    m.cond_head = make_stack(dims, acts, rng);
  }
  {
    SplitMix64 rng(derive_seed(seed, "spk_head"));
    const int dims[] = {kEmbedDim, kHiddenDim, n_speakers};
    const Activation acts[] = {Activation::relu, Activation::softmax};
    m.spk_head = make_stack(dims, acts, rng);
  }
  return m;
}

struct ModelOutput {
  Mat embeddings;
  Mat cond_probs;
  Mat spk_probs;
};

/// Inference-only forward through all three blocks.
inline ModelOutput model_forward(const Model& m, const Mat& x) {
  ModelOutput out;
  out.embeddings = stack_infer(m.encoder, x);
  out.cond_probs = stack_infer(m.cond_head, out.embeddings);
  out.spk_probs = stack_infer(m.spk_head, GradientReversal::forward(out.embeddings));
  return out;
}

// ---------------------------------------------------------------------------
// Parameter bytes (freeze audits, checksums)

inline void append_le64(std::string& out, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::string stack_bytes(const Stack& s) {
  std::string out;
  for (const auto& l : s.layers) {
    for (double x : l.w.v) append_le64(out, x);
    for (double x : l.b) append_le64(out, x);
  }
  return out;
}

inline std::uint64_t stack_checksum(const Stack& s) {
  std::string b = stack_bytes(s);
  return fnv1a64(b.data(), b.size());
}

inline std::uint64_t model_checksum(const Model& m) {
  std::string b = stack_bytes(m.encoder);
  b += stack_bytes(m.cond_head);
  b += stack_bytes(m.spk_head);
  return fnv1a64(b.data(), b.size());
}

}  // namespace despk
