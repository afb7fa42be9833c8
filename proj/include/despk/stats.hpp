#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

namespace despk {

inline double log_beta(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

namespace detail {

// Continued fraction for the regularized incomplete beta, evaluated with the
// modified Lentz algorithm.
inline double ibeta_cf(double x, double a, double b) {
  const double tiny = 1e-300;
  const double eps = 1e-15;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 200; ++m) {
    double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < eps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0) || !(x >= 0.0 && x <= 1.0))
    throw std::runtime_error("regularized_incomplete_beta: domain error");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  double front = std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta(a, b));
  if (x < (a + 1.0) / (a + b + 2.0))
    return front * detail::ibeta_cf(x, a, b) / a;
  double front_c = std::exp(b * std::log1p(-x) + a * std::log(x) - log_beta(a, b));
  return 1.0 - front_c * detail::ibeta_cf(1.0 - x, b, a) / b;
}

/// CDF of Student's t with df degrees of freedom.
inline double student_t_cdf(double t, double df) {
  if (!(df > 0)) throw std::runtime_error("student_t_cdf: df must be positive");
  if (t == 0.0) return 0.5;
  double x = df / (df + t * t);
  double tail = 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5);
  return t > 0 ? 1.0 - tail : tail;
}

/// Two-tailed p-value for a t statistic.
inline double student_t_two_tailed_p(double t, double df) {
  return regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
}

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool degenerate = false;  // zero variance in both samples
};

enum class TTestKind { pooled, welch };

/// Two-sample Student t-test, two-tailed. The default pools variances; Welch
/// is available behind the flag. Degenerate inputs (zero variance) report
/// p = 1 for equal means and p -> 0 with the degenerate flag set otherwise.
inline TTestResult ttest_two_sample(std::span<const double> a,
                                    std::span<const double> b,
                                    TTestKind kind = TTestKind::pooled) {
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());
  if (a.size() < 2 || b.size() < 2)
    throw std::runtime_error("ttest_two_sample: each sample needs >= 2 values");
  double ma = 0.0, mb = 0.0;
  for (double x : a) ma += x;
  for (double x : b) mb += x;
  ma /= na;
  mb /= nb;
  double va = 0.0, vb = 0.0;  // sample (n-1) variances
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  va /= na - 1.0;
  vb /= nb - 1.0;

  TTestResult r;
  double se2, df;
  if (kind == TTestKind::pooled) {
    double sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
    se2 = sp2 * (1.0 / na + 1.0 / nb);
    df = na + nb - 2.0;
  } else {
    se2 = va / na + vb / nb;
    double num = se2 * se2;
    double den = (va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0);
    df = den > 0 ? num / den : na + nb - 2.0;
  }
  r.df = df;
  if (se2 <= 0.0) {
    r.degenerate = true;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? HUGE_VAL : -HUGE_VAL;
      r.p = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.p = student_t_two_tailed_p(r.t, df);
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population (1/N)
};

inline MeanStd mean_and_population_std(std::span<const double> v) {
  if (v.empty()) throw std::runtime_error("mean_and_population_std: empty input");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size());
  return {m, std::sqrt(var)};
}

}  // namespace despk
