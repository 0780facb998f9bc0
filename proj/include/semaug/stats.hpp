#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "semaug/common.hpp"

namespace semaug {

enum class TestMethod { wilcoxon_exact, wilcoxon_normal_approx, t_one_sample };

inline const char* test_method_name(TestMethod m) {
  switch (m) {
    case TestMethod::wilcoxon_exact: return "wilcoxon_exact";
    case TestMethod::wilcoxon_normal_approx: return "wilcoxon_normal_approx";
    case TestMethod::t_one_sample: return "t_one_sample";
  }
  return "?";
}

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  TestMethod method = TestMethod::t_one_sample;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

namespace detail {

// Continued-fraction evaluation of the regularized incomplete beta via the
// modified Lentz algorithm.
inline double ibeta_cf(double x, double a, double b) {
  const double tiny = 1e-300;
  const double eps = 1e-15;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double f = d;
  for (int m = 1; m <= 300; ++m) {
    const double dm = m;
    // even step
    double num = dm * (b - dm) * x / ((a + 2.0 * dm - 1.0) * (a + 2.0 * dm));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    f *= d * c;
    // odd step
    num = -(a + dm) * (a + b + dm) * x / ((a + 2.0 * dm) * (a + 2.0 * dm + 1.0));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    f *= delta;
    if (std::fabs(delta - 1.0) < eps) break;
  }
  return f;
}

}  // namespace detail

inline double regularized_incomplete_beta(double x, double a, double b) {
  if (!(x >= 0.0 && x <= 1.0) || !(a > 0.0) || !(b > 0.0))
    throw ValidationError("regularized_incomplete_beta: domain error");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta);
  if (x < (a + 1.0) / (a + b + 2.0))
    return front * detail::ibeta_cf(x, a, b) / a;
  return 1.0 - std::exp(b * std::log1p(-x) + a * std::log(x) - log_beta) *
                   detail::ibeta_cf(1.0 - x, b, a) / b;
}

inline double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw ValidationError("student_t_cdf: df must be positive");
  const double x = df / (df + t * t);
  const double half_tail = 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5);
  return t >= 0.0 ? 1.0 - half_tail : half_tail;
}

// Two-sided one-sample Student t-test of H0: mean == mu0.
inline TestResult t_one_sample(const std::vector<double>& values, double mu0) {
  if (values.size() < 2)
    throw ValidationError("t_one_sample: needs at least 2 values, got " +
                          std::to_string(values.size()));
  const std::size_t n = values.size();
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double var = ss / (n - 1);
  if (var <= 0.0) throw ValidationError("t_one_sample: zero sample variance");
  const double t = (mean - mu0) / std::sqrt(var / n);
  const double df = static_cast<double>(n - 1);
  // P(|T| >= |t|) collapses to a single incomplete-beta evaluation.
  const double p = regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
  TestResult r;
  r.statistic = t;
  r.p_value = std::min(1.0, p);
  r.n = n;
  r.method = TestMethod::t_one_sample;
  return r;
}

namespace detail {

// Midranks of |d|; ties share the average rank, so every rank is a multiple
// of 0.5 and doubling yields integers.
inline std::vector<double> abs_midranks(const std::vector<double>& d) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::fabs(d[a]) < std::fabs(d[b]);
  });
  std::vector<double> ranks(d.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && std::fabs(d[order[j]]) == std::fabs(d[order[i]])) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = midrank;
    i = j;
  }
  return ranks;
}

}  // namespace detail

// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences are
// dropped first (Wilcoxon's original treatment). For n <= 25 the p-value is
// exact over all 2^n sign assignments, computed by convolving the doubled
// ranks; beyond that a normal approximation with tie-aware variance and a
// continuity correction is used.
inline TestResult wilcoxon_signed_rank(const std::vector<double>& x,
                                       const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ValidationError("wilcoxon_signed_rank: x and y have different lengths");
  std::vector<double> d;
  d.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - y[i];
    if (diff != 0.0) d.push_back(diff);
  }
  if (d.empty()) throw ValidationError("wilcoxon_signed_rank: all differences are zero");

  const std::vector<double> ranks = detail::abs_midranks(d);
  double w_plus = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0.0) w_plus += ranks[i];

  const std::size_t n = d.size();
  TestResult r;
  r.statistic = w_plus;
  r.n = n;

  if (n <= 25) {
    // Exact null distribution of W+ over doubled (integer) ranks.
    std::vector<long long> dr(n);
    long long total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dr[i] = std::llround(2.0 * ranks[i]);
      total += dr[i];
    }
    std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
    counts[0] = 1.0;
    long long reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      reach += dr[i];
      for (long long s = reach; s >= dr[i]; --s)
        counts[static_cast<std::size_t>(s)] += counts[static_cast<std::size_t>(s - dr[i])];
    }
    const long long w2 = std::llround(2.0 * w_plus);
    double le = 0.0, ge = 0.0, all = 0.0;
    for (long long s = 0; s <= total; ++s) {
      const double c = counts[static_cast<std::size_t>(s)];
      all += c;
      if (s <= w2) le += c;
      if (s >= w2) ge += c;
    }
    r.p_value = std::min(1.0, 2.0 * std::min(le, ge) / all);
    r.method = TestMethod::wilcoxon_exact;
  } else {
    double sum_r = 0.0, sum_r2 = 0.0;
    for (double rk : ranks) {
      sum_r += rk;
      sum_r2 += rk * rk;
    }
    const double mu = sum_r / 2.0;
    const double sd = std::sqrt(sum_r2 / 4.0);
    double z = 0.0;
    const double delta = w_plus - mu;
    if (std::fabs(delta) > 0.5) z = (delta - (delta > 0 ? 0.5 : -0.5)) / sd;
    r.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::fabs(z))));
    r.method = TestMethod::wilcoxon_normal_approx;
  }
  return r;
}

struct BHDecision {
  std::vector<double> raw_p;
  std::vector<double> adjusted_p;
  std::vector<bool> significant;
  double alpha = 0.05;
};

// Benjamini-Hochberg step-up procedure. adjusted_p[i] is the smallest alpha
// at which hypothesis i would be rejected; outputs keep the input order.
inline BHDecision bh_correct(const std::vector<double>& p, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ValidationError("bh_correct: alpha must lie in (0, 1)");
  for (double v : p)
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError("bh_correct: p-value outside [0, 1]");
  if (p.empty()) throw ValidationError("bh_correct: empty p-value list");

  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p[a] != p[b] ? p[a] < p[b] : a < b;
  });

  BHDecision d;
  d.raw_p = p;
  d.alpha = alpha;
  d.adjusted_p.resize(m);
  d.significant.resize(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const double candidate = p[order[k]] * static_cast<double>(m) / static_cast<double>(k + 1);
    running = std::min(running, candidate);
    d.adjusted_p[order[k]] = running;
  }
  for (std::size_t i = 0; i < m; ++i) d.significant[i] = d.adjusted_p[i] <= alpha;
  return d;
}

}  // namespace semaug
