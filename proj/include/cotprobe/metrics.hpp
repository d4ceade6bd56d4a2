#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotprobe/error.hpp"

namespace cotprobe {

struct MetricTriple {
  int accuracy_hit = 0;
  double jsd = 0.0;
  std::optional<double> spearman_rho;  // empty when a rank vector is constant
};

namespace detail {

inline void check_distribution(std::span<const double> p, const char* what) {
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0)
      throw ArgumentError(std::string(what) + ": entries must be finite and non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ArgumentError(std::string(what) + ": entries must sum to 1");
}

// Lowest index among the maxima.
inline std::size_t argmax(std::span<const double> p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

// Mid-ranks (1-based, ties share the average rank).
inline std::vector<double> mid_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// 1 iff the distribution's argmax (ties -> lowest index) is the majority label.
inline int accuracy_hit(std::span<const double> mjd, std::size_t majority_label) {
  if (mjd.empty() || majority_label >= mjd.size())
    throw ArgumentError("accuracy_hit: arity mismatch");
  return detail::argmax(mjd) == majority_label ? 1 : 0;
}

// Jensen-Shannon distance, base-2 logarithm, in [0, 1].
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ArgumentError("jsd: arity mismatch");
  detail::check_distribution(p, "jsd");
  detail::check_distribution(q, "jsd");
  double kl_p = 0.0;
  double kl_q = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) kl_p += p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) kl_q += q[i] * std::log2(q[i] / m);
  }
  const double div = std::max(0.0, 0.5 * (kl_p + kl_q));
  return std::min(1.0, std::sqrt(div));
}

// Pearson correlation of mid-ranks. Empty when either rank vector is constant.
inline std::optional<double> spearman(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ArgumentError("spearman: arity mismatch");
  if (p.size() < 2) throw ArgumentError("spearman: needs at least two entries");
  const auto rp = detail::mid_ranks(p);
  const auto rq = detail::mid_ranks(q);
  const double mean = (static_cast<double>(p.size()) + 1.0) / 2.0;
  double cov = 0.0;
  double vp = 0.0;
  double vq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = rp[i] - mean;
    const double b = rq[i] - mean;
    cov += a * b;
    vp += a * a;
    vq += b * b;
  }
  if (vp == 0.0 || vq == 0.0) return std::nullopt;
  return std::clamp(cov / std::sqrt(vp * vq), -1.0, 1.0);
}

inline double delta(double start, double last) {
  if (!std::isfinite(start) || !std::isfinite(last))
    throw ArgumentError("delta: values must be finite");
  return last - start;
}

inline MetricTriple evaluate(std::span<const double> mjd, std::span<const double> hjd,
                             std::size_t majority_label) {
  if (mjd.size() != hjd.size()) throw ArgumentError("evaluate: arity mismatch");
  return MetricTriple{accuracy_hit(mjd, majority_label), jsd(mjd, hjd), spearman(mjd, hjd)};
}

}  // namespace cotprobe
