#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cotprobe/error.hpp"

namespace cotprobe {

// Regularized incomplete beta I_x(a, b) by the modified Lentz continued
// fraction, using the symmetry relation where the fraction converges slowly.
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ArgumentError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw ArgumentError("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;

  const auto fraction = [](double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
      const double m2 = 2.0 * m;
      double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0 / d;
      h *= d * c;
      aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0 / d;
      const double del = d * c;
      h *= del;
      if (std::abs(del - 1.0) < eps) return h;
    }
    throw NumericError("incomplete_beta: continued fraction did not converge");
  };

  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * fraction(a, b, x) / a;
  return 1.0 - front * fraction(b, a, 1.0 - x) / b;
}

// Upper tail P(F > f) of the F(df1, df2) distribution.
inline double f_tail_probability(double f, int df1, int df2) {
  if (df1 < 1 || df2 < 1) throw ArgumentError("f_tail_probability: degrees of freedom must be >= 1");
  if (std::isnan(f) || f < 0.0) throw ArgumentError("f_tail_probability: f must be >= 0");
  if (f == 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  const double d1 = df1;
  const double d2 = df2;
  return incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

// I x J measurements; rows are inference models, columns CoT sources.
class CellTable {
 public:
  CellTable(std::vector<std::string> row_ids, std::vector<std::string> col_ids)
      : rows_(std::move(row_ids)),
        cols_(std::move(col_ids)),
        values_(rows_.size() * cols_.size()) {}

  std::size_t rows() const noexcept { return rows_.size(); }
  std::size_t cols() const noexcept { return cols_.size(); }
  const std::vector<std::string>& row_ids() const noexcept { return rows_; }
  const std::vector<std::string>& col_ids() const noexcept { return cols_; }

  void set(std::size_t i, std::size_t j, double v) { values_.at(i * cols() + j) = v; }
  const std::optional<double>& at(std::size_t i, std::size_t j) const {
    return values_.at(i * cols() + j);
  }
  double value(std::size_t i, std::size_t j) const {
    const auto& v = at(i, j);
    if (!v) throw IncompleteTableError("cell (" + rows_[i] + ", " + cols_[j] + ") is empty");
    return *v;
  }

  static CellTable from_matrix(const std::vector<std::vector<double>>& m) {
    std::vector<std::string> r;
    std::vector<std::string> c;
    for (std::size_t i = 0; i < m.size(); ++i) r.push_back("r" + std::to_string(i));
    for (std::size_t j = 0; j < (m.empty() ? 0 : m[0].size()); ++j)
      c.push_back("c" + std::to_string(j));
    CellTable t(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i].size() != t.cols()) throw ArgumentError("ragged matrix");
      for (std::size_t j = 0; j < m[i].size(); ++j) t.set(i, j, m[i][j]);
    }
    return t;
  }

 private:
  std::vector<std::string> rows_;
  std::vector<std::string> cols_;
  std::vector<std::optional<double>> values_;
};

struct Contributions {
  double model = 0.0;
  double cot = 0.0;
  double residual = 0.0;
};

struct AnovaResult {
  double ss_model = 0.0;
  double ss_cot = 0.0;
  double ss_residual = 0.0;
  double ss_total = 0.0;
  int df_model = 0;
  int df_cot = 0;
  int df_residual = 0;
  // NaN when undefined (no factor and no residual variance).
  double f_model = std::numeric_limits<double>::quiet_NaN();
  double f_cot = std::numeric_limits<double>::quiet_NaN();
  double p_model = std::numeric_limits<double>::quiet_NaN();
  double p_cot = std::numeric_limits<double>::quiet_NaN();
  // Unrounded percentages; empty when there is no variance to attribute.
  std::optional<Contributions> pct;
};

namespace detail {

inline void f_and_p(double ss, int df, double ms_res, int df_res, double& f, double& p) {
  if (ms_res > 0.0) {
    f = (ss / df) / ms_res;
    p = f_tail_probability(f, df, df_res);
  } else if (ss > 0.0) {
    f = std::numeric_limits<double>::infinity();
    p = 0.0;
  }
}

}  // namespace detail

// Additive two-way ANOVA, one observation per cell. In this balanced design
// the Type-II sums of squares reduce to the classical marginal-mean forms.
inline AnovaResult fit_additive(const CellTable& table) {
  const std::size_t I = table.rows();
  const std::size_t J = table.cols();
  if (I < 2 || J < 2)
    throw DegeneracyError("fit_additive: need at least 2 levels per factor, got " +
                          std::to_string(I) + "x" + std::to_string(J));
  std::string missing;
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j)
      if (!table.at(i, j))
        missing += (missing.empty() ? "" : ", ") + std::string("(") + table.row_ids()[i] + ", " +
                   table.col_ids()[j] + ")";
  if (!missing.empty()) throw IncompleteTableError("fit_additive: missing cells " + missing);

  AnovaResult r;
  r.df_model = static_cast<int>(I - 1);
  r.df_cot = static_cast<int>(J - 1);
  r.df_residual = static_cast<int>((I - 1) * (J - 1));

  const double first = table.value(0, 0);
  bool constant = true;
  double grand = 0.0;
  double sum_sq = 0.0;
  std::vector<double> row_mean(I, 0.0);
  std::vector<double> col_mean(J, 0.0);
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j) {
      const double y = table.value(i, j);
      constant = constant && y == first;
      row_mean[i] += y;
      col_mean[j] += y;
      grand += y;
      sum_sq += y * y;
    }
  if (constant) return r;

  for (double& m : row_mean) m /= static_cast<double>(J);
  for (double& m : col_mean) m /= static_cast<double>(I);
  grand /= static_cast<double>(I * J);

  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j) {
      const double d = table.value(i, j) - grand;
      r.ss_total += d * d;
    }
  for (double m : row_mean) r.ss_model += (m - grand) * (m - grand);
  r.ss_model *= static_cast<double>(J);
  for (double m : col_mean) r.ss_cot += (m - grand) * (m - grand);
  r.ss_cot *= static_cast<double>(I);
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j) {
      const double e = table.value(i, j) - row_mean[i] - col_mean[j] + grand;
      r.ss_residual += e * e;
    }

  // Variance at rounding-noise level is treated as none: relative to the data
  // for the total, relative to the total for each component.
  if (r.ss_total <= 1e-20 * sum_sq) {
    r.ss_total = r.ss_model = r.ss_cot = r.ss_residual = 0.0;
    return r;
  }
  for (double* ss : {&r.ss_model, &r.ss_cot, &r.ss_residual})
    if (*ss <= 1e-12 * r.ss_total) *ss = 0.0;

  const double ms_res = r.ss_residual / r.df_residual;
  detail::f_and_p(r.ss_model, r.df_model, ms_res, r.df_residual, r.f_model, r.p_model);
  detail::f_and_p(r.ss_cot, r.df_cot, ms_res, r.df_residual, r.f_cot, r.p_cot);

  r.pct = Contributions{100.0 * r.ss_model / r.ss_total, 100.0 * r.ss_cot / r.ss_total,
                        100.0 * r.ss_residual / r.ss_total};
  return r;
}

inline double round_one_decimal(double pct) { return std::round(pct * 10.0) / 10.0; }

// Percentages rounded half away from zero to one decimal; empty when
// ss_total is zero.
inline std::optional<Contributions> contributions(const AnovaResult& r) {
  if (!(r.ss_total > 0.0)) return std::nullopt;
  return Contributions{round_one_decimal(100.0 * r.ss_model / r.ss_total),
                       round_one_decimal(100.0 * r.ss_cot / r.ss_total),
                       round_one_decimal(100.0 * r.ss_residual / r.ss_total)};
}

}  // namespace cotprobe
