#include "medseg/stats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "medseg/error.hpp"

namespace medseg::stats {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

// Continued fraction for I_x(a, b) (modified Lentz), valid for
// x < (a + 1) / (a + b + 2).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) return h;
  }
  throw NumericalError("incomplete beta continued fraction did not converge");
}

// I_x(a, b) with 1 - x supplied separately to avoid cancellation.
double incomplete_beta_split(double a, double b, double x, double one_minus_x) {
  if (x <= 0.0) return 0.0;
  if (one_minus_x <= 0.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log(one_minus_x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * beta_continued_fraction(b, a, one_minus_x) / b;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double variance_of(const std::vector<double>& v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw NumericalError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw NumericalError("incomplete beta needs x in [0, 1]");
  return incomplete_beta_split(a, b, x, 1.0 - x);
}

double student_t_two_sided_p(double t, double dof) {
  if (!(dof > 0.0)) throw NumericalError("t distribution needs dof > 0");
  if (std::isnan(t)) throw NumericalError("t statistic is NaN");
  if (std::isinf(t)) return 0.0;
  const double t2 = t * t;
  // x = dof / (dof + t^2), 1 - x = t^2 / (dof + t^2)
  return incomplete_beta_split(dof / 2.0, 0.5, dof / (dof + t2), t2 / (dof + t2));
}

double student_t_cdf(double t, double dof) {
  const double tail = 0.5 * student_t_two_sided_p(t, dof);
  return t >= 0.0 ? 1.0 - tail : tail;
}

TTestResult welch_t_test(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 2 || y.size() < 2) throw DataError("t-test needs at least two values per sample");
  for (const auto* s : {&x, &y})
    for (double v : *s)
      if (!std::isfinite(v)) throw DataError("t-test: non-finite value");
  TTestResult r;
  r.mean_x = mean_of(x);
  r.mean_y = mean_of(y);
  const double vx = variance_of(x, r.mean_x) / static_cast<double>(x.size());
  const double vy = variance_of(y, r.mean_y) / static_cast<double>(y.size());
  if (vx <= 0.0 || vy <= 0.0) throw DataError("t-test: a sample has zero variance");
  r.t = (r.mean_x - r.mean_y) / std::sqrt(vx + vy);
  r.dof = (vx + vy) * (vx + vy) /
          (vx * vx / static_cast<double>(x.size() - 1) + vy * vy / static_cast<double>(y.size() - 1));
  r.p_two_sided = student_t_two_sided_p(r.t, r.dof);
  return r;
}

// ---------------------------------------------------------------------------
// OLS

double RegressionResult::coefficient(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("no regression term named '" + name + "'");
  return coefficients[static_cast<std::size_t>(it - names.begin())];
}

double RegressionResult::p_value(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("no regression term named '" + name + "'");
  return p_values[static_cast<std::size_t>(it - names.begin())];
}

RegressionResult ols(const std::vector<double>& y, const std::vector<std::vector<double>>& design,
                     std::vector<std::string> names) {
  const auto n = static_cast<Eigen::Index>(y.size());
  if (design.size() != y.size()) throw ShapeError("ols: design has a different row count than y");
  if (n == 0) throw DataError("ols: no observations");
  const auto p = static_cast<Eigen::Index>(design.front().size());
  if (p == 0) throw ShapeError("ols: design has no columns");
  if (names.empty())
    for (Eigen::Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j));
  if (static_cast<Eigen::Index>(names.size()) != p) throw ShapeError("ols: one name per column required");
  if (n <= p) throw DataError("ols: need more observations than columns");

  Eigen::MatrixXd X(n, p);
  Eigen::VectorXd Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(design[i].size()) != p) throw ShapeError("ols: ragged design matrix");
    Y(i) = y[i];
    for (Eigen::Index j = 0; j < p; ++j) X(i, j) = design[i][j];
  }
  if (!X.allFinite() || !Y.allFinite()) throw DataError("ols: non-finite input");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < p) {
    std::string cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < p; ++k) cols += (cols.empty() ? "" : ", ") + names[perm(k)];
    throw NumericalError("design matrix is rank deficient; collinear column(s): " + cols);
  }
  const Eigen::VectorXd beta = qr.solve(Y);
  const Eigen::VectorXd resid = Y - X * beta;
  const double rss = resid.squaredNorm();
  const int dof = static_cast<int>(n - p);

  // (X^T X)^-1 = P R^-1 R^-T P^T
  const Eigen::MatrixXd R = qr.matrixR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
  const Eigen::MatrixXd Rinv =
      R.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::MatrixXd cov_perm = Rinv * Rinv.transpose();
  const auto& perm = qr.colsPermutation();
  const Eigen::MatrixXd xtx_inv = perm * cov_perm * perm.transpose();

  RegressionResult r;
  r.names = std::move(names);
  r.n = static_cast<int>(n);
  r.dof = dof;
  const double ynorm2 = Y.squaredNorm();
  r.exact_fit = rss <= static_cast<double>(n) * (64 * kEps) * (64 * kEps) * ynorm2;
  const double sigma2 = r.exact_fit ? 0.0 : rss / dof;
  r.sigma = std::sqrt(sigma2);
  const double ymean = Y.mean();
  const double tss = (Y.array() - ymean).square().sum();
  r.r_squared = tss > 0.0 ? 1.0 - rss / tss : 1.0;
  if (r.exact_fit) r.r_squared = 1.0;

  for (Eigen::Index j = 0; j < p; ++j) {
    const double b = beta(j);
    const double se = std::sqrt(sigma2 * xtx_inv(j, j));
    double t, pv;
    if (r.exact_fit) {
      const double negligible = 64 * kEps * std::sqrt(ynorm2) / std::max(X.col(j).norm(), 1e-300);
      t = std::abs(b) <= negligible ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), b);
      pv = t == 0.0 ? 1.0 : 0.0;
    } else {
      t = b / se;
      pv = student_t_two_sided_p(t, dof);
    }
    r.coefficients.push_back(b);
    r.standard_errors.push_back(se);
    r.t_values.push_back(t);
    r.p_values.push_back(pv);
  }
  r.residuals.assign(resid.data(), resid.data() + n);
  return r;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

BoxSummary box_summary(const std::vector<double>& values) {
  if (values.empty()) throw DataError("box summary of an empty sample");
  BoxSummary s;
  s.n = static_cast<int>(values.size());
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  s.q1 = quantile(values, 0.25);
  s.median = quantile(values, 0.5);
  s.q3 = quantile(values, 0.75);
  return s;
}

}  // namespace medseg::stats
