#pragma once

#include <string>
#include <vector>

namespace medseg::stats {

/// Regularized incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);

/// Student t distribution with `dof` degrees of freedom (dof > 0, may be
/// fractional).
double student_t_cdf(double t, double dof);
/// P(|T| >= |t|).
double student_t_two_sided_p(double t, double dof);

struct TTestResult {
  double t = 0.0;
  double dof = 0.0;
  double p_two_sided = 1.0;
  double mean_x = 0.0;
  double mean_y = 0.0;
};

/// Welch's unequal-variance two-sample t-test. Throws DataError when a
/// sample has fewer than two values or zero variance.
TTestResult welch_t_test(const std::vector<double>& x, const std::vector<double>& y);

struct RegressionResult {
  std::vector<std::string> names;  // one per design column
  std::vector<double> coefficients;
  std::vector<double> standard_errors;
  std::vector<double> t_values;
  std::vector<double> p_values;
  std::vector<double> residuals;
  double r_squared = 0.0;
  double sigma = 0.0;  // residual standard error
  int n = 0;
  int dof = 0;
  bool exact_fit = false;

  double coefficient(const std::string& name) const;
  double p_value(const std::string& name) const;
};

/// Ordinary least squares via column-pivoted Householder QR. `design` is
/// row-major n x p and must already contain the intercept column when one is
/// wanted. Throws NumericalError naming collinear columns when the design is
/// rank deficient, DataError when n <= p.
///
/// When the residual sum of squares is at rounding level the fit is flagged
/// exact: standard errors are zero, negligible coefficients get t = 0 and
/// p = 1, the others t = +-inf and p = 0.
RegressionResult ols(const std::vector<double>& y, const std::vector<std::vector<double>>& design,
                     std::vector<std::string> names);

/// Linear-interpolation quantile (Hyndman-Fan type 7) of unsorted data.
double quantile(std::vector<double> values, double q);

struct BoxSummary {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
  int n = 0;
};

BoxSummary box_summary(const std::vector<double>& values);

}  // namespace medseg::stats
