#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "fusion/errors.hpp"

namespace fusion {

// Convex, non-decreasing piecewise polynomial on [0, inf). Segment k covers
// [knots[k], knots[k+1]) (the last segment is unbounded) and stores
// coefficients in the local variable s = t - knots[k]:
//   p_k(t) = sum_i coeffs[k][i] * s^i.
// Only validated descriptions are accepted, so instances stay serializable and
// convexity does not have to be re-checked at evaluation time. Validation is
// grid-sampled per segment plus endpoint/leading-coefficient checks.
class PiecewisePolynomial {
 public:
  PiecewisePolynomial(std::vector<double> knots, std::vector<std::vector<double>> coeffs)
      : knots_(std::move(knots)), coeffs_(std::move(coeffs)) {
    validate();
  }

  static PiecewisePolynomial linear(double value_at_zero, double slope) {
    return PiecewisePolynomial({0.0}, {{value_at_zero, slope}});
  }

  double value(double t) const {
    const std::size_t k = segment(t);
    return eval(coeffs_[k], t - knots_[k]);
  }

  // One-sided derivatives; they differ only at interior knots.
  double derivative_right(double t) const {
    const std::size_t k = segment(t);
    return eval_derivative(coeffs_[k], t - knots_[k]);
  }

  double derivative_left(double t) const {
    std::size_t k = segment(t);
    if (k > 0 && t == knots_[k]) --k;
    return eval_derivative(coeffs_[k], t - knots_[k]);
  }

  const std::vector<double>& knots() const { return knots_; }

 private:
  std::size_t segment(double t) const {
    std::size_t k = 0;
    while (k + 1 < knots_.size() && t >= knots_[k + 1]) ++k;
    return k;
  }

  static double eval(const std::vector<double>& c, double s) {
    double v = 0.0;
    for (std::size_t i = c.size(); i-- > 0;) v = v * s + c[i];
    return v;
  }

  static double eval_derivative(const std::vector<double>& c, double s) {
    double v = 0.0;
    for (std::size_t i = c.size(); i-- > 1;) v = v * s + c[i] * static_cast<double>(i);
    return v;
  }

  static double eval_second_derivative(const std::vector<double>& c, double s) {
    double v = 0.0;
    for (std::size_t i = c.size(); i-- > 2;)
      v = v * s + c[i] * static_cast<double>(i) * static_cast<double>(i - 1);
    return v;
  }

  void validate() const {
    if (knots_.empty() || knots_.size() != coeffs_.size())
      throw InvalidParameterError("piecewise polynomial: knots/coefficients mismatch");
    if (knots_.front() != 0.0)
      throw InvalidParameterError("piecewise polynomial: domain must start at 0");
    for (std::size_t k = 0; k + 1 < knots_.size(); ++k)
      if (!(knots_[k] < knots_[k + 1]))
        throw InvalidParameterError("piecewise polynomial: knots must be strictly increasing");
    for (const auto& c : coeffs_) {
      if (c.empty()) throw InvalidParameterError("piecewise polynomial: empty segment");
      for (double x : c)
        if (!std::isfinite(x))
          throw InvalidParameterError("piecewise polynomial: non-finite coefficient");
    }

    const double tol = 1e-9;
    for (std::size_t k = 0; k < knots_.size(); ++k) {
      const double len = (k + 1 < knots_.size())
                             ? knots_[k + 1] - knots_[k]
                             : std::max(1.0, 2.0 * knots_.back() - knots_[k]);
      const int grid = 65;
      for (int i = 0; i <= grid; ++i) {
        const double s = len * static_cast<double>(i) / grid;
        if (eval_derivative(coeffs_[k], s) < -tol)
          throw InvalidParameterError("piecewise polynomial: not non-decreasing");
        if (eval_second_derivative(coeffs_[k], s) < -tol)
          throw InvalidParameterError("piecewise polynomial: not convex");
      }
      // The unbounded tail must stay convex and non-decreasing for all t.
      if (k + 1 == knots_.size() && coeffs_[k].size() >= 2 && coeffs_[k].back() < 0.0)
        throw InvalidParameterError("piecewise polynomial: negative leading coefficient on tail");
    }
    for (std::size_t k = 0; k + 1 < knots_.size(); ++k) {
      const double len = knots_[k + 1] - knots_[k];
      const double left_val = eval(coeffs_[k], len);
      const double right_val = coeffs_[k + 1][0];
      if (std::abs(left_val - right_val) > tol * (1.0 + std::abs(left_val)))
        throw InvalidParameterError("piecewise polynomial: discontinuous at knot");
      if (eval_derivative(coeffs_[k], len) > eval_derivative(coeffs_[k + 1], 0.0) + tol)
        throw InvalidParameterError("piecewise polynomial: derivative decreases across knot");
    }
  }

  std::vector<double> knots_;
  std::vector<std::vector<double>> coeffs_;
};

}  // namespace fusion
