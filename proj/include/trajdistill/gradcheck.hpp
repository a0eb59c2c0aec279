#pragma once

#include "trajdistill/autodiff.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace trajdistill {

/// Central-difference gradient of `f` at `at`. The independent oracle for
/// every reverse-mode gradient in the project.
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& at, double eps);

/// ||a - b|| / max(||a||, ||b||, 1e-10).
double relative_error(const Tensor& analytic, const Tensor& reference);

/// Builds a scalar from a tracked rank-1 input.
using ScalarFn = std::function<Var(const Var&)>;

struct CheckResult {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return rel_error < tolerance; }
};

/// Reverse-mode gradient of fn at `at` vs central differences.
CheckResult check_first_order(const std::string& name, const ScalarFn& fn, const Tensor& at, double eps, double tol);

/// Gradient of s(x) = <grad fn(x), v> taken through a recorded backward pass,
/// vs central differences of s computed with first-order gradients only.
CheckResult check_second_order(const std::string& name, const ScalarFn& fn, const Tensor& at, const Tensor& v,
                               double eps, double tol);

struct OpCase {
  std::string name;
  ScalarFn fn;
  Tensor at;
  bool second_order = true;  // false for piecewise-linear ops
};

/// One case per registered op; each packs its operands into one flat input
/// and contracts the result with fixed random weights.
std::vector<OpCase> op_cases();

struct GradcheckOptions {
  double eps = 1e-5;
  double first_order_tol = 1e-6;
  double second_order_tol = 1e-4;
  /// Extra cases appended to the op suite (used to inject faulty ops).
  std::vector<OpCase> extra_cases;
  bool include_models = true;
};

struct GradcheckReport {
  std::vector<CheckResult> results;
  bool passed() const;
  double max_rel_error() const;
};

/// First-order op checks, second-order op checks, the gradient-penalty
/// parameter gradient, and meta-gradients (pixels and alpha) of a short
/// unrolled alignment on a small MLP.
GradcheckReport run_gradcheck_suite(const GradcheckOptions& options);

/// Meta-gradient check alone; returns (pixels, alpha) results.
std::vector<CheckResult> check_meta_gradient(double eps, double tol, int student_steps);

/// Gradient-penalty parameter gradient on a two-layer MLP.
CheckResult check_penalty_gradient(double eps, double tol);

struct EpsSweep {
  std::vector<double> eps;
  /// Largest error over the penalty and meta-gradient checks at each eps.
  std::vector<double> max_error;

  /// Errors agree within a factor of 10, treating anything below `floor` as
  /// floor (finite-difference noise rather than gradient error).
  bool stable(double floor) const;
};

EpsSweep eps_sweep(std::span<const double> eps, int student_steps);

}  // namespace trajdistill
