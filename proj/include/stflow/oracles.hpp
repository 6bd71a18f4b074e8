#pragma once

// Independent numerical references used by the verification suite and tests.

#include <Eigen/Dense>

#include <functional>

#include "stflow/tensor.hpp"

namespace stflow {

/// Central-difference Jacobian of a tensor-valued map, [out_dims x in_dims].
Eigen::MatrixXd numeric_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-6);

/// log|det A| from a partial-pivot LU factorization.
double log_abs_det(const Eigen::MatrixXd& a);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor);

/// Midpoint rule over [lo, hi]^2 with n cells per side.
double integrate_2d(const std::function<double(double, double)>& density, double lo, double hi, int n);

}  // namespace stflow
