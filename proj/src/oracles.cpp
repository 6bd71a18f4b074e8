#include "stflow/oracles.hpp"

#include <algorithm>
#include <cmath>

#include "stflow/errors.hpp"

namespace stflow {

Eigen::MatrixXd numeric_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor work = x.detach();
  auto values = work.mutable_data();
  const Tensor y0 = f(work);
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(y0.size()), static_cast<Eigen::Index>(x.size()));
  for (std::size_t j = 0; j < values.size(); ++j) {
    const double saved = values[j];
    values[j] = saved + eps;
    const Tensor fp = f(work);
    values[j] = saved - eps;
    const Tensor fm = f(work);
    values[j] = saved;
    for (std::size_t i = 0; i < fp.size(); ++i) {
      jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (fp.at(i) - fm.at(i)) / (2.0 * eps);
    }
  }
  return jac;
}

double log_abs_det(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw ShapeError("log_abs_det needs a square matrix");
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  const Eigen::MatrixXd packed = lu.matrixLU();
  double total = 0.0;
  for (Eigen::Index i = 0; i < packed.rows(); ++i) total += std::log(std::abs(packed(i, i)));
  return total;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.shape() != numeric.shape()) throw ShapeError("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.at(i);
    const double n = numeric.at(i);
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

double integrate_2d(const std::function<double(double, double)>& density, double lo, double hi, int n) {
  const double step = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = lo + (i + 0.5) * step;
    for (int j = 0; j < n; ++j) total += density(u, lo + (j + 0.5) * step);
  }
  return total * step * step;
}

}  // namespace stflow
