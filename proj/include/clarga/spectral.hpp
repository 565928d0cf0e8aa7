#pragma once

#include <Eigen/Dense>

#include "clarga/errors.hpp"
#include "clarga/tensor.hpp"

namespace clarga {

// Largest singular value of a 2-D tensor.
inline double spectral_norm(const Tensor& w) {
  if (w.rank() != 2) {
    throw ShapeError("spectral_norm: expected a matrix, got " +
                     shape_str(w.shape()));
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      m(w.data().data(), static_cast<Eigen::Index>(w.dim(0)),
        static_cast<Eigen::Index>(w.dim(1)));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

// Divides w in place by max(1, ||w||_2 / target) so its operator norm is at
// most target. Returns the factor applied.
inline double spectral_rescale(Tensor& w, double target = 1.0) {
  const double s = spectral_norm(w);
  if (s <= target) return 1.0;
  const double f = target / s;
  for (double& v : w.mutable_data()) v *= f;
  return f;
}

}  // namespace clarga
