#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "clarga/errors.hpp"
#include "clarga/tensor.hpp"

namespace clarga {

// Streaming mean squared feature norm, (1/n) sum_i ||phi(x_i)||^2.
class EffectiveDimensionAccumulator {
 public:
  void add(const Tensor& features) {
    if (features.rank() != 2) throw ShapeError("d_eff: features must be [n x F]");
    const std::size_t n = features.dim(0), F = features.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < F; ++j) s += features[i * F + j] * features[i * F + j];
      sum_ += s;
    }
    n_ += n;
  }
  std::size_t count() const { return n_; }
  double value() const {
    if (n_ == 0) throw ContractError("d_eff: no features accumulated");
    return sum_ / static_cast<double>(n_);
  }

 private:
  double sum_ = 0.0;
  std::size_t n_ = 0;
};

struct EffectiveDimension {
  double mean_square_norm = 0.0;  // (1/n) sum ||phi||^2
  double trace = 0.0;             // tr((1/n) Phi^T Phi)
  double discrepancy = 0.0;
};

// Both readings of d_eff; they agree up to rounding. Throws NumericalError if
// they differ by more than `tolerance`.
inline EffectiveDimension compute_effective_dimension(const Tensor& features,
                                                      double tolerance = 1e-9) {
  if (features.rank() != 2 || features.dim(0) == 0) {
    throw ContractError("compute_effective_dimension: need a nonempty [n x F] matrix");
  }
  const std::size_t n = features.dim(0), F = features.dim(1);
  EffectiveDimensionAccumulator acc;
  acc.add(features);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      phi(features.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(F));
  const Eigen::MatrixXd second = phi.transpose() * phi / static_cast<double>(n);
  EffectiveDimension out;
  out.mean_square_norm = acc.value();
  out.trace = second.trace();
  out.discrepancy = std::abs(out.mean_square_norm - out.trace);
  if (out.discrepancy > tolerance * std::max(1.0, std::abs(out.trace))) {
    throw NumericalError("d_eff: mean-square norm and trace disagree by " +
                         std::to_string(out.discrepancy));
  }
  return out;
}

}  // namespace clarga
