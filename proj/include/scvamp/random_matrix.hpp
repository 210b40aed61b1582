#pragma once

#include "scvamp/rng.hpp"
#include "scvamp/types.hpp"

#include <Eigen/Dense>

#include <stdexcept>
#include <utility>

namespace scvamp {

/// Haar-distributed n x n orthogonal matrix: QR of an i.i.d. standard
/// Gaussian matrix with the R diagonal forced positive. Without the sign
/// correction the QR output is not Haar.
inline Matrix random_orthogonal(RngStream& rng, Index n) {
  if (n < 1) throw std::invalid_argument("random_orthogonal: n must be >= 1");
  const Matrix g = sample_gaussian_matrix(rng, n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix& packed = qr.matrixQR();
  for (Index j = 0; j < n; ++j)
    if (packed(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

/// M x N right-rotationally-invariant operator stored in factored form
/// A = U diag(d) V^T. Never densified on solver paths; `dense()` exists for
/// small-scale checks.
class SensingMatrix {
 public:
  SensingMatrix(Matrix left_basis, Vector singular_values, Matrix right_basis)
      : u_(std::move(left_basis)), d_(std::move(singular_values)), v_(std::move(right_basis)) {
    if (u_.rows() != u_.cols() || v_.rows() != v_.cols())
      throw std::invalid_argument("SensingMatrix: bases must be square");
    if (d_.size() != std::min(u_.rows(), v_.rows()))
      throw std::invalid_argument("SensingMatrix: singular value count must equal min(m, n)");
    if ((d_.array() < 0.0).any())
      throw std::invalid_argument("SensingMatrix: singular values must be >= 0");
  }

  Index rows() const { return u_.rows(); }
  Index cols() const { return v_.rows(); }
  const Matrix& left_basis() const { return u_; }
  const Matrix& right_basis() const { return v_; }
  const Vector& singular_values() const { return d_; }

  /// A x = U diag(d) (V^T x).
  Vector apply(const Eigen::Ref<const Vector>& x) const {
    if (x.size() != cols()) throw std::invalid_argument("SensingMatrix::apply: dimension mismatch");
    const Index k = d_.size();
    const Vector w = v_.transpose() * x;
    Vector lifted = Vector::Zero(rows());
    lifted.head(k) = d_.cwiseProduct(w.head(k));
    return u_ * lifted;
  }

  /// A^T y = V diag(d) (U^T y).
  Vector apply_transpose(const Eigen::Ref<const Vector>& y) const {
    if (y.size() != rows())
      throw std::invalid_argument("SensingMatrix::apply_transpose: dimension mismatch");
    const Index k = d_.size();
    const Vector t = u_.transpose() * y;
    Vector lifted = Vector::Zero(cols());
    lifted.head(k) = d_.cwiseProduct(t.head(k));
    return v_ * lifted;
  }

  /// Column-batched apply for B problem instances at once.
  Matrix apply_columns(const Eigen::Ref<const Matrix>& x) const {
    if (x.rows() != cols())
      throw std::invalid_argument("SensingMatrix::apply_columns: dimension mismatch");
    const Index k = d_.size();
    const Matrix w = v_.transpose() * x;
    Matrix lifted = Matrix::Zero(rows(), x.cols());
    lifted.topRows(k) = d_.asDiagonal() * w.topRows(k);
    return u_ * lifted;
  }

  Matrix dense() const {
    Matrix dmn = Matrix::Zero(rows(), cols());
    dmn.diagonal().head(d_.size()) = d_;
    return u_ * dmn * v_.transpose();
  }

 private:
  Matrix u_;
  Vector d_;
  Matrix v_;
};

inline SensingMatrix build_rri_matrix(RngStream& rng, Index m, Index n,
                                      const Vector& singular_values) {
  if (m < 1 || n < 1) throw std::invalid_argument("build_rri_matrix: dimensions must be >= 1");
  if (singular_values.size() != std::min(m, n))
    throw std::invalid_argument("build_rri_matrix: singular value count must equal min(m, n)");
  Matrix u = random_orthogonal(rng, m);
  Matrix v = random_orthogonal(rng, n);
  return SensingMatrix(std::move(u), singular_values, std::move(v));
}

/// J = A Xi for an explicit orthogonal Xi; represented by replacing the right
/// basis with Xi^T V, so the spectrum is untouched.
inline SensingMatrix random_modulate_with(const SensingMatrix& a, const Matrix& xi) {
  if (xi.rows() != a.cols() || xi.cols() != a.cols())
    throw std::invalid_argument("random_modulate_with: modulator must be n x n");
  return SensingMatrix(a.left_basis(), a.singular_values(), xi.transpose() * a.right_basis());
}

/// J = A Xi with a fresh Haar Xi.
inline SensingMatrix random_modulate(const SensingMatrix& a, RngStream& rng) {
  return random_modulate_with(a, random_orthogonal(rng, a.cols()));
}

}  // namespace scvamp
