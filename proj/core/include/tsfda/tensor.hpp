#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace tsfda {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Dense n-way array of doubles in row-major order (last index fastest).
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(Shape shape);
  DenseTensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  Index order() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index mode) const { return shape_.at(static_cast<size_t>(mode)); }
  Index size() const { return static_cast<Index>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](Index i) { return data_[static_cast<size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<size_t>(i)]; }

  // Multi-index access; index list length must equal the order.
  double& at(std::initializer_list<Index> idx) { return data_[flat(idx)]; }
  double at(std::initializer_list<Index> idx) const { return data_[flat(idx)]; }

  // Row-major offset helpers for 2-D/3-D hot loops.
  double& at2(Index i, Index j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at2(Index i, Index j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at3(Index i, Index j, Index k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at3(Index i, Index j, Index k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  bool all_finite() const;
  bool same_shape(const DenseTensor& other) const { return shape_ == other.shape_; }

  void fill(double v);

 private:
  size_t flat(std::initializer_list<Index> idx) const;

  Shape shape_;
  std::vector<double> data_;
};

Index shape_numel(const Shape& s);
std::string shape_to_string(const Shape& s);

/// Size-preserving reshape (row-major layout unchanged).
DenseTensor reshape(DenseTensor t, Shape s);

// Elementwise and norm helpers.
double frobenius_norm(const DenseTensor& t);
double frobenius_dist(const DenseTensor& a, const DenseTensor& b);
DenseTensor operator+(const DenseTensor& a, const DenseTensor& b);
DenseTensor operator-(const DenseTensor& a, const DenseTensor& b);
DenseTensor scale(const DenseTensor& a, double s);

// Order-2 helpers (matrices are DenseTensors of order 2).
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);
DenseTensor transpose(const DenseTensor& m);
DenseTensor identity_matrix(Index n);
DenseTensor kronecker(const DenseTensor& a, const DenseTensor& b);

/// Mode-n matricization, Kolda-Bader column ordering: element
/// (i_0,...,i_{N-1}) lands in row i_mode and column
/// sum_{k != mode} i_k * prod_{m<k, m != mode} I_m, i.e. the lowest
/// remaining mode varies fastest along columns.
DenseTensor unfold(const DenseTensor& t, Index mode);

/// Inverse of unfold for the given full tensor shape.
DenseTensor fold(const DenseTensor& m, const Shape& shape, Index mode);

/// Tensor-times-matrix: result extent at `mode` becomes m.rows, and
/// result == fold(matmul(m, unfold(t, mode))).
DenseTensor mode_product(const DenseTensor& t, const DenseTensor& m, Index mode);

struct Svd {
  DenseTensor u;   // (rows, r), orthonormal columns
  DenseTensor s;   // (r,), non-negative, non-increasing
  DenseTensor vt;  // (r, cols)
};

/// Rank-r truncated SVD via eigendecomposition of the Gram matrix of the
/// smaller dimension. Sign convention: the largest-magnitude entry of each
/// left singular vector is positive.
Svd truncated_svd(const DenseTensor& m, Index rank);

struct TuckerFactors {
  DenseTensor core;
  std::vector<DenseTensor> factors;  // factor k pairs with decomposed_modes[k], shape (I_mode, R_mode)
  std::vector<Index> decomposed_modes;
};

struct HooiOptions {
  Index max_iters = 50;
  double tol = 1e-6;  // stop when the relative error improves by less than this
};

struct HooiResult {
  TuckerFactors factors;
  std::vector<double> errors;  // relative reconstruction error after each sweep
};

/// Higher-order orthogonal iteration restricted to `modes`. Initialization is
/// a truncated HOSVD; sweeps alternate truncated SVD updates per mode until
/// the relative error stops improving or max_iters is reached.
HooiResult hooi(const DenseTensor& t, const std::vector<Index>& ranks,
                const std::vector<Index>& modes, const HooiOptions& opts = {});

/// Successive mode products of the core with every factor matrix.
DenseTensor reconstruct(const TuckerFactors& f);

namespace detail {
/// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvalues in
/// non-increasing order, eigenvectors in columns.
void symmetric_eig_descending(const DenseTensor& sym, DenseTensor& eigvals,
                              DenseTensor& eigvecs);
}  // namespace detail

}  // namespace tsfda
