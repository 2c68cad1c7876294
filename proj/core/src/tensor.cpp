#include "tsfda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tsfda {

Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

DenseTensor reshape(DenseTensor t, Shape s) {
  if (shape_numel(s) != t.size())
    throw std::invalid_argument("reshape: element count mismatch for " + shape_to_string(s));
  return DenseTensor(std::move(s), std::move(t.vec()));
}

DenseTensor::DenseTensor(Shape shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<Index>(data_.size()) != shape_numel(shape_))
    throw std::invalid_argument("data length does not match shape " + shape_to_string(shape_));
}

size_t DenseTensor::flat(std::initializer_list<Index> idx) const {
  if (static_cast<Index>(idx.size()) != order())
    throw std::invalid_argument("index arity does not match tensor order");
  Index off = 0;
  size_t m = 0;
  for (Index i : idx) {
    off = off * shape_[m] + i;
    ++m;
  }
  return static_cast<size_t>(off);
}

bool DenseTensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void DenseTensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double frobenius_norm(const DenseTensor& t) {
  double s = 0;
  for (double v : t.vec()) s += v * v;
  return std::sqrt(s);
}

double frobenius_dist(const DenseTensor& a, const DenseTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("frobenius_dist: shape mismatch");
  double s = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

DenseTensor operator+(const DenseTensor& a, const DenseTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("tensor add: shape mismatch");
  DenseTensor r = a;
  for (Index i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}

DenseTensor operator-(const DenseTensor& a, const DenseTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("tensor sub: shape mismatch");
  DenseTensor r = a;
  for (Index i = 0; i < r.size(); ++i) r[i] -= b[i];
  return r;
}

DenseTensor scale(const DenseTensor& a, double s) {
  DenseTensor r = a;
  for (Index i = 0; i < r.size(); ++i) r[i] *= s;
  return r;
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
  if (a.order() != 2 || b.order() != 2) throw std::invalid_argument("matmul expects matrices");
  if (a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul: inner dimensions disagree");
  const Index m = a.extent(0), k = a.extent(1), n = b.extent(1);
  DenseTensor c({m, n});
  for (Index i = 0; i < m; ++i) {
    for (Index p = 0; p < k; ++p) {
      const double aip = a.at2(i, p);
      if (aip == 0.0) continue;
      const double* brow = b.data() + p * n;
      double* crow = c.data() + i * n;
      for (Index j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

DenseTensor transpose(const DenseTensor& m) {
  if (m.order() != 2) throw std::invalid_argument("transpose expects a matrix");
  DenseTensor r({m.extent(1), m.extent(0)});
  for (Index i = 0; i < m.extent(0); ++i)
    for (Index j = 0; j < m.extent(1); ++j) r.at2(j, i) = m.at2(i, j);
  return r;
}

DenseTensor identity_matrix(Index n) {
  DenseTensor r({n, n});
  for (Index i = 0; i < n; ++i) r.at2(i, i) = 1.0;
  return r;
}

DenseTensor kronecker(const DenseTensor& a, const DenseTensor& b) {
  if (a.order() != 2 || b.order() != 2) throw std::invalid_argument("kronecker expects matrices");
  const Index a1 = a.extent(0), a2 = a.extent(1), b1 = b.extent(0), b2 = b.extent(1);
  DenseTensor r({a1 * b1, a2 * b2});
  for (Index i = 0; i < a1; ++i)
    for (Index j = 0; j < a2; ++j) {
      const double av = a.at2(i, j);
      if (av == 0.0) continue;
      for (Index p = 0; p < b1; ++p)
        for (Index q = 0; q < b2; ++q) r.at2(i * b1 + p, j * b2 + q) = av * b.at2(p, q);
    }
  return r;
}

namespace {

// Column index of the fiber (i_0,...,i_{N-1}) with mode n removed, under the
// Kolda-Bader ordering: stride of mode k is prod of extents of modes < k
// excluding n.
struct UnfoldMap {
  std::vector<Index> strides;  // per original mode; stride 0 at `mode`
  Index cols = 1;

  UnfoldMap(const Shape& shape, Index mode) {
    strides.assign(shape.size(), 0);
    Index stride = 1;
    for (size_t k = 0; k < shape.size(); ++k) {
      if (static_cast<Index>(k) == mode) continue;
      strides[k] = stride;
      stride *= shape[k];
    }
    cols = stride;
  }
};

}  // namespace

DenseTensor unfold(const DenseTensor& t, Index mode) {
  if (mode < 0 || mode >= t.order())
    throw std::invalid_argument("unfold: mode out of range for order " +
                                std::to_string(t.order()));
  const Shape& shape = t.shape();
  const UnfoldMap map(shape, mode);
  DenseTensor out({shape[static_cast<size_t>(mode)], map.cols});

  std::vector<Index> idx(shape.size(), 0);
  const Index n = t.size();
  for (Index flat = 0; flat < n; ++flat) {
    Index col = 0;
    for (size_t k = 0; k < shape.size(); ++k) col += idx[k] * map.strides[k];
    out.at2(idx[static_cast<size_t>(mode)], col) = t[flat];
    // advance row-major multi-index
    for (Index k = static_cast<Index>(shape.size()) - 1; k >= 0; --k) {
      if (++idx[static_cast<size_t>(k)] < shape[static_cast<size_t>(k)]) break;
      idx[static_cast<size_t>(k)] = 0;
    }
  }
  return out;
}

DenseTensor fold(const DenseTensor& m, const Shape& shape, Index mode) {
  if (m.order() != 2) throw std::invalid_argument("fold expects a matrix");
  if (mode < 0 || mode >= static_cast<Index>(shape.size()))
    throw std::invalid_argument("fold: mode out of range");
  const UnfoldMap map(shape, mode);
  if (m.extent(0) != shape[static_cast<size_t>(mode)] || m.extent(1) != map.cols)
    throw std::invalid_argument("fold: matrix dimensions do not match target shape");

  DenseTensor out(shape);
  std::vector<Index> idx(shape.size(), 0);
  const Index n = out.size();
  for (Index flat = 0; flat < n; ++flat) {
    Index col = 0;
    for (size_t k = 0; k < shape.size(); ++k) col += idx[k] * map.strides[k];
    out[flat] = m.at2(idx[static_cast<size_t>(mode)], col);
    for (Index k = static_cast<Index>(shape.size()) - 1; k >= 0; --k) {
      if (++idx[static_cast<size_t>(k)] < shape[static_cast<size_t>(k)]) break;
      idx[static_cast<size_t>(k)] = 0;
    }
  }
  return out;
}

DenseTensor mode_product(const DenseTensor& t, const DenseTensor& m, Index mode) {
  if (m.order() != 2) throw std::invalid_argument("mode_product expects a matrix");
  if (mode < 0 || mode >= t.order()) throw std::invalid_argument("mode_product: mode out of range");
  if (m.extent(1) != t.extent(mode))
    throw std::invalid_argument("mode_product: matrix columns (" + std::to_string(m.extent(1)) +
                                ") must equal tensor extent " + std::to_string(t.extent(mode)) +
                                " at mode " + std::to_string(mode));
  Shape out_shape = t.shape();
  out_shape[static_cast<size_t>(mode)] = m.extent(0);
  return fold(matmul(m, unfold(t, mode)), out_shape, mode);
}

namespace detail {

void symmetric_eig_descending(const DenseTensor& sym, DenseTensor& eigvals,
                              DenseTensor& eigvecs) {
  if (sym.order() != 2 || sym.extent(0) != sym.extent(1))
    throw std::invalid_argument("symmetric_eig: square matrix required");
  const Index n = sym.extent(0);
  DenseTensor a = sym;
  DenseTensor v = identity_matrix(n);

  // Cyclic Jacobi sweeps; converges quadratically for symmetric input.
  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) off += a.at2(p, q) * a.at2(p, q);
    if (std::sqrt(off) <= 1e-14 * (1.0 + frobenius_norm(sym))) break;

    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double apq = a.at2(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double app = a.at2(p, p), aqq = a.at2(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double sign = theta >= 0 ? 1.0 : -1.0;
        const double tau = sign / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + tau * tau);
        const double s = tau * c;
        for (Index k = 0; k < n; ++k) {
          const double akp = a.at2(k, p), akq = a.at2(k, q);
          a.at2(k, p) = c * akp - s * akq;
          a.at2(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a.at2(p, k), aqk = a.at2(q, k);
          a.at2(p, k) = c * apk - s * aqk;
          a.at2(q, k) = s * apk + c * aqk;
        }
        for (Index k = 0; k < n; ++k) {
          const double vkp = v.at2(k, p), vkq = v.at2(k, q);
          v.at2(k, p) = c * vkp - s * vkq;
          v.at2(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index x, Index y) { return a.at2(x, x) > a.at2(y, y); });

  eigvals = DenseTensor({n});
  eigvecs = DenseTensor({n, n});
  for (Index j = 0; j < n; ++j) {
    eigvals[j] = a.at2(order[static_cast<size_t>(j)], order[static_cast<size_t>(j)]);
    for (Index i = 0; i < n; ++i) eigvecs.at2(i, j) = v.at2(i, order[static_cast<size_t>(j)]);
  }
}

}  // namespace detail

namespace {

// Flip the sign of column j of u (and row j of vt, if given) so that the
// largest-magnitude entry of the column is positive; ties break on the
// first index, which keeps the convention deterministic.
void fix_signs(DenseTensor& u, DenseTensor* vt) {
  const Index rows = u.extent(0), r = u.extent(1);
  for (Index j = 0; j < r; ++j) {
    Index arg = 0;
    double best = -1;
    for (Index i = 0; i < rows; ++i) {
      const double m = std::abs(u.at2(i, j));
      if (m > best) {
        best = m;
        arg = i;
      }
    }
    if (u.at2(arg, j) < 0) {
      for (Index i = 0; i < rows; ++i) u.at2(i, j) = -u.at2(i, j);
      if (vt)
        for (Index k = 0; k < vt->extent(1); ++k) vt->at2(j, k) = -vt->at2(j, k);
    }
  }
}

}  // namespace

Svd truncated_svd(const DenseTensor& m, Index rank) {
  if (m.order() != 2) throw std::invalid_argument("truncated_svd expects a matrix");
  if (!m.all_finite()) throw std::invalid_argument("truncated_svd: non-finite input");
  const Index rows = m.extent(0), cols = m.extent(1);
  if (rank < 1 || rank > std::min(rows, cols))
    throw std::invalid_argument("truncated_svd: rank " + std::to_string(rank) +
                                " out of range for " + std::to_string(rows) + "x" +
                                std::to_string(cols));

  DenseTensor eigvals, eigvecs;
  Svd out;
  out.s = DenseTensor({rank});
  const double cutoff = 1e-14 * frobenius_norm(m);

  if (rows <= cols) {
    detail::symmetric_eig_descending(matmul(m, transpose(m)), eigvals, eigvecs);
    out.u = DenseTensor({rows, rank});
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < rank; ++j) out.u.at2(i, j) = eigvecs.at2(i, j);
    // sigma recomputed as ||A^T u_j||: backward-stable where sqrt(lambda) is not
    out.vt = DenseTensor({rank, cols});
    for (Index j = 0; j < rank; ++j) {
      double norm = 0;
      for (Index k = 0; k < cols; ++k) {
        double acc = 0;
        for (Index i = 0; i < rows; ++i) acc += out.u.at2(i, j) * m.at2(i, k);
        out.vt.at2(j, k) = acc;
        norm += acc * acc;
      }
      out.s[j] = std::sqrt(norm);
      if (out.s[j] > cutoff)
        for (Index k = 0; k < cols; ++k) out.vt.at2(j, k) /= out.s[j];
      else
        for (Index k = 0; k < cols; ++k) out.vt.at2(j, k) = 0.0;
    }
  } else {
    detail::symmetric_eig_descending(matmul(transpose(m), m), eigvals, eigvecs);
    out.vt = DenseTensor({rank, cols});
    for (Index j = 0; j < rank; ++j)
      for (Index k = 0; k < cols; ++k) out.vt.at2(j, k) = eigvecs.at2(k, j);
    out.u = DenseTensor({rows, rank});
    for (Index j = 0; j < rank; ++j) {
      double norm = 0;
      for (Index i = 0; i < rows; ++i) {
        double acc = 0;
        for (Index k = 0; k < cols; ++k) acc += m.at2(i, k) * out.vt.at2(j, k);
        out.u.at2(i, j) = acc;
        norm += acc * acc;
      }
      out.s[j] = std::sqrt(norm);
      if (out.s[j] > cutoff)
        for (Index i = 0; i < rows; ++i) out.u.at2(i, j) /= out.s[j];
      else
        for (Index i = 0; i < rows; ++i) out.u.at2(i, j) = 0.0;
    }
    // one modified Gram-Schmidt pass restores pairwise orthogonality lost to
    // eigenvector round-off amplified by small singular values
    for (Index j = 0; j < rank; ++j) {
      for (Index p = 0; p < j; ++p) {
        double dot = 0;
        for (Index i = 0; i < rows; ++i) dot += out.u.at2(i, p) * out.u.at2(i, j);
        for (Index i = 0; i < rows; ++i) out.u.at2(i, j) -= dot * out.u.at2(i, p);
      }
      double norm = 0;
      for (Index i = 0; i < rows; ++i) norm += out.u.at2(i, j) * out.u.at2(i, j);
      norm = std::sqrt(norm);
      if (norm > 1e-300)
        for (Index i = 0; i < rows; ++i) out.u.at2(i, j) /= norm;
    }
  }
  fix_signs(out.u, &out.vt);
  return out;
}

namespace {

void validate_hooi_args(const DenseTensor& t, const std::vector<Index>& ranks,
                        const std::vector<Index>& modes) {
  if (!t.all_finite()) throw std::invalid_argument("hooi: non-finite input tensor");
  if (modes.empty()) throw std::invalid_argument("hooi: at least one mode required");
  if (ranks.size() != modes.size())
    throw std::invalid_argument("hooi: ranks and modes must pair up");
  for (size_t i = 0; i < modes.size(); ++i) {
    const Index mode = modes[i];
    if (mode < 0 || mode >= t.order()) throw std::invalid_argument("hooi: mode out of range");
    if (ranks[i] < 1 || ranks[i] > t.extent(mode))
      throw std::invalid_argument("hooi: invalid rank " + std::to_string(ranks[i]) +
                                  " for mode " + std::to_string(mode) + " with extent " +
                                  std::to_string(t.extent(mode)));
    for (size_t j = i + 1; j < modes.size(); ++j)
      if (modes[j] == mode) throw std::invalid_argument("hooi: duplicate mode");
  }
}

// Contract t with the transpose of every listed factor except `skip`
// (skip < 0 contracts all): B = t x_k U_k^T.
DenseTensor project_except(const DenseTensor& t, const std::vector<DenseTensor>& factors,
                           const std::vector<Index>& modes, Index skip) {
  DenseTensor b = t;
  for (size_t k = 0; k < modes.size(); ++k) {
    if (static_cast<Index>(k) == skip) continue;
    b = mode_product(b, transpose(factors[k]), modes[k]);
  }
  return b;
}

}  // namespace

HooiResult hooi(const DenseTensor& t, const std::vector<Index>& ranks,
                const std::vector<Index>& modes, const HooiOptions& opts) {
  validate_hooi_args(t, ranks, modes);
  if (opts.max_iters < 1) throw std::invalid_argument("hooi: max_iters must be >= 1");

  const double t_norm = frobenius_norm(t);

  // A mode's unfolding bounds its numerical rank at min(rows, cols); requests
  // beyond that keep their declared width via an orthonormal completion of
  // the column space, so factor shapes always match the requested ranks.
  auto svd_u_with_completion = [](const DenseTensor& m, Index r) {
    const Index cap = std::min(m.extent(0), m.extent(1));
    DenseTensor u = truncated_svd(m, std::min(r, cap)).u;
    if (r <= cap) return u;
    const Index rows = m.extent(0);
    DenseTensor out({rows, r});
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cap; ++j) out.at2(i, j) = u.at2(i, j);
    Index have = cap;
    for (Index cand = 0; cand < rows && have < r; ++cand) {
      // Gram-Schmidt of the standard basis vector e_cand against the columns
      std::vector<double> v(static_cast<size_t>(rows), 0.0);
      v[static_cast<size_t>(cand)] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (Index j = 0; j < have; ++j) {
          double dot = 0;
          for (Index i = 0; i < rows; ++i) dot += v[static_cast<size_t>(i)] * out.at2(i, j);
          for (Index i = 0; i < rows; ++i) v[static_cast<size_t>(i)] -= dot * out.at2(i, j);
        }
      double norm = 0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (Index i = 0; i < rows; ++i) out.at2(i, have) = v[static_cast<size_t>(i)] / norm;
      ++have;
    }
    if (have < r) throw std::logic_error("hooi: orthonormal completion failed");
    return out;
  };

  // HOSVD initialization: one-shot truncated SVD per mode of the raw tensor.
  std::vector<DenseTensor> factors;
  factors.reserve(modes.size());
  for (size_t k = 0; k < modes.size(); ++k)
    factors.push_back(svd_u_with_completion(unfold(t, modes[k]), ranks[k]));

  // Relative error computed directly on the reconstruction; the projection
  // identity ||t||^2 - ||core||^2 amplifies factor round-off near zero error.
  auto rel_error = [&](const TuckerFactors& f) {
    if (t_norm == 0.0) return 0.0;
    return frobenius_dist(t, reconstruct(f)) / t_norm;
  };

  HooiResult res;
  auto assemble = [&]() {
    TuckerFactors f;
    f.core = project_except(t, factors, modes, -1);
    f.factors = factors;
    f.decomposed_modes = modes;
    return f;
  };
  TuckerFactors current = assemble();
  double err = rel_error(current);
  res.errors.push_back(err);

  for (Index it = 0; it < opts.max_iters; ++it) {
    for (size_t k = 0; k < modes.size(); ++k) {
      const DenseTensor b = project_except(t, factors, modes, static_cast<Index>(k));
      factors[k] = svd_u_with_completion(unfold(b, modes[k]), ranks[k]);
    }
    current = assemble();
    const double new_err = rel_error(current);
    res.errors.push_back(new_err);
    const bool converged = (err - new_err) < opts.tol * std::max(1.0, err);
    err = new_err;
    if (converged) break;
  }

  res.factors = std::move(current);
  return res;
}

DenseTensor reconstruct(const TuckerFactors& f) {
  if (f.factors.size() != f.decomposed_modes.size())
    throw std::invalid_argument("reconstruct: factors and modes must pair up");
  DenseTensor out = f.core;
  for (size_t k = 0; k < f.factors.size(); ++k) {
    const Index mode = f.decomposed_modes[k];
    if (mode < 0 || mode >= out.order())
      throw std::invalid_argument("reconstruct: mode out of range");
    if (f.factors[k].order() != 2 || f.factors[k].extent(1) != out.extent(mode))
      throw std::invalid_argument("reconstruct: factor shape mismatch at mode " +
                                  std::to_string(mode));
    out = mode_product(out, f.factors[k], mode);
  }
  return out;
}

}  // namespace tsfda
