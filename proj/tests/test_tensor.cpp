#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tsfda/rng.hpp"
#include "tsfda/tensor.hpp"

using namespace tsfda;

namespace {

DenseTensor counting_tensor(const Shape& shape) {
  DenseTensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  return t;
}

}  // namespace

TEST_CASE("unfold of the 2x2x2 counting tensor at mode 0") {
  // A[i,j,k] = 4i + 2j + k
  const DenseTensor t = counting_tensor({2, 2, 2});
  const DenseTensor m = unfold(t, 0);
  REQUIRE(m.shape() == Shape{2, 4});
  const std::vector<double> expect0 = {0, 2, 1, 3};
  const std::vector<double> expect1 = {4, 6, 5, 7};
  for (Index j = 0; j < 4; ++j) {
    CHECK(m.at2(0, j) == expect0[static_cast<size_t>(j)]);
    CHECK(m.at2(1, j) == expect1[static_cast<size_t>(j)]);
  }
}

TEST_CASE("fold inverts unfold bit-for-bit on random shapes up to order 4") {
  Rng rng(7);
  const std::vector<Shape> shapes = {{5},      {3, 4},      {2, 3, 4},   {4, 1, 6},
                                     {2, 2, 2}, {3, 2, 4, 2}, {1, 5, 2, 3}};
  for (const Shape& shape : shapes) {
    const DenseTensor t = oracle::random_tensor(shape, rng);
    for (Index mode = 0; mode < static_cast<Index>(shape.size()); ++mode) {
      const DenseTensor back = fold(unfold(t, mode), shape, mode);
      REQUIRE(back.size() == t.size());
      for (Index i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
    }
  }
}

TEST_CASE("unfolding preserves the Frobenius norm at every mode") {
  Rng rng(11);
  const DenseTensor t = oracle::random_tensor({3, 4, 5}, rng);
  double brute = 0;
  for (Index i = 0; i < t.size(); ++i) brute += t[i] * t[i];
  brute = std::sqrt(brute);
  for (Index mode = 0; mode < 3; ++mode)
    CHECK(frobenius_norm(unfold(t, mode)) == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("unfold rejects out-of-range modes") {
  const DenseTensor t = counting_tensor({2, 2});
  CHECK_THROWS_AS(unfold(t, 2), std::invalid_argument);
  CHECK_THROWS_AS(unfold(t, -1), std::invalid_argument);
}

TEST_CASE("mode_product with the identity leaves the tensor unchanged") {
  Rng rng(3);
  const DenseTensor t = oracle::random_tensor({3, 4, 2}, rng);
  for (Index mode = 0; mode < 3; ++mode) {
    const DenseTensor r = mode_product(t, identity_matrix(t.extent(mode)), mode);
    for (Index i = 0; i < t.size(); ++i) CHECK(r[i] == doctest::Approx(t[i]).epsilon(1e-14));
  }
}

TEST_CASE("mode_product with a zero matrix yields the zero tensor of the new shape") {
  Rng rng(4);
  const DenseTensor t = oracle::random_tensor({3, 4, 2}, rng);
  const DenseTensor z({5, 4});  // zero 5x4
  const DenseTensor r = mode_product(t, z, 1);
  CHECK(r.shape() == Shape{3, 5, 2});
  for (Index i = 0; i < r.size(); ++i) CHECK(r[i] == 0.0);
}

TEST_CASE("mode_product with [1,1] at mode 2 sums over mode-2 pairs") {
  const DenseTensor t = counting_tensor({2, 2, 2});
  const DenseTensor ones({1, 2}, {1.0, 1.0});
  const DenseTensor r = mode_product(t, ones, 2);
  REQUIRE(r.shape() == Shape{2, 2, 1});
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) {
      // brute-force sum over the mode-2 index
      const double want = t.at3(i, j, 0) + t.at3(i, j, 1);
      CHECK(r.at3(i, j, 0) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("mode_product dimension mismatch throws") {
  const DenseTensor t = counting_tensor({2, 3, 2});
  CHECK_THROWS_AS(mode_product(t, identity_matrix(2), 1), std::invalid_argument);
}

TEST_CASE("mode_product associates with matrix product") {
  Rng rng(5);
  const DenseTensor t = oracle::random_tensor({4, 3, 5}, rng);
  for (Index mode = 0; mode < 3; ++mode) {
    const DenseTensor m = oracle::random_tensor({6, t.extent(mode)}, rng);
    const DenseTensor n = oracle::random_tensor({2, 6}, rng);
    const DenseTensor lhs = mode_product(mode_product(t, m, mode), n, mode);
    const DenseTensor rhs = mode_product(t, matmul(n, m), mode);
    REQUIRE(lhs.same_shape(rhs));
    for (Index i = 0; i < lhs.size(); ++i)
      CHECK(lhs[i] == doctest::Approx(rhs[i]).epsilon(1e-10));
  }
}

TEST_CASE("truncated svd of diag(3,2,1) at rank 2 leaves residual exactly 1") {
  DenseTensor m({3, 3});
  m.at2(0, 0) = 3;
  m.at2(1, 1) = 2;
  m.at2(2, 2) = 1;
  const Svd svd = truncated_svd(m, 2);
  DenseTensor approx = matmul(svd.u, svd.vt);  // scale rows of vt by s first
  // build u * diag(s) * vt explicitly
  DenseTensor us = svd.u;
  for (Index i = 0; i < us.extent(0); ++i)
    for (Index j = 0; j < us.extent(1); ++j) us.at2(i, j) *= svd.s[j];
  approx = matmul(us, svd.vt);
  CHECK(frobenius_dist(m, approx) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(svd.s[0] == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(svd.s[1] == doctest::Approx(2.0).epsilon(1e-10));
}

TEST_CASE("full-rank truncated svd reconstructs the matrix") {
  Rng rng(9);
  for (const Shape& shape : {Shape{4, 7}, Shape{7, 4}, Shape{5, 5}}) {
    const DenseTensor m = oracle::random_tensor(shape, rng);
    const Index r = std::min(shape[0], shape[1]);
    const Svd svd = truncated_svd(m, r);
    DenseTensor us = svd.u;
    for (Index i = 0; i < us.extent(0); ++i)
      for (Index j = 0; j < us.extent(1); ++j) us.at2(i, j) *= svd.s[j];
    const DenseTensor approx = matmul(us, svd.vt);
    CHECK(frobenius_dist(m, approx) <= 1e-10 * frobenius_norm(m));
  }
}

TEST_CASE("truncated svd residual matches the Eigen reference at rank 2") {
  Rng rng(13);
  const DenseTensor m = oracle::random_tensor({6, 4}, rng);
  const Svd svd = truncated_svd(m, 2);
  DenseTensor us = svd.u;
  for (Index i = 0; i < us.extent(0); ++i)
    for (Index j = 0; j < us.extent(1); ++j) us.at2(i, j) *= svd.s[j];
  const double got = frobenius_dist(m, matmul(us, svd.vt));
  const double want = oracle::best_rank_r_residual(m, 2);
  CHECK(got == doctest::Approx(want).epsilon(1e-8));

  // singular values agree with the reference too
  const auto ref = oracle::eigen_singular_values(m);
  CHECK(svd.s[0] == doctest::Approx(ref[0]).epsilon(1e-8));
  CHECK(svd.s[1] == doctest::Approx(ref[1]).epsilon(1e-8));
}

TEST_CASE("truncated svd orthonormal columns and deterministic signs") {
  Rng rng(17);
  const DenseTensor m = oracle::random_tensor({8, 5}, rng);
  const Svd svd = truncated_svd(m, 3);
  const DenseTensor gram = matmul(transpose(svd.u), svd.u);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j)
      CHECK(gram.at2(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
  // largest-magnitude entry of each left singular vector is positive
  for (Index j = 0; j < 3; ++j) {
    Index arg = 0;
    for (Index i = 1; i < 8; ++i)
      if (std::abs(svd.u.at2(i, j)) > std::abs(svd.u.at2(arg, j))) arg = i;
    CHECK(svd.u.at2(arg, j) > 0.0);
  }
}

TEST_CASE("truncated svd rejects bad ranks and non-finite input") {
  Rng rng(19);
  const DenseTensor m = oracle::random_tensor({4, 4}, rng);
  CHECK_THROWS_AS(truncated_svd(m, 0), std::invalid_argument);
  CHECK_THROWS_AS(truncated_svd(m, 5), std::invalid_argument);
  DenseTensor bad = m;
  bad[3] = std::nan("");
  CHECK_THROWS_AS(truncated_svd(bad, 2), std::invalid_argument);
}

TEST_CASE("hooi recovers a rank-1 tensor exactly at ranks (1,1,1)") {
  Rng rng(23);
  const DenseTensor a = oracle::random_tensor({4}, rng);
  const DenseTensor b = oracle::random_tensor({5}, rng);
  const DenseTensor c = oracle::random_tensor({3}, rng);
  DenseTensor t({4, 5, 3});
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 5; ++j)
      for (Index k = 0; k < 3; ++k) t.at3(i, j, k) = a[i] * b[j] * c[k];
  const HooiResult h = hooi(t, {1, 1, 1}, {0, 1, 2});
  const DenseTensor rec = reconstruct(h.factors);
  CHECK(frobenius_dist(t, rec) <= 1e-10 * frobenius_norm(t));
}

TEST_CASE("hooi at full ranks reconstructs exactly") {
  Rng rng(29);
  const DenseTensor t = oracle::random_tensor({4, 3, 5}, rng);
  const HooiResult h = hooi(t, {4, 3, 5}, {0, 1, 2});
  CHECK(frobenius_dist(t, reconstruct(h.factors)) <= 1e-10 * frobenius_norm(t));
  // factors orthonormal within 1e-8
  for (const DenseTensor& f : h.factors.factors) {
    const DenseTensor gram = matmul(transpose(f), f);
    for (Index i = 0; i < gram.extent(0); ++i)
      for (Index j = 0; j < gram.extent(1); ++j)
        CHECK(gram.at2(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
  }
}

TEST_CASE("hooi on modes {0,1}: errors non-increasing and beat the HOSVD init") {
  Rng rng(31);
  const DenseTensor t = oracle::random_tensor({8, 8, 5}, rng);
  const HooiResult h = hooi(t, {2, 2}, {0, 1});
  REQUIRE(h.errors.size() >= 2);
  for (size_t i = 1; i < h.errors.size(); ++i)
    CHECK(h.errors[i] <= h.errors[i - 1] + 1e-12);
  // HOSVD baseline: one-shot truncated SVDs per mode
  const DenseTensor u0 = truncated_svd(unfold(t, 0), 2).u;
  const DenseTensor u1 = truncated_svd(unfold(t, 1), 2).u;
  DenseTensor core = mode_product(mode_product(t, transpose(u0), 0), transpose(u1), 1);
  TuckerFactors f{core, {u0, u1}, {0, 1}};
  const double hosvd_err = frobenius_dist(t, reconstruct(f)) / frobenius_norm(t);
  CHECK(h.errors.back() <= hosvd_err + 1e-12);
}

TEST_CASE("hooi validates ranks and input") {
  Rng rng(37);
  const DenseTensor t = oracle::random_tensor({3, 3, 3}, rng);
  CHECK_THROWS_AS(hooi(t, {4}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(hooi(t, {0}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(hooi(t, {2, 2}, {0}), std::invalid_argument);
  DenseTensor bad = t;
  bad[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hooi(bad, {2}, {0}), std::invalid_argument);
}

TEST_CASE("reconstruct with identity factors returns the core") {
  Rng rng(41);
  const DenseTensor t = oracle::random_tensor({3, 4, 2}, rng);
  TuckerFactors f{t, {identity_matrix(3), identity_matrix(4), identity_matrix(2)}, {0, 1, 2}};
  const DenseTensor r = reconstruct(f);
  for (Index i = 0; i < t.size(); ++i) CHECK(r[i] == doctest::Approx(t[i]).epsilon(1e-14));
}

TEST_CASE("reconstruct of a zero core is the zero tensor") {
  Rng rng(43);
  TuckerFactors f;
  f.core = DenseTensor({2, 2, 2});
  f.factors = {oracle::random_tensor({5, 2}, rng), oracle::random_tensor({4, 2}, rng)};
  f.decomposed_modes = {0, 1};
  const DenseTensor r = reconstruct(f);
  CHECK(r.shape() == Shape{5, 4, 2});
  for (Index i = 0; i < r.size(); ++i) CHECK(r[i] == 0.0);
}

TEST_CASE("reconstruct matches the brute-force triple sum") {
  Rng rng(47);
  TuckerFactors f;
  f.core = oracle::random_tensor({2, 3, 2}, rng);
  f.factors = {oracle::random_tensor({3, 2}, rng), oracle::random_tensor({3, 3}, rng),
               oracle::random_tensor({3, 2}, rng)};
  f.decomposed_modes = {0, 1, 2};
  const DenseTensor got = reconstruct(f);
  const DenseTensor want =
      oracle::brute_force_tucker3(f.core, f.factors, f.decomposed_modes, {3, 3, 3});
  for (Index i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("reconstruct after partial hooi matches brute force on the same factors") {
  Rng rng(53);
  const DenseTensor t = oracle::random_tensor({4, 5, 3}, rng);
  const HooiResult h = hooi(t, {2, 2}, {0, 1});
  const DenseTensor got = reconstruct(h.factors);
  const DenseTensor want = oracle::brute_force_tucker3(h.factors.core, h.factors.factors,
                                                       h.factors.decomposed_modes, {4, 5, 3});
  for (Index i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("reconstruct(hooi) at full ranks is the identity on random shapes") {
  Rng rng(59);
  for (const Shape& shape : {Shape{3, 4}, Shape{2, 5, 3}, Shape{4, 2, 2}}) {
    const DenseTensor t = oracle::random_tensor(shape, rng);
    std::vector<Index> modes, ranks;
    for (Index m = 0; m < static_cast<Index>(shape.size()); ++m) {
      modes.push_back(m);
      ranks.push_back(shape[static_cast<size_t>(m)]);
    }
    const HooiResult h = hooi(t, ranks, modes);
    CHECK(frobenius_dist(t, reconstruct(h.factors)) <= 1e-10 * std::max(1.0, frobenius_norm(t)));
  }
}
