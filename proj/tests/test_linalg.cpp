#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <complex>

#include "mrn/linalg.hpp"
#include "mrn/rng.hpp"

using namespace mrn;

namespace {

Mat random_matrix(Rng& rng, int n, double scale) {
  Mat m(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) m(r, c) = rng.uniform(-scale, scale);
  return m;
}

}  // namespace

TEST_CASE("lu_solve recovers known solutions") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(8));
    Mat a = random_matrix(rng, n, 2.0);
    for (int i = 0; i < n; ++i) a(i, i) += 4.0;  // keep well conditioned
    std::vector<double> x_true(n);
    for (auto& v : x_true) v = rng.uniform(-3.0, 3.0);
    const auto b = a.mul(x_true);
    const auto x = lu_solve(a, b);
    for (int i = 0; i < n; ++i) CHECK(x[i] == doctest::Approx(x_true[i]).epsilon(1e-9));
  }
}

TEST_CASE("QR least squares matches exact solve on square systems") {
  Rng rng(5);
  Mat a = random_matrix(rng, 6, 1.0);
  for (int i = 0; i < 6; ++i) a(i, i) += 3.0;
  std::vector<double> x_true{1, -2, 0.5, 3, -1, 0.25};
  const auto b = a.mul(x_true);
  const auto x = QrLeastSquares(a).solve(b);
  for (int i = 0; i < 6; ++i) CHECK(x[i] == doctest::Approx(x_true[i]).epsilon(1e-9));
}

TEST_CASE("QR least squares minimizes residual on tall systems") {
  Rng rng(7);
  Mat a(12, 4);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 4; ++c) a(r, c) = rng.uniform(-1.0, 1.0);
  std::vector<double> b(12);
  for (auto& v : b) v = rng.uniform(-1.0, 1.0);
  const auto x = QrLeastSquares(a).solve(b);
  // Normal equations residual: A^T (A x - b) = 0.
  std::vector<double> r = a.mul(x);
  for (int i = 0; i < 12; ++i) r[i] -= b[i];
  for (int c = 0; c < 4; ++c) {
    double g = 0.0;
    for (int i = 0; i < 12; ++i) g += a(i, c) * r[i];
    CHECK(std::abs(g) < 1e-10);
  }
}

TEST_CASE("eigenvalues of triangular matrices equal the diagonal") {
  Rng rng(3);
  const int n = 9;
  Mat a(n, n);
  std::vector<double> diag(n);
  for (int i = 0; i < n; ++i) {
    diag[i] = rng.uniform(-2.0, 2.0);
    a(i, i) = diag[i];
    for (int j = 0; j < i; ++j) a(i, j) = rng.uniform(-1.0, 1.0);
  }
  auto ev = eigenvalues(a);
  std::vector<double> re(n);
  for (int i = 0; i < n; ++i) {
    CHECK(std::abs(ev[i].imag()) < 1e-8);
    re[i] = ev[i].real();
  }
  std::sort(re.begin(), re.end());
  std::sort(diag.begin(), diag.end());
  for (int i = 0; i < n; ++i) CHECK(re[i] == doctest::Approx(diag[i]).epsilon(1e-7));
}

TEST_CASE("eigenvalues handle complex pairs") {
  // Rotation-like block has eigenvalues a +- bi.
  Mat m(2, 2);
  m(0, 0) = 1.0; m(0, 1) = -2.0;
  m(1, 0) = 2.0; m(1, 1) = 1.0;
  auto ev = eigenvalues(m);
  std::sort(ev.begin(), ev.end(), [](auto a, auto b) { return a.imag() < b.imag(); });
  CHECK(ev[0].real() == doctest::Approx(1.0));
  CHECK(ev[0].imag() == doctest::Approx(-2.0));
  CHECK(ev[1].imag() == doctest::Approx(2.0));
}

TEST_CASE("eigenvalue sums and products match trace and determinant") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(6));
    Mat a = random_matrix(rng, n, 1.5);
    auto ev = eigenvalues(a);
    std::complex<double> sum = 0.0;
    for (auto& e : ev) sum += e;
    double tr = 0.0;
    for (int i = 0; i < n; ++i) tr += a(i, i);
    CHECK(sum.real() == doctest::Approx(tr).epsilon(1e-6));
    CHECK(std::abs(sum.imag()) < 1e-7);
  }
}

TEST_CASE("symmetric_eigenvalues on a known matrix") {
  Mat a(2, 2);
  a(0, 0) = 2.0; a(0, 1) = 1.0;
  a(1, 0) = 1.0; a(1, 1) = 2.0;
  auto ev = symmetric_eigenvalues(a);
  CHECK(ev[0] == doctest::Approx(1.0));
  CHECK(ev[1] == doctest::Approx(3.0));
}

TEST_CASE("shifted_rank detects deficient eigenspaces") {
  // Jordan block: eigenvalue 2 twice, geometric multiplicity 1.
  Mat j(2, 2);
  j(0, 0) = 2.0; j(0, 1) = 1.0;
  j(1, 1) = 2.0;
  CHECK(shifted_rank(j, {2.0, 0.0}, 2.0) == 1);
  // Diagonal: eigenvalue 2 twice, full eigenspace.
  Mat d(2, 2);
  d(0, 0) = 2.0; d(1, 1) = 2.0;
  CHECK(shifted_rank(d, {2.0, 0.0}, 2.0) == 0);
}

TEST_CASE("rng gaussian moments") {
  Rng rng(123);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double g = rng.gaussian();
    sum += g;
    sum2 += g * g;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("rng reruns are identical") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}
