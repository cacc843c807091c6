#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mrn {

// Dense row-major matrix of doubles. Sized for desk-scale problems
// (network inference on a few dozen robots), not for large numerics.
class Mat {
 public:
  Mat() = default;
  Mat(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), a_(static_cast<std::size_t>(rows) * cols, fill) {}

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  double& operator()(int r, int c) { return a_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return a_[static_cast<std::size_t>(r) * cols_ + c]; }

  Mat transposed() const {
    Mat t(cols_, rows_);
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Mat operator*(const Mat& o) const {
    if (cols_ != o.rows_) throw std::invalid_argument("Mat::operator*: shape mismatch");
    Mat out(rows_, o.cols_);
    for (int r = 0; r < rows_; ++r)
      for (int k = 0; k < cols_; ++k) {
        const double v = (*this)(r, k);
        if (v == 0.0) continue;
        for (int c = 0; c < o.cols_; ++c) out(r, c) += v * o(k, c);
      }
    return out;
  }

  Mat operator+(const Mat& o) const {
    Mat out = *this;
    for (std::size_t i = 0; i < a_.size(); ++i) out.a_[i] += o.a_[i];
    return out;
  }

  Mat operator-(const Mat& o) const {
    Mat out = *this;
    for (std::size_t i = 0; i < a_.size(); ++i) out.a_[i] -= o.a_[i];
    return out;
  }

  Mat operator*(double s) const {
    Mat out = *this;
    for (auto& v : out.a_) v *= s;
    return out;
  }

  std::vector<double> mul(const std::vector<double>& x) const {
    std::vector<double> y(rows_, 0.0);
    for (int r = 0; r < rows_; ++r) {
      double acc = 0.0;
      for (int c = 0; c < cols_; ++c) acc += (*this)(r, c) * x[c];
      y[r] = acc;
    }
    return y;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : a_) s += v * v;
    return std::sqrt(s);
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : a_) m = std::max(m, std::abs(v));
    return m;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> a_;
};

// ---------------------------------------------------------------------------
// Square solves.

// LU with partial pivoting; solves A x = b. Throws on (near-)singular A.
inline std::vector<double> lu_solve(Mat a, std::vector<double> b) {
  const int n = a.rows();
  if (a.cols() != n || static_cast<int>(b.size()) != n)
    throw std::invalid_argument("lu_solve: shape mismatch");
  std::vector<int> piv(n);
  for (int i = 0; i < n; ++i) piv[i] = i;
  for (int k = 0; k < n; ++k) {
    int p = k;
    for (int r = k + 1; r < n; ++r)
      if (std::abs(a(r, k)) > std::abs(a(p, k))) p = r;
    if (std::abs(a(p, k)) < 1e-300) throw std::runtime_error("lu_solve: singular matrix");
    if (p != k) {
      for (int c = 0; c < n; ++c) std::swap(a(p, c), a(k, c));
      std::swap(b[p], b[k]);
    }
    for (int r = k + 1; r < n; ++r) {
      const double f = a(r, k) / a(k, k);
      a(r, k) = 0.0;
      if (f == 0.0) continue;
      for (int c = k + 1; c < n; ++c) a(r, c) -= f * a(k, c);
      b[r] -= f * b[k];
    }
  }
  std::vector<double> x(n);
  for (int r = n - 1; r >= 0; --r) {
    double acc = b[r];
    for (int c = r + 1; c < n; ++c) acc -= a(r, c) * x[c];
    x[r] = acc / a(r, r);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Least squares via Householder QR. A is m x n with m >= n and full column
// rank; solves min ||A x - b||_2 for each right-hand side column.

class QrLeastSquares {
 public:
  explicit QrLeastSquares(Mat a) : a_(std::move(a)), m_(a_.rows()), n_(a_.cols()) {
    if (m_ < n_) throw std::invalid_argument("QrLeastSquares: need rows >= cols");
    beta_.resize(n_);
    rdiag_.resize(n_);
    for (int k = 0; k < n_; ++k) {
      double norm = 0.0;
      for (int r = k; r < m_; ++r) norm += a_(r, k) * a_(r, k);
      norm = std::sqrt(norm);
      if (norm == 0.0) {
        beta_[k] = 0.0;
        rdiag_[k] = 0.0;
        continue;
      }
      const double alpha = a_(k, k) > 0.0 ? -norm : norm;
      const double v0 = a_(k, k) - alpha;
      a_(k, k) = v0;
      double vtv = 0.0;
      for (int r = k; r < m_; ++r) vtv += a_(r, k) * a_(r, k);
      beta_[k] = vtv > 0.0 ? 2.0 / vtv : 0.0;
      rdiag_[k] = alpha;
      for (int c = k + 1; c < n_; ++c) {
        double dot = 0.0;
        for (int r = k; r < m_; ++r) dot += a_(r, k) * a_(r, c);
        dot *= beta_[k];
        for (int r = k; r < m_; ++r) a_(r, c) -= dot * a_(r, k);
      }
    }
  }

  double min_abs_rdiag() const {
    double m = rdiag_.empty() ? 0.0 : std::abs(rdiag_[0]);
    for (double v : rdiag_) m = std::min(m, std::abs(v));
    return m;
  }

  std::vector<double> solve(std::vector<double> b) const {
    if (static_cast<int>(b.size()) != m_) throw std::invalid_argument("QrLeastSquares::solve: rhs size");
    for (int k = 0; k < n_; ++k) {
      if (beta_[k] == 0.0) continue;
      double dot = 0.0;
      for (int r = k; r < m_; ++r) dot += a_(r, k) * b[r];
      dot *= beta_[k];
      for (int r = k; r < m_; ++r) b[r] -= dot * a_(r, k);
    }
    std::vector<double> x(n_);
    for (int r = n_ - 1; r >= 0; --r) {
      if (std::abs(rdiag_[r]) < 1e-300) throw std::runtime_error("QrLeastSquares: rank deficient");
      double acc = b[r];
      for (int c = r + 1; c < n_; ++c) acc -= a_(r, c) * x[c];
      x[r] = acc / rdiag_[r];
    }
    return x;
  }

 private:
  mutable Mat a_;
  int m_ = 0;
  int n_ = 0;
  std::vector<double> beta_;
  std::vector<double> rdiag_;
};

// ---------------------------------------------------------------------------
// Eigenvalues of a real square matrix: Householder reduction to Hessenberg
// form, then complex single-shift QR with Wilkinson shifts and deflation.
// Only eigenvalues are needed by callers; eigenvector-dependent quantities
// are obtained through linear solves instead.

namespace detail {

using Cx = std::complex<double>;

inline void hessenberg_inplace(Mat& a) {
  const int n = a.rows();
  for (int k = 0; k < n - 2; ++k) {
    double norm = 0.0;
    for (int r = k + 1; r < n; ++r) norm += a(r, k) * a(r, k);
    norm = std::sqrt(norm);
    if (norm < 1e-300) continue;
    const double alpha = a(k + 1, k) > 0.0 ? -norm : norm;
    std::vector<double> v(n, 0.0);
    v[k + 1] = a(k + 1, k) - alpha;
    for (int r = k + 2; r < n; ++r) v[r] = a(r, k);
    double vtv = 0.0;
    for (int r = k + 1; r < n; ++r) vtv += v[r] * v[r];
    if (vtv < 1e-300) continue;
    const double beta = 2.0 / vtv;
    // A <- H A H with H = I - beta v v^T.
    for (int c = 0; c < n; ++c) {
      double dot = 0.0;
      for (int r = k + 1; r < n; ++r) dot += v[r] * a(r, c);
      dot *= beta;
      for (int r = k + 1; r < n; ++r) a(r, c) -= dot * v[r];
    }
    for (int r = 0; r < n; ++r) {
      double dot = 0.0;
      for (int c = k + 1; c < n; ++c) dot += a(r, c) * v[c];
      dot *= beta;
      for (int c = k + 1; c < n; ++c) a(r, c) -= dot * v[c];
    }
  }
}

}  // namespace detail

inline std::vector<std::complex<double>> eigenvalues(const Mat& m) {
  using detail::Cx;
  const int n = m.rows();
  if (m.cols() != n) throw std::invalid_argument("eigenvalues: matrix not square");
  if (n == 0) return {};
  Mat hr = m;
  detail::hessenberg_inplace(hr);
  std::vector<Cx> h(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) h[static_cast<std::size_t>(r) * n + c] = hr(r, c);
  auto at = [&](int r, int c) -> Cx& { return h[static_cast<std::size_t>(r) * n + c]; };

  std::vector<Cx> eig(n);
  int hi = n - 1;
  int iter_guard = 60 * n;
  const double scale = std::max(1e-300, hr.max_abs());
  while (hi >= 0) {
    if (hi == 0) {
      eig[0] = at(0, 0);
      break;
    }
    // Deflate negligible subdiagonals.
    int lo = hi;
    while (lo > 0) {
      const double sub = std::abs(at(lo, lo - 1));
      if (sub <= 1e-14 * (std::abs(at(lo - 1, lo - 1)) + std::abs(at(lo, lo)) + 1e-30 * scale)) {
        at(lo, lo - 1) = 0.0;
        break;
      }
      --lo;
    }
    if (lo == hi) {
      eig[hi] = at(hi, hi);
      --hi;
      continue;
    }
    if (--iter_guard < 0) throw std::runtime_error("eigenvalues: QR iteration failed to converge");

    // Wilkinson shift from the trailing 2x2 block.
    const Cx a11 = at(hi - 1, hi - 1), a12 = at(hi - 1, hi), a21 = at(hi, hi - 1), a22 = at(hi, hi);
    const Cx tr = a11 + a22;
    const Cx det = a11 * a22 - a12 * a21;
    const Cx disc = std::sqrt(tr * tr - 4.0 * det);
    Cx r1 = 0.5 * (tr + disc), r2 = 0.5 * (tr - disc);
    const Cx mu = std::abs(r1 - a22) < std::abs(r2 - a22) ? r1 : r2;

    // One QR sweep on the active block via Givens rotations.
    std::vector<Cx> cs(hi), sn(hi);
    for (int k = lo; k <= hi; ++k) at(k, k) -= mu;
    for (int k = lo; k < hi; ++k) {
      const Cx x = at(k, k), y = at(k + 1, k);
      const double r = std::sqrt(std::norm(x) + std::norm(y));
      if (r < 1e-300) {
        cs[k] = 1.0;
        sn[k] = 0.0;
        continue;
      }
      cs[k] = x / r;
      sn[k] = y / r;
      for (int c = k; c <= hi; ++c) {
        const Cx t1 = at(k, c), t2 = at(k + 1, c);
        at(k, c) = std::conj(cs[k]) * t1 + std::conj(sn[k]) * t2;
        at(k + 1, c) = -sn[k] * t1 + cs[k] * t2;
      }
    }
    for (int k = lo; k < hi; ++k) {
      for (int r = lo; r <= std::min(hi, k + 2); ++r) {
        const Cx t1 = at(r, k), t2 = at(r, k + 1);
        at(r, k) = t1 * cs[k] + t2 * sn[k];
        at(r, k + 1) = -t1 * std::conj(sn[k]) + t2 * std::conj(cs[k]);
      }
    }
    for (int k = lo; k <= hi; ++k) at(k, k) += mu;
  }
  return eig;
}

// Spectral radius helper.
inline double spectral_radius(const Mat& m) {
  double r = 0.0;
  for (const auto& ev : eigenvalues(m)) r = std::max(r, std::abs(ev));
  return r;
}

// ---------------------------------------------------------------------------
// Symmetric Jacobi eigenvalues (for Gram-matrix conditioning checks).

inline std::vector<double> symmetric_eigenvalues(Mat a) {
  const int n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-24 * std::max(1.0, a.max_abs() * a.max_abs())) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (int i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

// ---------------------------------------------------------------------------
// Rank of (M - lambda I) over the complex field, by Gaussian elimination with
// partial pivoting. Used to detect defective repeated eigenvalues.

inline int shifted_rank(const Mat& m, std::complex<double> lambda, double tol_scale) {
  using detail::Cx;
  const int n = m.rows();
  std::vector<Cx> a(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) a[static_cast<std::size_t>(r) * n + c] = Cx(m(r, c)) - (r == c ? lambda : Cx(0.0));
  auto at = [&](int r, int c) -> Cx& { return a[static_cast<std::size_t>(r) * n + c]; };
  const double tol = 1e-9 * std::max(1.0, tol_scale);
  int rank = 0;
  for (int col = 0; col < n && rank < n; ++col) {
    int p = rank;
    for (int r = rank + 1; r < n; ++r)
      if (std::abs(at(r, col)) > std::abs(at(p, col))) p = r;
    if (std::abs(at(p, col)) <= tol) continue;
    if (p != rank)
      for (int c = col; c < n; ++c) std::swap(at(p, c), at(rank, c));
    for (int r = rank + 1; r < n; ++r) {
      const Cx f = at(r, col) / at(rank, col);
      for (int c = col; c < n; ++c) at(r, c) -= f * at(rank, c);
    }
    ++rank;
  }
  return rank;
}

}  // namespace mrn
