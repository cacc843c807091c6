#pragma once

#include <complex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrn/formation.hpp"
#include "mrn/graph.hpp"
#include "mrn/linalg.hpp"
#include "mrn/vec2.hpp"

namespace mrn {

// Long-run offset oracle for the first-order consensus dynamics: the state
// converges to c*t*1 + s, where s depends on the initial state, the shape,
// and a lag term that solves a singular-consistent linear system on L.
// Used as an independent check against long simulations.
struct SteadyOracle {
  std::vector<Vec2> offset_vector;          // s, per robot
  std::vector<std::complex<double>> eigvals;  // eigenvalues of L
  std::vector<double> left_eig_p1;          // p1: p1^T L = 0, p1^T 1 = 1
  std::vector<double> right_eig_q1;         // q1 = 1
  double min_nonzero_re = 0.0;              // slowest decay rate
};

namespace detail {

// Solve L x = rhs with the normalization p1^T x = 0. The system is singular
// but consistent (p1^T rhs = 0); a stacked least-squares solve pins the
// unique representative.
inline std::vector<double> group_inverse_apply(const Mat& l, const std::vector<double>& p1,
                                               const std::vector<double>& rhs) {
  const int n = l.rows();
  Mat stacked(n + 1, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) stacked(r, c) = l(r, c);
  for (int c = 0; c < n; ++c) stacked(n, c) = p1[c];
  std::vector<double> b(rhs);
  b.push_back(0.0);
  return QrLeastSquares(stacked).solve(b);
}

}  // namespace detail

// Left eigenvector of L for eigenvalue zero, normalized so p1^T 1 = 1.
inline std::vector<double> leader_left_eigenvector(const Mat& l) {
  const int n = l.rows();
  // Solve L^T p = 0 by elimination; the null space is one-dimensional when
  // the graph has a spanning tree.
  Mat lt = l.transposed();
  std::vector<int> pivot_col(n, -1);
  int rank = 0;
  const double tol = 1e-10 * std::max(1.0, lt.max_abs());
  for (int col = 0; col < n && rank < n; ++col) {
    int p = rank;
    for (int r = rank + 1; r < n; ++r)
      if (std::abs(lt(r, col)) > std::abs(lt(p, col))) p = r;
    if (std::abs(lt(p, col)) <= tol) continue;
    if (p != rank)
      for (int c = 0; c < n; ++c) std::swap(lt(p, c), lt(rank, c));
    for (int r = 0; r < n; ++r) {
      if (r == rank) continue;
      const double f = lt(r, col) / lt(rank, col);
      if (f == 0.0) continue;
      for (int c = 0; c < n; ++c) lt(r, c) -= f * lt(rank, c);
    }
    pivot_col[rank++] = col;
  }
  if (rank != n - 1) throw std::runtime_error("leader_left_eigenvector: null space is not one-dimensional");
  std::vector<char> is_pivot(n, 0);
  for (int r = 0; r < rank; ++r) is_pivot[pivot_col[r]] = 1;
  int free_col = -1;
  for (int c = 0; c < n; ++c)
    if (!is_pivot[c]) free_col = c;
  std::vector<double> p(n, 0.0);
  p[free_col] = 1.0;
  for (int r = rank - 1; r >= 0; --r) {
    const int pc = pivot_col[r];
    double acc = -lt(r, free_col);
    for (int c = pc + 1; c < n; ++c)
      if (is_pivot[c]) acc -= lt(r, c) * p[c];
    p[pc] = acc / lt(r, pc);
  }
  double sum = 0.0;
  for (double v : p) sum += v;
  if (std::abs(sum) < 1e-12) throw std::runtime_error("leader_left_eigenvector: degenerate normalization");
  for (double& v : p) v /= sum;
  return p;
}

// Builds the oracle, or reports why it is unavailable (defective repeated
// nonzero eigenvalue).
inline std::optional<SteadyOracle> steady_offset_oracle(const FormationConfig& cfg,
                                                        const std::vector<Vec2>& z0,
                                                        std::string* reject_reason = nullptr) {
  const int n = cfg.n_robots;
  const Mat l = build_laplacian(cfg.adjacency0);
  SteadyOracle oracle;
  oracle.eigvals = eigenvalues(l);
  const double scale = std::max(1.0, l.max_abs());

  // Reject repeated nonzero eigenvalues with a deficient eigenspace.
  for (std::size_t i = 0; i < oracle.eigvals.size(); ++i) {
    const auto li = oracle.eigvals[i];
    if (std::abs(li) < 1e-8 * scale) continue;
    int multiplicity = 0;
    for (const auto& lj : oracle.eigvals)
      if (std::abs(lj - li) < 1e-6 * scale) ++multiplicity;
    if (multiplicity > 1) {
      const int geometric = n - shifted_rank(l, li, scale);
      if (geometric < multiplicity) {
        if (reject_reason) *reject_reason = "defective repeated nonzero eigenvalue";
        return std::nullopt;
      }
    }
  }

  double min_re = 0.0;
  bool first = true;
  for (const auto& ev : oracle.eigvals) {
    if (std::abs(ev) < 1e-8 * scale) continue;
    if (first || ev.real() < min_re) min_re = ev.real();
    first = false;
  }
  oracle.min_nonzero_re = min_re;

  oracle.right_eig_q1.assign(n, 1.0);
  oracle.left_eig_p1 = leader_left_eigenvector(l);

  // Per axis: s = z_leader(0) * 1 + (h - h_leader * 1) + x, where
  // L x = c_axis (e_leader - 1) and x_leader = 0.
  const Vec2 c = cfg.leader_velocity();
  const int lead = cfg.leader_index;
  oracle.offset_vector.assign(n, Vec2{});
  for (int axis = 0; axis < 2; ++axis) {
    const double c_axis = axis == 0 ? c.x : c.y;
    std::vector<double> rhs(n, -c_axis);
    rhs[lead] += c_axis;
    std::vector<double> x = detail::group_inverse_apply(l, oracle.left_eig_p1, rhs);
    const double x_lead = x[lead];
    const double z0_lead = axis == 0 ? z0[lead].x : z0[lead].y;
    const double h_lead = axis == 0 ? cfg.shape_offsets[lead].x : cfg.shape_offsets[lead].y;
    for (int i = 0; i < n; ++i) {
      const double hi = axis == 0 ? cfg.shape_offsets[i].x : cfg.shape_offsets[i].y;
      const double si = z0_lead + (hi - h_lead) + (x[i] - x_lead);
      if (axis == 0)
        oracle.offset_vector[i].x = si;
      else
        oracle.offset_vector[i].y = si;
    }
  }
  return oracle;
}

}  // namespace mrn
