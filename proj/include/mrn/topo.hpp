#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrn/linalg.hpp"
#include "mrn/observer.hpp"

namespace mrn {

struct RankDeficiencyError : std::runtime_error {
  int deficiency;
  explicit RankDeficiencyError(int d)
      : std::runtime_error("regressor rank deficient by " + std::to_string(d)), deficiency(d) {}
};

// Per-axis stacked regression data. Target column k pairs regressor column
// k-1; both sides have the estimated shape offsets removed, and the target
// additionally removes one transition of the estimated steady drift. The
// drift is removed from every row: the estimated offsets absorb the steady
// tracking lag, under which the whole pattern advances uniformly at c.
//
// Under observation noise the data is block-averaged at `stride` frames per
// transition: the fitted matrix is then the stride-step transition, which
// separates the decaying modes better and carries sqrt(stride) less noise.
struct StackedRegression {
  std::vector<int> ids_h;
  std::vector<int> ids_f;
  Mat y_h[2];  // |H| x (l-1), per axis
  Mat y_f[2];  // |F| x (l-1), per axis
  int stride = 1;
  double step_seconds = 0.0;  // base control step
};

inline StackedRegression build_stacked_regression(const FrameSeries& series,
                                                  const SteadyPatternEstimate& pattern,
                                                  const std::vector<int>& ids_h,
                                                  const std::vector<int>& ids_f, double step_seconds,
                                                  int stride = 1) {
  const FrameSeries d_c = stride > 1 ? series.block_averaged(stride) : series;
  StackedRegression sr;
  sr.ids_h = ids_h;
  sr.ids_f = ids_f;
  sr.stride = stride;
  sr.step_seconds = step_seconds;
  const int l = d_c.size();
  if (l < 2) throw std::invalid_argument("build_stacked_regression: need at least two frames");
  const int cols = l - 1;
  for (int axis = 0; axis < 2; ++axis) {
    sr.y_h[axis] = Mat(static_cast<int>(ids_h.size()), cols);
    sr.y_f[axis] = Mat(static_cast<int>(ids_f.size()), cols);
  }
  const Vec2 cdt = pattern.c_hat * (step_seconds * stride);
  for (int k = 0; k < cols; ++k) {
    for (std::size_t r = 0; r < ids_f.size(); ++r) {
      const int id = ids_f[r];
      const auto h = pattern.h_of(id);
      if (!h) throw std::invalid_argument("build_stacked_regression: no shape estimate for robot");
      const Vec2 v = d_c.at(id, k) - *h;
      sr.y_f[0](static_cast<int>(r), k) = v.x;
      sr.y_f[1](static_cast<int>(r), k) = v.y;
    }
    for (std::size_t r = 0; r < ids_h.size(); ++r) {
      const int id = ids_h[r];
      const auto h = pattern.h_of(id);
      if (!h) throw std::invalid_argument("build_stacked_regression: no shape estimate for robot");
      const Vec2 v = d_c.at(id, k + 1) - *h - cdt;
      sr.y_h[0](static_cast<int>(r), k) = v.x;
      sr.y_h[1](static_cast<int>(r), k) = v.y;
    }
  }
  return sr;
}

struct WEstimate {
  std::vector<int> ids_h;
  std::vector<int> ids_f;
  Mat w;                      // |H| x |F|
  bool constrained = false;
  Mat support_mask;           // 1 where an entry was allowed (constrained solves)
  std::vector<int> row_warnings;  // H-rows left empty by the support mask
  double tau = 1e-6;          // support threshold for sign decisions

  int h_index(int id) const {
    for (std::size_t k = 0; k < ids_h.size(); ++k)
      if (ids_h[k] == id) return static_cast<int>(k);
    return -1;
  }
  int f_index(int id) const {
    for (std::size_t k = 0; k < ids_f.size(); ++k)
      if (ids_f[k] == id) return static_cast<int>(k);
    return -1;
  }

  bool has_row(int id) const { return h_index(id) >= 0; }

  double w_of(int id_i, int id_j) const {
    const int r = h_index(id_i), c = f_index(id_j);
    if (r < 0 || c < 0) return 0.0;
    return w(r, c);
  }

  // Recovered interaction weight (off-diagonal entries scale with the step).
  double a_hat(int id_i, int id_j, double step_seconds) const {
    if (id_i == id_j) return 0.0;
    return w_of(id_i, id_j) / step_seconds;
  }

  bool edge(int id_i, int id_j) const {
    return id_i != id_j && std::abs(w_of(id_i, id_j)) > tau;
  }

  std::vector<int> estimated_in_neighbors(int id_i) const {
    std::vector<int> out;
    for (const int j : ids_f)
      if (edge(id_i, j)) out.push_back(j);
    return out;
  }

  std::vector<int> estimated_out_neighbors(int id_j) const {
    std::vector<int> out;
    for (const int i : ids_h)
      if (edge(i, id_j)) out.push_back(i);
    return out;
  }
};

inline double sign_threshold(double sigma, double step_seconds) {
  return std::max(5.0 * sigma * step_seconds, 1e-6);
}

namespace detail {

// Least squares per H-row on the selected regressor rows; axis solutions are
// averaged (both axes estimate the same matrix).
inline Mat solve_rows(const StackedRegression& sr, const std::vector<std::vector<int>>& allowed) {
  const int nh = static_cast<int>(sr.ids_h.size());
  const int nf = static_cast<int>(sr.ids_f.size());
  const int cols = sr.y_f[0].cols();
  Mat w(nh, nf);
  for (int axis = 0; axis < 2; ++axis) {
    // Cache QR factorizations per distinct support set; rows usually share
    // the all-allowed support.
    for (int r = 0; r < nh; ++r) {
      const auto& sel = allowed[r];
      if (sel.empty()) continue;
      Mat a(cols, static_cast<int>(sel.size()));
      for (int k = 0; k < cols; ++k)
        for (std::size_t c = 0; c < sel.size(); ++c) a(k, static_cast<int>(c)) = sr.y_f[axis](sel[c], k);
      std::vector<double> b(cols);
      for (int k = 0; k < cols; ++k) b[k] = sr.y_h[axis](r, k);
      const auto x = QrLeastSquares(a).solve(b);
      for (std::size_t c = 0; c < sel.size(); ++c) w(r, sel[c]) += 0.5 * x[c];
    }
  }
  return w;
}

// Maps a stride-step transition estimate back to the one-step scale via
// W_1 = I + (W_m - I) / m; entries with id_i == id_j carry the identity.
inline Mat map_transition_to_single_step(const Mat& w_m, const std::vector<int>& ids_h,
                                         const std::vector<int>& ids_f, int stride) {
  if (stride <= 1) return w_m;
  Mat w(w_m.rows(), w_m.cols());
  for (int r = 0; r < w_m.rows(); ++r)
    for (int c = 0; c < w_m.cols(); ++c) {
      const double id = ids_h[r] == ids_f[c] ? 1.0 : 0.0;
      w(r, c) = id + (w_m(r, c) - id) / static_cast<double>(stride);
    }
  return w;
}

}  // namespace detail

// Stride used for noisy estimates: as coarse as the sample condition allows,
// capped at a quarter second of data per transition.
inline int auto_regression_stride(int frames, int n_f, double sigma, double step_seconds) {
  if (sigma <= 0.0) return 1;
  const int cap = std::max(1, static_cast<int>(0.25 / step_seconds));
  const int by_samples = std::max(1, frames / (n_f + 4));
  return std::max(1, std::min(cap, by_samples));
}

// Regression data exactly as lsm_estimate builds it (auto stride included);
// use this when the same data feeds a constrained re-fit.
inline StackedRegression make_regression(const FrameSeries& d_c, const SteadyPatternEstimate& pattern,
                                         const std::vector<int>& ids_h, const std::vector<int>& ids_f,
                                         double step_seconds, double sigma, int reg_stride = 0) {
  const int stride = reg_stride > 0
                         ? reg_stride
                         : auto_regression_stride(d_c.size(), static_cast<int>(ids_f.size()), sigma,
                                                  step_seconds);
  return build_stacked_regression(d_c, pattern, ids_h, ids_f, step_seconds, stride);
}

// Ordinary least-squares estimate of the interaction rows of the inner set.
// Requires at least |F| + 1 transitions and a numerically invertible
// regressor Gram matrix.
inline WEstimate lsm_estimate(const FrameSeries& d_c, const SteadyPatternEstimate& pattern,
                              const std::vector<int>& ids_h, const std::vector<int>& ids_f,
                              double step_seconds, double sigma, int reg_stride = 0) {
  const StackedRegression sr = make_regression(d_c, pattern, ids_h, ids_f, step_seconds, sigma, reg_stride);
  const int stride = sr.stride;
  const int nf = static_cast<int>(ids_f.size());
  const int cols = sr.y_f[0].cols();
  if (cols + 1 < nf + 1)
    throw std::invalid_argument("lsm_estimate: need at least |F| + 1 frames of data");

  // Gram conditioning check on the pooled axes.
  Mat gram(nf, nf);
  for (int axis = 0; axis < 2; ++axis)
    for (int r = 0; r < nf; ++r)
      for (int c = r; c < nf; ++c) {
        double acc = 0.0;
        for (int k = 0; k < cols; ++k) acc += sr.y_f[axis](r, k) * sr.y_f[axis](c, k);
        gram(r, c) += acc;
        if (c != r) gram(c, r) += acc;
      }
  const auto ev = symmetric_eigenvalues(gram);
  const double lmax = ev.back();
  int deficiency = 0;
  for (const double lv : ev)
    if (lv <= lmax * 1e-10) ++deficiency;
  if (deficiency > 0 || lmax <= 0.0) throw RankDeficiencyError(std::max(1, deficiency));

  WEstimate est;
  est.ids_h = ids_h;
  est.ids_f = ids_f;
  est.tau = sign_threshold(sigma, step_seconds);
  std::vector<std::vector<int>> allowed(ids_h.size());
  for (std::size_t r = 0; r < ids_h.size(); ++r) {
    allowed[r].resize(nf);
    for (int c = 0; c < nf; ++c) allowed[r][c] = c;
  }
  est.w = detail::map_transition_to_single_step(detail::solve_rows(sr, allowed), ids_h, ids_f, stride);
  est.support_mask = Mat(static_cast<int>(ids_h.size()), nf, 1.0);
  return est;
}

// Support-restricted refinement: entries whose observed endpoints are farther
// apart than the learned interaction radius are pinned to zero and the
// remaining coefficients re-fit row by row.
inline WEstimate constrained_refine(const StackedRegression& sr, double r_hat_c,
                                    const std::map<int, Vec2>& last_positions, double step_seconds,
                                    double sigma) {
  WEstimate est;
  est.ids_h = sr.ids_h;
  est.ids_f = sr.ids_f;
  est.tau = sign_threshold(sigma, step_seconds);
  est.constrained = true;
  const int nh = static_cast<int>(sr.ids_h.size());
  const int nf = static_cast<int>(sr.ids_f.size());
  est.support_mask = Mat(nh, nf);
  std::vector<std::vector<int>> allowed(nh);
  for (int r = 0; r < nh; ++r) {
    const auto pi = last_positions.find(sr.ids_h[r]);
    for (int c = 0; c < nf; ++c) {
      if (sr.ids_h[r] == sr.ids_f[c]) {
        allowed[r].push_back(c);
        est.support_mask(r, c) = 1.0;
        continue;
      }
      const auto pj = last_positions.find(sr.ids_f[c]);
      if (pi == last_positions.end() || pj == last_positions.end()) continue;
      if (distance(pi->second, pj->second) <= r_hat_c) {
        allowed[r].push_back(c);
        est.support_mask(r, c) = 1.0;
      }
    }
    if (allowed[r].empty()) est.row_warnings.push_back(sr.ids_h[r]);
  }
  est.w = detail::map_transition_to_single_step(detail::solve_rows(sr, allowed), sr.ids_h, sr.ids_f,
                                                sr.stride);
  return est;
}

// Instrumental-variables estimate of the same transition rows. Observation
// noise enters both sides of the least-squares model and shrinks the plain
// solution toward zero; lagged observations are noise-orthogonal instruments
// and remove that bias at some variance cost. Used as the attacker's working
// estimate behind the excitation and replacement stages.
inline WEstimate iv_estimate(const FrameSeries& d_c, const SteadyPatternEstimate& pattern,
                             const std::vector<int>& ids_h, const std::vector<int>& ids_f,
                             double step_seconds, double sigma, int reg_stride = 0,
                             const Mat* support = nullptr) {
  const StackedRegression sr = make_regression(d_c, pattern, ids_h, ids_f, step_seconds, sigma, reg_stride);
  const int nf = static_cast<int>(ids_f.size());
  const int nh = static_cast<int>(ids_h.size());
  const int cols = sr.y_f[0].cols();
  if (cols < nf + 2) throw std::invalid_argument("iv_estimate: not enough transitions");

  WEstimate est;
  est.ids_h = ids_h;
  est.ids_f = ids_f;
  est.tau = sign_threshold(sigma, step_seconds);
  est.support_mask = Mat(nh, nf, support ? 0.0 : 1.0);
  Mat w_m(nh, nf);
  for (int r = 0; r < nh; ++r) {
    std::vector<int> sel;
    for (int c = 0; c < nf; ++c) {
      if (!support || (*support)(r, c) > 0.0 || ids_h[r] == ids_f[c]) {
        sel.push_back(c);
        if (support) est.support_mask(r, c) = 1.0;
      }
    }
    const int ns = static_cast<int>(sel.size());
    // Moment system: sum over axes and transitions of z (t - x' y0) = 0,
    // with instrument z = previous-frame regressor.
    Mat m(ns, ns);
    std::vector<double> b(ns, 0.0);
    for (int axis = 0; axis < 2; ++axis)
      for (int k = 1; k < cols; ++k) {
        for (int a = 0; a < ns; ++a) {
          const double z_a = sr.y_f[axis](sel[a], k - 1);
          b[a] += z_a * sr.y_h[axis](r, k);
          for (int c = 0; c < ns; ++c) m(a, c) += z_a * sr.y_f[axis](sel[c], k);
        }
      }
    const auto x = lu_solve(m, b);
    for (int c = 0; c < ns; ++c) w_m(r, sel[c]) = x[c];
  }
  est.w = detail::map_transition_to_single_step(w_m, ids_h, ids_f, sr.stride);
  est.constrained = support != nullptr;
  return est;
}

// Frame intervals (inclusive, in frame indices) during which a robot's own
// dynamics follow the plain consensus law: the interaction rows of a robot
// are only fit on spans where the attacker was not overriding it and its
// in-edges were presumed intact.
using FrameWindows = std::vector<std::pair<int, int>>;

namespace detail {

// Per-row regression data: block-averaged transitions restricted to the
// given windows. Targets and regressors follow the same construction as
// build_stacked_regression.
struct RowRegression {
  std::vector<std::vector<double>> f_cols[2];  // [axis][regressor] -> per-transition values
  std::vector<double> target[2];
  int stride = 1;
  int transitions() const { return static_cast<int>(target[0].size()); }
};

inline RowRegression build_row_regression(const FrameSeries& frames, const SteadyPatternEstimate& pattern,
                                          int row_id, const std::vector<int>& ids_f, double step_seconds,
                                          int stride, const FrameWindows& windows) {
  RowRegression rr;
  rr.stride = stride;
  const int nf = static_cast<int>(ids_f.size());
  for (int axis = 0; axis < 2; ++axis) rr.f_cols[axis].resize(nf);
  const Vec2 cdt = pattern.c_hat * (step_seconds * stride);
  const auto h_row = pattern.h_of(row_id);
  if (!h_row) throw std::invalid_argument("build_row_regression: no shape estimate for the target robot");

  for (const auto& [w0, w1] : windows) {
    const int lo = std::max(0, w0);
    const int hi = std::min(frames.size() - 1, w1);
    const int blocks = (hi - lo + 1) / stride;
    if (blocks < 2) continue;
    // Mean position per block, per robot, skipping blocks with gaps.
    std::vector<std::vector<std::optional<Vec2>>> mean(blocks, std::vector<std::optional<Vec2>>(nf + 1));
    for (int b = 0; b < blocks; ++b) {
      for (int c = 0; c <= nf; ++c) {
        const int id = c < nf ? ids_f[c] : row_id;
        Vec2 acc{};
        bool full = true;
        for (int k = lo + b * stride; k < lo + (b + 1) * stride && full; ++k) {
          if (!frames.present(id, k)) full = false;
          else acc += frames.at(id, k);
        }
        if (full) mean[b][c] = acc / static_cast<double>(stride);
      }
    }
    for (int b = 0; b + 1 < blocks; ++b) {
      bool ok = mean[b + 1][nf].has_value();
      for (int c = 0; c < nf && ok; ++c) ok = mean[b][c].has_value();
      if (!ok) continue;
      for (int axis = 0; axis < 2; ++axis) {
        for (int c = 0; c < nf; ++c) {
          const auto h = pattern.h_of(ids_f[c]);
          if (!h) { ok = false; break; }
          const Vec2 v = *mean[b][c] - *h;
          rr.f_cols[axis][c].push_back(axis == 0 ? v.x : v.y);
        }
        const Vec2 v = *mean[b + 1][nf] - *h_row - cdt;
        rr.target[axis].push_back(axis == 0 ? v.x : v.y);
      }
    }
  }
  return rr;
}

}  // namespace detail

// Weak couplings that did not clear the selection threshold but showed a
// positive gain; stage-3 pair planning probes these actively.
struct WeakEdge {
  int id_i = -1;
  int id_j = -1;
  double gain = 0.0;
};

// Sparse working estimate: per row, greedy forward selection (with swap and
// backward passes) over candidates within a separation prior — the disk
// model bounds in-neighbors by the interaction radius, itself at most half
// the observation radius — then an instrumental-variables refit on the
// selected support. Dense least squares spreads noise over every column at
// this data volume; the attacker's later stages need the few real couplings
// pinned down instead.
inline WEstimate sparse_iv_estimate_windows(
    const FrameSeries& frames, const SteadyPatternEstimate& pattern, const std::vector<int>& ids_h,
    const std::vector<int>& ids_f, double step_seconds, double sigma, double r_prior,
    const std::function<FrameWindows(int)>& windows_for, int reg_stride = 0, int max_support = 4,
    std::vector<WeakEdge>* weak_edges = nullptr) {
  const int nf = static_cast<int>(ids_f.size());
  const int nh = static_cast<int>(ids_h.size());
  const int stride = reg_stride > 0 ? reg_stride
                                    : auto_regression_stride(frames.size(), nf, sigma, step_seconds);

  WEstimate est;
  est.ids_h = ids_h;
  est.ids_f = ids_f;
  est.tau = sign_threshold(sigma, step_seconds);
  est.support_mask = Mat(nh, nf);
  Mat w_m(nh, nf);

  for (int r = 0; r < nh; ++r) {
    const auto rr = detail::build_row_regression(frames, pattern, ids_h[r], ids_f, step_seconds, stride,
                                                 windows_for(ids_h[r]));
    const int cols = rr.transitions();
    if (cols < 6) {
      est.row_warnings.push_back(ids_h[r]);
      continue;
    }

    auto fit_ssr = [&](const std::vector<int>& sel, std::vector<double>* coef) {
      const int ns = static_cast<int>(sel.size());
      Mat a(2 * cols, ns);
      std::vector<double> b(2 * cols);
      for (int axis = 0; axis < 2; ++axis)
        for (int k = 0; k < cols; ++k) {
          for (int c = 0; c < ns; ++c) a(axis * cols + k, c) = rr.f_cols[axis][sel[c]][k];
          b[axis * cols + k] = rr.target[axis][k];
        }
      const auto x = QrLeastSquares(a).solve(b);
      double ssr = 0.0;
      for (int i = 0; i < 2 * cols; ++i) {
        double pred = 0.0;
        for (int c = 0; c < ns; ++c) pred += a(i, c) * x[c];
        ssr += (b[i] - pred) * (b[i] - pred);
      }
      if (coef) *coef = x;
      return ssr;
    };

    const int self = [&] {
      for (int c = 0; c < nf; ++c)
        if (ids_f[c] == ids_h[r]) return c;
      return -1;
    }();
    std::vector<int> candidates;
    const auto s_i = pattern.s_of(ids_h[r]);
    for (int c = 0; c < nf; ++c) {
      if (c == self) continue;
      const auto s_j = pattern.s_of(ids_f[c]);
      if (s_i && s_j && distance(*s_i, *s_j) > r_prior) continue;
      candidates.push_back(c);
    }

    const double gain_min = std::max(6.0 / (2.0 * cols), 0.01);
    std::vector<int> sel;
    if (self >= 0) sel.push_back(self);
    double ssr = fit_ssr(sel.empty() ? candidates : sel, nullptr);
    const int cap = max_support + (self >= 0 ? 1 : 0);
    const std::size_t keep = self >= 0 ? 1 : 0;  // the self column is never swapped out
    for (int round = 0; round < 6; ++round) {
      bool changed = false;
      while (static_cast<int>(sel.size()) < cap) {
        int best = -1;
        double best_ssr = ssr;
        for (const int cand : candidates) {
          if (std::find(sel.begin(), sel.end(), cand) != sel.end()) continue;
          auto trial = sel;
          trial.push_back(cand);
          const double s = fit_ssr(trial, nullptr);
          if (s < best_ssr) {
            best_ssr = s;
            best = cand;
          }
        }
        if (best < 0 || best_ssr > (1.0 - gain_min) * ssr) break;
        sel.push_back(best);
        ssr = best_ssr;
        changed = true;
      }
      // Greedy picks can lock onto a correlated stand-in; try swaps.
      for (std::size_t a = keep; a < sel.size(); ++a)
        for (const int cand : candidates) {
          if (std::find(sel.begin(), sel.end(), cand) != sel.end()) continue;
          auto trial = sel;
          trial[a] = cand;
          const double s = fit_ssr(trial, nullptr);
          if (s < (1.0 - 1e-9) * ssr) {
            sel = trial;
            ssr = s;
            changed = true;
          }
        }
      // Drop columns whose contribution is below the gain floor.
      for (std::size_t a = keep; a < sel.size();) {
        auto trial = sel;
        trial.erase(trial.begin() + static_cast<long>(a));
        const double s = trial.empty() ? ssr * 2.0 : fit_ssr(trial, nullptr);
        if (s <= ssr / (1.0 - gain_min)) {
          sel = trial;
          ssr = s;
          changed = true;
        } else {
          ++a;
        }
      }
      if (!changed) break;
    }

    if (weak_edges) {
      // Gains measured against the minimal base (self plus the strongest
      // selected column): junk columns in the full support otherwise soak
      // up the signal of a real coupling that barely missed selection.
      std::vector<int> base;
      if (self >= 0) base.push_back(self);
      if (static_cast<int>(sel.size()) > static_cast<int>(keep)) base.push_back(sel[keep]);
      const double base_ssr = base.empty() ? ssr : fit_ssr(base, nullptr);
      std::vector<WeakEdge> row_weak;
      for (const int cand : candidates) {
        if (std::find(sel.begin(), sel.end(), cand) != sel.end()) continue;
        auto trial = base;
        trial.push_back(cand);
        const double s = fit_ssr(trial, nullptr);
        const double gain = 1.0 - s / base_ssr;
        if (gain > 0.5 * gain_min) row_weak.push_back({ids_h[r], ids_f[cand], gain});
      }
      std::sort(row_weak.begin(), row_weak.end(),
                [](const WeakEdge& a, const WeakEdge& b) { return a.gain > b.gain; });
      for (std::size_t w = 0; w < row_weak.size() && w < 2; ++w) weak_edges->push_back(row_weak[w]);
    }

    // Significance prune: a surviving column must carry a coefficient that
    // clearly beats its standard error, otherwise one noise edge can tip
    // degree-based decisions downstream.
    for (std::size_t a = keep; a < sel.size();) {
      std::vector<double> coef;
      const double ssr_full = fit_ssr(sel, &coef);
      auto trial = sel;
      trial.erase(trial.begin() + static_cast<long>(a));
      const double ssr_drop = trial.empty() ? ssr_full * 2.0 : fit_ssr(trial, nullptr);
      const double dof = std::max(1.0, 2.0 * cols - static_cast<double>(sel.size()));
      // Partial F statistic of this column; F = t^2 for one coefficient.
      const double f_stat = std::max(0.0, (ssr_drop - ssr_full) / std::max(1e-300, ssr_full / dof));
#ifdef MRN_SEL_TRACE
      std::fprintf(stderr, "[sel] row=%d col=%d coef=%.4f F=%.1f\n", ids_h[r] + 1, ids_f[sel[a]] + 1,
                   coef[a], f_stat);
#endif
      if (f_stat < 2.2 * 2.2) {
        sel = trial;
      } else {
        ++a;
      }
    }

    // Instrumental refit on the chosen support; falls back to the selection
    // coefficients if the moment system degenerates.
    const int ns = static_cast<int>(sel.size());
    std::vector<double> x;
    if (ns > 0 && cols > ns + 2) {
      Mat m(ns, ns);
      std::vector<double> b(ns, 0.0);
      for (int axis = 0; axis < 2; ++axis)
        for (int k = 1; k < cols; ++k)
          for (int a2 = 0; a2 < ns; ++a2) {
            const double z = rr.f_cols[axis][sel[a2]][k - 1];
            b[a2] += z * rr.target[axis][k];
            for (int c = 0; c < ns; ++c) m(a2, c) += z * rr.f_cols[axis][sel[c]][k];
          }
      try {
        x = lu_solve(m, b);
      } catch (const std::exception&) {
        fit_ssr(sel, &x);
      }
    } else if (ns > 0) {
      fit_ssr(sel, &x);
    }
    for (int c = 0; c < ns; ++c) {
      w_m(r, sel[c]) = x[c];
      est.support_mask(r, sel[c]) = 1.0;
    }
  }
  est.w = detail::map_transition_to_single_step(w_m, ids_h, ids_f, stride);
  // Physical sanity on the working estimate: interaction weights are
  // nonnegative and bounded, so off-diagonal entries outside that range are
  // refit artifacts and carry no support.
  const double w_cap = 6.0 * step_seconds;
  for (int r = 0; r < nh; ++r)
    for (int c = 0; c < nf; ++c) {
      if (ids_h[r] == ids_f[c]) continue;
      if (est.w(r, c) < 0.0 || est.w(r, c) > w_cap) {
        est.w(r, c) = 0.0;
        est.support_mask(r, c) = 0.0;
      }
    }
  return est;
}

inline WEstimate sparse_iv_estimate(const FrameSeries& d_c, const SteadyPatternEstimate& pattern,
                                    const std::vector<int>& ids_h, const std::vector<int>& ids_f,
                                    double step_seconds, double sigma, double r_prior,
                                    int reg_stride = 0, int max_support = 4,
                                    std::vector<WeakEdge>* weak_edges = nullptr) {
  const FrameWindows all{{0, d_c.size() - 1}};
  return sparse_iv_estimate_windows(d_c, pattern, ids_h, ids_f, step_seconds, sigma, r_prior,
                                    [&](int) { return all; }, reg_stride, max_support, weak_edges);
}

// Structure and magnitude error of an estimate against the true interaction
// matrix restricted to the same rows/columns.
struct TopologyErrors {
  double eps1 = 0.0;  // fraction of sign mismatches
  double eps2 = 0.0;  // relative Frobenius error
};

inline TopologyErrors error_metrics(const WEstimate& est, const Mat& w_true_hf) {
  const int nh = est.w.rows(), nf = est.w.cols();
  if (w_true_hf.rows() != nh || w_true_hf.cols() != nf)
    throw std::invalid_argument("error_metrics: shape mismatch");
  TopologyErrors e;
  int mismatches = 0;
  double diff2 = 0.0, true2 = 0.0;
  for (int r = 0; r < nh; ++r)
    for (int c = 0; c < nf; ++c) {
      const double w_hat = est.w(r, c);
      const double w_true = w_true_hf(r, c);
      const int s_hat = std::abs(w_hat) > est.tau ? (w_hat > 0.0 ? 1 : -1) : 0;
      const int s_true = w_true != 0.0 ? (w_true > 0.0 ? 1 : -1) : 0;
      if (s_hat != s_true) ++mismatches;
      diff2 += (w_hat - w_true) * (w_hat - w_true);
      true2 += w_true * w_true;
    }
  e.eps1 = static_cast<double>(mismatches) / (static_cast<double>(nh) * nf);
  e.eps2 = true2 > 0.0 ? std::sqrt(diff2 / true2) : std::sqrt(diff2);
  return e;
}

// True W = I - step * L restricted to given row/column id sets.
inline Mat true_w_submatrix(const FormationConfig& cfg, const std::vector<int>& ids_h,
                            const std::vector<int>& ids_f) {
  const Mat l = build_laplacian(cfg.adjacency0);
  Mat w(static_cast<int>(ids_h.size()), static_cast<int>(ids_f.size()));
  for (std::size_t r = 0; r < ids_h.size(); ++r)
    for (std::size_t c = 0; c < ids_f.size(); ++c) {
      const int i = ids_h[r], j = ids_f[c];
      w(static_cast<int>(r), static_cast<int>(c)) = (i == j ? 1.0 : 0.0) - cfg.step * l(i, j);
    }
  return w;
}

}  // namespace mrn
