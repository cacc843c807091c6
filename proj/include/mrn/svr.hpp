#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrn/linalg.hpp"
#include "mrn/rng.hpp"

namespace mrn {

// Feature standardization fitted on training data.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  void fit(const std::vector<std::vector<double>>& xs) {
    const std::size_t d = xs.empty() ? 0 : xs[0].size();
    mean.assign(d, 0.0);
    scale.assign(d, 1.0);
    if (xs.empty()) return;
    for (const auto& x : xs)
      for (std::size_t f = 0; f < d; ++f) mean[f] += x[f];
    for (auto& m : mean) m /= static_cast<double>(xs.size());
    for (std::size_t f = 0; f < d; ++f) {
      double var = 0.0;
      for (const auto& x : xs) var += (x[f] - mean[f]) * (x[f] - mean[f]);
      var /= static_cast<double>(xs.size());
      scale[f] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
  }

  std::vector<double> apply(const std::vector<double>& x) const {
    std::vector<double> out(x.size());
    for (std::size_t f = 0; f < x.size(); ++f) out[f] = (x[f] - mean[f]) / scale[f];
    return out;
  }
};

inline double rbf_kernel(const std::vector<double>& a, const std::vector<double>& b, double gamma) {
  double d2 = 0.0;
  for (std::size_t f = 0; f < a.size(); ++f) d2 += (a[f] - b[f]) * (a[f] - b[f]);
  return std::exp(-gamma * d2);
}

// One fitted scalar kernel regressor (inputs already standardized).
struct KernelModel {
  std::vector<std::vector<double>> support;
  std::vector<double> coef;
  double bias = 0.0;
  double gamma = 1.0;

  double predict(const std::vector<double>& x) const {
    double acc = bias;
    for (std::size_t i = 0; i < support.size(); ++i) acc += coef[i] * rbf_kernel(support[i], x, gamma);
    return acc;
  }
};

namespace detail_svr {

// Sequential minimal optimization for the epsilon-insensitive dual, in the
// doubled-variable form: p < n carries +1, p >= n carries -1.
inline KernelModel solve_svr(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                             double c_penalty, double gamma, double tube, const Mat& kcache) {
  const int n = static_cast<int>(x.size());
  const int n2 = 2 * n;
  std::vector<double> a(n2, 0.0);
  std::vector<double> grad(n2);
  auto sign_of = [&](int p) { return p < n ? 1.0 : -1.0; };
  auto idx = [&](int p) { return p < n ? p : p - n; };
  for (int p = 0; p < n2; ++p) grad[p] = tube + (p < n ? -y[p] : y[p - n]);

  const double tol = 1e-3 * std::max(1.0, c_penalty / 16.0);
  const long max_iter = 40000L + 40L * n2;
  for (long it = 0; it < max_iter; ++it) {
    // Maximal violating pair.
    int i = -1, j = -1;
    double gmax = -std::numeric_limits<double>::infinity();
    double gmin = std::numeric_limits<double>::infinity();
    for (int p = 0; p < n2; ++p) {
      const double s = sign_of(p);
      if ((s > 0 && a[p] < c_penalty) || (s < 0 && a[p] > 0.0)) {
        const double v = -s * grad[p];
        if (v > gmax) {
          gmax = v;
          i = p;
        }
      }
      if ((s > 0 && a[p] > 0.0) || (s < 0 && a[p] < c_penalty)) {
        const double v = -s * grad[p];
        if (v < gmin) {
          gmin = v;
          j = p;
        }
      }
    }
    if (i < 0 || j < 0 || gmax - gmin < tol) break;

    const double si = sign_of(i), sj = sign_of(j);
    const double kii = kcache(idx(i), idx(i));
    const double kjj = kcache(idx(j), idx(j));
    const double kij = kcache(idx(i), idx(j));
    double eta = kii + kjj - 2.0 * kij;
    if (eta <= 1e-12) eta = 1e-12;
    // Unconstrained step along the pair keeping the equality constraint.
    double delta = (gmax - gmin) / eta;
    // Box limits: a[i] moves by si-direction +delta... express via raw bounds.
    if (si > 0)
      delta = std::min(delta, c_penalty - a[i]);
    else
      delta = std::min(delta, a[i]);
    if (sj > 0)
      delta = std::min(delta, a[j]);
    else
      delta = std::min(delta, c_penalty - a[j]);
    if (delta <= 0.0) break;
    a[i] += si > 0 ? delta : -delta;
    a[j] += sj > 0 ? -delta : delta;
    for (int p = 0; p < n2; ++p) {
      const double kpi = kcache(idx(p), idx(i));
      const double kpj = kcache(idx(p), idx(j));
      grad[p] += sign_of(p) * delta * (kpi - kpj);
    }
  }

  // Bias from the final violating-pair bounds.
  double gmax = -std::numeric_limits<double>::infinity();
  double gmin = std::numeric_limits<double>::infinity();
  for (int p = 0; p < n2; ++p) {
    const double s = sign_of(p);
    if ((s > 0 && a[p] < c_penalty) || (s < 0 && a[p] > 0.0)) gmax = std::max(gmax, -s * grad[p]);
    if ((s > 0 && a[p] > 0.0) || (s < 0 && a[p] < c_penalty)) gmin = std::min(gmin, -s * grad[p]);
  }
  KernelModel model;
  model.gamma = gamma;
  model.bias = std::isfinite(gmax) && std::isfinite(gmin) ? (gmax + gmin) / 2.0 : 0.0;
  for (int i2 = 0; i2 < n; ++i2) {
    const double beta = a[i2] - a[n + i2];
    if (std::abs(beta) > 1e-12) {
      model.support.push_back(x[i2]);
      model.coef.push_back(beta);
    }
  }
  return model;
}

// Kernel ridge regression: (K + lambda I) coef = y.
inline KernelModel solve_krr(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                             double lambda, double gamma, const Mat& kcache) {
  const int n = static_cast<int>(x.size());
  Mat k(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) k(r, c) = kcache(r, c);
    k(r, r) += lambda;
  }
  KernelModel model;
  model.gamma = gamma;
  model.support = x;
  model.coef = lu_solve(k, y);
  model.bias = 0.0;
  return model;
}

}  // namespace detail_svr

struct KernelFitConfig {
  std::string family = "svr";  // svr | krr
  std::vector<double> gammas;  // defaults set in fit
  std::vector<double> penalties;
  std::vector<double> tubes = {0.01, 0.05, 0.1};
  int cv_folds = 10;
};

struct KernelFitResult {
  KernelModel model;
  Standardizer norm;
  double cv_rmse = 0.0;
  double gamma = 0.0, penalty = 0.0, tube = 0.0;
};

// Grid-search cross-validated fit of one scalar output. Deterministic given
// the rng seed (fold shuffle) and the grid order.
inline KernelFitResult fit_kernel_regressor(const std::vector<std::vector<double>>& raw_x,
                                            const std::vector<double>& y, KernelFitConfig cfg,
                                            Rng& rng) {
  const int n = static_cast<int>(raw_x.size());
  if (n < 4) throw std::invalid_argument("fit_kernel_regressor: need at least 4 samples");
  {
    bool all_same = true;
    for (int i = 1; i < n && all_same; ++i) all_same = raw_x[i] == raw_x[0];
    if (all_same) throw std::invalid_argument("fit_kernel_regressor: degenerate identical inputs");
  }
  if (cfg.gammas.empty())
    for (int e = -6; e <= 4; ++e) cfg.gammas.push_back(std::ldexp(1.0, e));
  if (cfg.penalties.empty())
    for (int e = -2; e <= 8; ++e) cfg.penalties.push_back(std::ldexp(1.0, e));
  if (cfg.family == "krr") cfg.tubes = {0.0};

  KernelFitResult out;
  out.norm.fit(raw_x);
  std::vector<std::vector<double>> x(raw_x.size());
  for (int i = 0; i < n; ++i) x[i] = out.norm.apply(raw_x[i]);

  // Fold assignment: one seeded shuffle, then round-robin.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const int folds = std::max(2, std::min(cfg.cv_folds, n));
  std::vector<int> fold_of(n);
  for (int i = 0; i < n; ++i) fold_of[order[i]] = i % folds;

  double best_rmse = std::numeric_limits<double>::infinity();
  double best_gamma = cfg.gammas[0], best_pen = cfg.penalties[0], best_tube = cfg.tubes[0];
  for (const double gamma : cfg.gammas) {
    Mat kfull(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = r; c < n; ++c) {
        const double v = rbf_kernel(x[r], x[c], gamma);
        kfull(r, c) = v;
        kfull(c, r) = v;
      }
    for (const double pen : cfg.penalties)
      for (const double tube : cfg.tubes) {
        double sse = 0.0;
        int count = 0;
        bool raced_out = false;
        for (int f = 0; f < folds; ++f) {
          std::vector<int> tr;
          for (int i = 0; i < n; ++i)
            if (fold_of[i] != f) tr.push_back(i);
          if (tr.empty()) continue;
          std::vector<std::vector<double>> xf;
          std::vector<double> yf;
          Mat kf(static_cast<int>(tr.size()), static_cast<int>(tr.size()));
          for (std::size_t a = 0; a < tr.size(); ++a) {
            xf.push_back(x[tr[a]]);
            yf.push_back(y[tr[a]]);
            for (std::size_t b = 0; b < tr.size(); ++b) kf(static_cast<int>(a), static_cast<int>(b)) = kfull(tr[a], tr[b]);
          }
          const KernelModel m = cfg.family == "krr"
                                    ? detail_svr::solve_krr(xf, yf, 1.0 / pen, gamma, kf)
                                    : detail_svr::solve_svr(xf, yf, pen, gamma, tube, kf);
          for (int i = 0; i < n; ++i)
            if (fold_of[i] == f) {
              const double e = m.predict(x[i]) - y[i];
              sse += e * e;
              ++count;
            }
          // Racing cutoff: a combination already clearly worse than the
          // incumbent cannot win, so skip its remaining folds.
          if (std::isfinite(best_rmse) && count > 0 &&
              sse / count > 1.5 * best_rmse * best_rmse && f + 1 >= 2) {
            raced_out = true;
            break;
          }
        }
        const double rmse = !raced_out && count ? std::sqrt(sse / count)
                                                : std::numeric_limits<double>::infinity();
        if (rmse < best_rmse - 1e-12) {
          best_rmse = rmse;
          best_gamma = gamma;
          best_pen = pen;
          best_tube = tube;
        }
      }
  }

  Mat kfull(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = r; c < n; ++c) {
      const double v = rbf_kernel(x[r], x[c], best_gamma);
      kfull(r, c) = v;
      kfull(c, r) = v;
    }
  out.model = cfg.family == "krr" ? detail_svr::solve_krr(x, y, 1.0 / best_pen, best_gamma, kfull)
                                  : detail_svr::solve_svr(x, y, best_pen, best_gamma, best_tube, kfull);
  out.cv_rmse = best_rmse;
  out.gamma = best_gamma;
  out.penalty = best_pen;
  out.tube = best_tube;
  return out;
}

}  // namespace mrn
