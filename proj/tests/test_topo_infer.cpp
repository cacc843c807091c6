#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "mrn/driver.hpp"
#include "mrn/scenario.hpp"
#include "mrn/topo.hpp"

using namespace mrn;

namespace {

// Independent brute-force oracle: per-row normal equations solved with plain
// Gaussian elimination, one axis at a time, no shared code with the QR path.
Mat normal_equations_oracle(const StackedRegression& sr) {
  const int nh = static_cast<int>(sr.ids_h.size());
  const int nf = static_cast<int>(sr.ids_f.size());
  const int cols = sr.y_f[0].cols();
  Mat w(nh, nf);
  for (int axis = 0; axis < 2; ++axis) {
    Mat g(nf, nf);
    for (int a = 0; a < nf; ++a)
      for (int b = 0; b < nf; ++b) {
        double acc = 0.0;
        for (int k = 0; k < cols; ++k) acc += sr.y_f[axis](a, k) * sr.y_f[axis](b, k);
        g(a, b) = acc;
      }
    for (int r = 0; r < nh; ++r) {
      std::vector<double> rhs(nf, 0.0);
      for (int a = 0; a < nf; ++a)
        for (int k = 0; k < cols; ++k) rhs[a] += sr.y_f[axis](a, k) * sr.y_h[axis](r, k);
      const auto x = lu_solve(g, rhs);
      for (int c = 0; c < nf; ++c) w(r, c) += 0.5 * x[c];
    }
  }
  return w;
}

// Noise-free three-node chain scenario used in several cases.
Scenario chain3_scenario() {
  Scenario sc = default_scenario();
  sc.name = "chain3";
  FormationConfig f;
  f.n_robots = 3;
  f.adjacency0 = Mat(3, 3);
  f.adjacency0(0, 1) = 0.8;  // 1 listens to 2
  f.adjacency0(1, 2) = 1.1;  // 2 listens to 3 (leader)
  f.leader_index = 2;
  f.leader_speed = 0.2;
  f.leader_heading = {1.0, 0.0};
  f.shape_offsets = {{0.0, 0.0}, {2.0, 1.0}, {4.0, 0.0}};
  f.radius_c = 50.0;
  f.radius_o = 2.0;
  f.radius_s = 0.5;
  f.step = 0.05;
  sc.formation = f;
  sc.sigma = 0.0;
  sc.explicit_init = true;
  sc.init_positions = {{1.0, -1.2}, {1.5, 2.0}, {3.0, 0.5}};
  sc.fov_center = {2.0, -9.0};
  sc.r_f = 100.0;
  sc.attacker_start = {2.0, -9.0};
  sc.attacker_start_set = true;
  sc.stage12_horizon = 1600;
  return sc;
}

double frob_diff(const Mat& a, const Mat& b) {
  double acc = 0.0;
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c) acc += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("lsm_estimate agrees with the brute-force normal-equations oracle") {
  Scenario sc = chain3_scenario();
  SimDriver driver(sc);
  const auto p = run_stage12(driver);
  const auto sr = make_regression(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  const Mat w_oracle = normal_equations_oracle(sr);
  const auto est = lsm_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  CHECK(frob_diff(est.w, w_oracle) < 1e-8);
  // And both match the true transition matrix.
  const Mat w_true = true_w_submatrix(sc.formation, p.ids_f, p.ids_f);
  CHECK(frob_diff(est.w, w_true) < 1e-8);
}

TEST_CASE("lsm_estimate: identity dynamics on synthetic fixed-point data") {
  // z^{k+1} = z^k exactly; random columns keep the regressor full-rank.
  const int n = 4, cols = 40;
  StackedRegression sr;
  sr.ids_h = {0, 1, 2, 3};
  sr.ids_f = {0, 1, 2, 3};
  Rng rng(12);
  for (int axis = 0; axis < 2; ++axis) {
    sr.y_f[axis] = Mat(n, cols);
    sr.y_h[axis] = Mat(n, cols);
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < cols; ++k) {
        const double v = rng.uniform(-1.0, 1.0);
        sr.y_f[axis](r, k) = v;
        sr.y_h[axis](r, k) = v;
      }
  }
  const Mat w = normal_equations_oracle(sr);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) CHECK(w(r, c) == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-9));
}

TEST_CASE("noise-free pipeline recovers the shipped network exactly") {
  Scenario sc = default_scenario();
  sc.sigma = 0.0;
  SimDriver driver(sc);
  const auto p = run_stage12(driver);
  // The working estimate is the sparse per-row selection; one settling
  // transient does not excite every dense direction of a 17-robot network.
  const auto est = sparse_iv_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f,
                                      sc.formation.step, 0.0, sc.r_f / 2.0);
  const Mat w_true = true_w_submatrix(sc.formation, p.ids_f, p.ids_f);
  const auto errs = error_metrics(est, w_true);
  CHECK(errs.eps1 == 0.0);
  CHECK(errs.eps2 < 1e-6);
}

TEST_CASE("lsm_estimate raises a rank-deficiency error on constant data") {
  Scenario sc = chain3_scenario();
  sc.formation.leader_speed = 0.0;
  FrameSeries fs;
  WorldState s = make_initial_state(sc.formation, sc.formation.shape_offsets, {50.0, 50.0}, false);
  Rng rng(3);
  const FieldOfView fov{{0, 0}, 1e9, 1e9};
  for (int k = 0; k < 60; ++k) {
    step_formation(s, sc.formation, {});
    fs.push(observe(s, fov, 0.0, rng));
  }
  SteadyPatternEstimate pattern;
  pattern.c_hat = {0.0, 0.0};
  pattern.ids = {0, 1, 2};
  pattern.s_hat = sc.formation.shape_offsets;
  pattern.h_hat = sc.formation.shape_offsets;
  pattern.anchor = 0;
  CHECK_THROWS_AS(lsm_estimate(fs, pattern, pattern.ids, pattern.ids, 0.05, 0.0), RankDeficiencyError);
}

TEST_CASE("constrained_refine with an all-allowed mask equals the plain estimate") {
  Scenario sc = chain3_scenario();
  SimDriver driver(sc);
  const auto p = run_stage12(driver);
  const auto sr = make_regression(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  const auto est = lsm_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  std::map<int, Vec2> last;
  for (const int id : p.ids_f) last[id] = driver.observed(id).value();
  const auto refined = constrained_refine(sr, 1e9, last, sc.formation.step, sc.sigma);
  CHECK(frob_diff(refined.w, est.w) < 1e-12);
}

TEST_CASE("constrained_refine: masking true zeros improves the magnitude error") {
  Scenario sc = default_scenario();
  sc.sigma = 0.1;
  double eps2_plain_sum = 0.0, eps2_refined_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    sc.seed_observer = seed;
    SimDriver driver(sc);
    const auto p = run_stage12(driver);
    const auto sr = make_regression(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
    const auto est = lsm_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
    std::map<int, Vec2> last;
    for (const int id : p.ids_f) last[id] = driver.observed_smoothed(id).value();
    const auto refined = constrained_refine(sr, 7.2, last, sc.formation.step, sc.sigma);
    const Mat w_true = true_w_submatrix(sc.formation, p.ids_f, p.ids_f);
    eps2_plain_sum += error_metrics(est, w_true).eps2;
    eps2_refined_sum += error_metrics(refined, w_true).eps2;
  }
  CHECK(eps2_refined_sum <= eps2_plain_sum);
}

TEST_CASE("constrained_refine: forbidding a true edge leaves a larger residual") {
  Scenario sc = chain3_scenario();
  SimDriver driver(sc);
  const auto p = run_stage12(driver);
  const auto sr = make_regression(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);

  auto residual = [&](const WEstimate& e) {
    double acc = 0.0;
    for (int axis = 0; axis < 2; ++axis)
      for (int r = 0; r < e.w.rows(); ++r)
        for (int k = 0; k < sr.y_f[axis].cols(); ++k) {
          double pred = 0.0;
          for (int c = 0; c < e.w.cols(); ++c) pred += e.w(r, c) * sr.y_f[axis](c, k);
          const double d = sr.y_h[axis](r, k) - pred;
          acc += d * d;
        }
    return acc;
  };

  const auto est = lsm_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  // Roles 0 and 1 really interact; place them artificially far apart so the
  // mask kills that edge.
  std::map<int, Vec2> fake;
  fake[0] = {0.0, 0.0};
  fake[1] = {100.0, 0.0};
  fake[2] = {1.0, 0.0};
  const auto refined = constrained_refine(sr, 7.0, fake, sc.formation.step, sc.sigma);
  CHECK(refined.w_of(0, 1) == 0.0);
  CHECK(residual(refined) > residual(est) + 1e-9);
}

TEST_CASE("constrained_refine: only the diagonal survives an empty position map") {
  Scenario sc = chain3_scenario();
  SimDriver driver(sc);
  const auto p = run_stage12(driver);
  const auto sr = make_regression(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  std::map<int, Vec2> last;  // nothing observable: everything masked but the diagonal
  const auto refined = constrained_refine(sr, 7.0, last, sc.formation.step, sc.sigma);
  CHECK(refined.row_warnings.empty());  // diagonal always allowed
  for (int r = 0; r < refined.w.rows(); ++r)
    for (int c = 0; c < refined.w.cols(); ++c)
      if (r != c) CHECK(refined.w(r, c) == 0.0);
}

TEST_CASE("error_metrics: exact estimate scores zero") {
  Scenario sc = chain3_scenario();
  const Mat w_true = true_w_submatrix(sc.formation, {0, 1, 2}, {0, 1, 2});
  WEstimate est;
  est.ids_h = {0, 1, 2};
  est.ids_f = {0, 1, 2};
  est.w = w_true;
  est.tau = 1e-6;
  const auto errs = error_metrics(est, w_true);
  CHECK(errs.eps1 == 0.0);
  CHECK(errs.eps2 == 0.0);
}

TEST_CASE("error_metrics: zero estimate counts every true nonzero") {
  Scenario sc = chain3_scenario();
  const Mat w_true = true_w_submatrix(sc.formation, {0, 1, 2}, {0, 1, 2});
  WEstimate est;
  est.ids_h = {0, 1, 2};
  est.ids_f = {0, 1, 2};
  est.w = Mat(3, 3);
  est.tau = 1e-6;
  const auto errs = error_metrics(est, w_true);
  // Nonzeros: 3 diagonal entries plus edges (1<-2) and (2<-3).
  CHECK(errs.eps1 == doctest::Approx(5.0 / 9.0));
  CHECK(errs.eps2 == doctest::Approx(1.0));
}

TEST_CASE("radius feedback never hurts the sign error on the shipped scenario") {
  Scenario sc = default_scenario();
  sc.sigma = 0.1;
  double e1_plain = 0.0, e1_refined = 0.0;
  for (std::uint64_t seed = 11; seed <= 13; ++seed) {
    sc.seed_observer = seed;
    SimDriver driver(sc);
    const auto p = run_stage12(driver);
    const auto sr = make_regression(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
    const auto est = lsm_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
    std::map<int, Vec2> last;
    for (const int id : p.ids_f) last[id] = driver.observed_smoothed(id).value();
    const auto refined = constrained_refine(sr, 7.2, last, sc.formation.step, sc.sigma);
    const Mat w_true = true_w_submatrix(sc.formation, p.ids_f, p.ids_f);
    e1_plain += error_metrics(est, w_true).eps1;
    e1_refined += error_metrics(refined, w_true).eps1;
  }
  CHECK(e1_refined <= e1_plain);
}

TEST_CASE("expectation consistency: seed-averaged estimates approach the noise-free one") {
  Scenario sc = chain3_scenario();
  sc.stage12_horizon = 900;
  SimDriver clean(sc);
  const auto p0 = run_stage12(clean);
  const auto w0 = lsm_estimate(p0.d_c, p0.pattern, p0.ids_f, p0.ids_f, sc.formation.step, 0.0).w;

  auto mean_at = [&](int m_seeds) {
    Mat acc(w0.rows(), w0.cols());
    for (int seed = 1; seed <= m_seeds; ++seed) {
      Scenario noisy = sc;
      noisy.sigma = 0.05;
      noisy.seed_observer = 100 + seed;
      SimDriver driver(noisy);
      const auto p = run_stage12(driver);
      const auto est = lsm_estimate(p.d_c_regression, p.pattern, p0.ids_h_init, p0.ids_f, noisy.formation.step,
                                    noisy.sigma);
      acc = acc + est.w;
    }
    return acc * (1.0 / m_seeds);
  };

  const double d1 = frob_diff(mean_at(1), w0);
  const double d10 = frob_diff(mean_at(10), w0);
  const double d40 = frob_diff(mean_at(40), w0);
  CHECK(d10 < d1);
  CHECK(d40 < d10);
}

TEST_CASE("recovered diagonal matches one minus the step-scaled in-degree") {
  Scenario sc = default_scenario();
  sc.sigma = 0.05;
  SimDriver driver(sc);
  const auto p = run_stage12(driver);
  const auto est = lsm_estimate(p.d_c_regression, p.pattern, p.ids_f, p.ids_f, sc.formation.step, sc.sigma);
  const Mat l = build_laplacian(sc.formation.adjacency0);
  for (const int id : p.ids_f) {
    const double expected = 1.0 - sc.formation.step * l(id, id);
    CHECK(std::abs(est.w_of(id, id) - expected) < 10.0 * sc.sigma);
  }
}
