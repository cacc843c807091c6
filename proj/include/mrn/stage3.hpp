#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mrn/avoidance_model.hpp"
#include "mrn/driver.hpp"
#include "mrn/excitation.hpp"
#include "mrn/topo.hpp"

namespace mrn {

struct Stage3Products {
  RadiusEstimate radii;
  std::vector<AvoidancePair> d_e;
  WEstimate w_refined;
  std::vector<int> ids_h_final;
  AvoidanceModel g_model;
  int probe_target = -1;
  int lever = -1;
  int watched = -1;
  bool radius_ok = false;
  bool model_ok = false;
  std::string note;
};

namespace detail_s3 {

struct DirtySpans {
  std::map<int, std::vector<std::pair<long, long>>> by_robot;

  void add(int robot, long from, long to) { by_robot[robot].push_back({from, to}); }
};

// Valid fitting windows for one robot: the whole history minus its dirty
// spans and minus every frame where the attacker stood within the standoff
// distance of it.
inline FrameWindows windows_for_row(const SimDriver& driver, const DirtySpans& dirty, int robot,
                                    double standoff) {
  const auto& frames = driver.frames();
  const int n = frames.size();
  std::vector<char> bad(n, 0);
  if (const auto it = dirty.by_robot.find(robot); it != dirty.by_robot.end())
    for (const auto& [a, b] : it->second)
      for (long k = std::max(0L, a); k <= std::min<long>(n - 1, b); ++k) bad[k] = 1;
  for (int k = 0; k < n; ++k) {
    if (bad[k] || !frames.present(robot, k)) {
      bad[k] = 1;
      continue;
    }
    if (distance(driver.attacker_position_at(k), frames.at(robot, k)) < standoff) bad[k] = 1;
  }
  FrameWindows out;
  int start = -1;
  for (int k = 0; k < n; ++k) {
    if (!bad[k] && start < 0) start = k;
    if ((bad[k] || k == n - 1) && start >= 0) {
      const int end = bad[k] ? k - 1 : k;
      if (end - start >= 8) out.push_back({start, end});
      start = -1;
    }
  }
  if (out.empty()) out.push_back({0, n - 1});
  return out;
}

struct PairCandidate {
  int watched = -1;
  int lever = -1;
  double separation = 0.0;
  bool watched_multi_in = false;
  int tier = 1;
};

// Candidate (watched, lever) pairs, support-backed ones first, then any
// geometric pair whose separation could plausibly sit near the interaction
// radius. The press itself verifies or refutes each hypothesis.
inline std::vector<PairCandidate> candidate_pairs(const Stage12Products& s12, double r_cap) {
  std::vector<PairCandidate> out;
  for (const int i : s12.ids_h_init) {
    std::vector<int> support = s12.w_init.estimated_in_neighbors(i);
    std::vector<int> cands;
    for (const auto& we : s12.weak_edges)
      if (we.id_i == i) cands.push_back(we.id_j);
    for (const int j : s12.ids_f)
      if (j != i && std::find(cands.begin(), cands.end(), j) == cands.end() &&
          std::find(support.begin(), support.end(), j) == support.end())
        cands.push_back(j);
    const bool multi = support.size() + cands.size() >= 2;
    const auto si = s12.pattern.s_of(i);
    if (!si) continue;
    auto push = [&](int j, int tier) {
      const auto sj = s12.pattern.s_of(j);
      if (!sj) return;
      const double sep = distance(*si, *sj);
      if (sep < 4.0 || sep > r_cap) return;
      out.push_back({i, j, sep, multi, tier});
    };
    for (const int j : support) push(j, 0);
    for (const int j : cands) push(j, 1);
  }
  std::sort(out.begin(), out.end(), [](const PairCandidate& a, const PairCandidate& b) {
    if (a.tier != b.tier) return a.tier < b.tier;
    if (a.separation != b.separation) return a.separation > b.separation;
    if (a.watched != b.watched) return a.watched < b.watched;
    return a.lever < b.lever;
  });
  return out;
}

}  // namespace detail_s3

// Stage 3: probe the avoidance radius on the nearest inner robot, break one
// suspected long edge by sustained excitation to read the interaction
// radius, then re-estimate the interaction rows on everything observed so
// far and fit the avoidance regressor from the collected response pairs.
inline Stage3Products run_stage3(SimDriver& driver, Stage12Products& s12) {
  const Scenario& sc = driver.scenario();
  const auto& est = sc.est;
  const double dt = sc.formation.step;
  Stage3Products out;
  detail_s3::DirtySpans dirty;
  PairRecorder recorder(est.pair_response_window, est.pair_response_window);

  // Station-keep until the visible crowd's second differences drop back to
  // the noise floor (a fixed pause under-settles after a hard perturbation).
  auto settle = [&](int min_steps) {
    const int stride = est.effective_stride(sc.sigma);
    const double sigma_eff = sc.sigma / std::sqrt(static_cast<double>(std::max(1, stride)));
    for (int k = 0; k < min_steps; ++k) driver.step(driver.crowd_velocity());
    for (int guard = 0; guard < 2000; guard += 50) {
      for (int k = 0; k < 50; ++k) driver.step(driver.crowd_velocity());
      const auto& frames = driver.frames();
      const int span = 5 * std::max(1, stride);
      if (frames.size() < span + 2) continue;
      const FrameSeries recent = frames.slice(frames.size() - span - 1, frames.size() - 1);
      const FrameSeries dec = recent.block_averaged(stride);
      if (dec.size() < 4) continue;
      const auto ids = dec.ids_present(0, dec.size() - 1);
      double total = 0.0;
      for (const int id : ids) total += second_diff_accum(dec, id, 0, dec.size() - 1);
      if (total <= steady_epsilon(sigma_eff, static_cast<int>(ids.size()),
                                  std::max(1, dec.size() - 2)))
        break;
    }
  };

  // --- Detection-radius probe on the nearest inner robot.
  {
    double best = 1e300;
    for (const int id : s12.ids_h_init) {
      const auto z = driver.observed_smoothed(id);
      if (!z) continue;
      const double d = distance(*z, driver.state().attacker_position);
      if (d < best) {
        best = d;
        out.probe_target = id;
      }
    }
    if (out.probe_target < 0) {
      out.note = "stage 3: no probe target in the inner set";
      return out;
    }
    ProbeSession probe(out.probe_target, s12.pattern, est, sc.sigma);
    const long probe_start = driver.now();
    int budget = 4000;
    while (!probe.done() && budget-- > 0) driver.step(probe.control(driver));
    if (probe.failed() || !probe.result()) {
      out.note = "stage 3: probe did not observe a reaction";
      return out;
    }
    out.radii.r_hat_o = *probe.result();
    dirty.add(out.probe_target, probe_start, driver.now() + 2 * est.pair_response_window);
  }

  recorder.set_target(out.probe_target);
  // Walk the probed robot back to its track and collect response pairs.
  {
    ReverseExciteSession reverse(out.probe_target, s12.pattern, *out.radii.r_hat_o, sc.sigma, 2500);
    while (!reverse.done()) {
      driver.step(reverse.control(driver));
      recorder.update(driver, predict_desired(driver, s12.w_init, s12.pattern, out.probe_target),
                      *out.radii.r_hat_o);
    }
    dirty.add(out.probe_target, driver.now() - 2500, driver.now() + 2 * est.pair_response_window);
    settle(100);
  }

  // --- Edge break. Support-backed long pairs get the orthogonal press
  // first; if none exists or none breaks, herd the probed robot away and
  // read the radius from its followers' coupling deaths.
  const auto pairs = detail_s3::candidate_pairs(s12, 0.5 * sc.r_f);
  const double beta = est.beta_or_default(sc.sigma);
  const long stage3_deadline = driver.now() + 4L * est.phase_timeout;
  int tried = 0;
  for (const auto& cand : pairs) {
    if (cand.tier != 0) continue;  // support-backed hypotheses only
    if (driver.now() > stage3_deadline || ++tried > 3) break;
    ExcitationPlan plan;
    plan.target_j = cand.lever;
    plan.watched_i = cand.watched;
    plan.beta = beta;
    plan.k_l = cand.watched_multi_in ? est.break_window : est.k_l;
    plan.mode = cand.watched_multi_in ? ExcitationPlan::Mode::Orthogonal
                                      : ExcitationPlan::Mode::Intermittent;
    recorder.set_target(cand.lever);
    const long t0 = driver.now();
    std::optional<long> k2;
    std::optional<double> session_radius;
    if (plan.mode == ExcitationPlan::Mode::Orthogonal) {
      OrthogonalExciteSession session(plan, s12.pattern, *out.radii.r_hat_o, 1500);
      while (!session.done()) {
        driver.step(session.control(driver, s12.w_init));
        recorder.update(driver, predict_desired(driver, s12.w_init, s12.pattern, cand.lever),
                        *out.radii.r_hat_o);
      }
      k2 = session.break_step();
      session_radius = session.radius_readout();
    } else {
      IntermittentExciteSession session(plan, s12.pattern, *out.radii.r_hat_o, 1500,
                                        driver.attacker_rng());
      while (!session.done()) {
        driver.step(session.control(driver, s12.w_init));
        recorder.update(driver, predict_desired(driver, s12.w_init, s12.pattern, cand.lever),
                        *out.radii.r_hat_o);
      }
      k2 = session.break_step();
      session_radius = session.radius_readout();
    }
    const long t1 = driver.now();
    dirty.add(cand.lever, t0, t1 + 2 * est.pair_response_window);
    dirty.add(cand.watched, t0, -1);  // closed after the reverse walk below

    if (k2 && session_radius) {
      out.radii.break_step = *k2;
      out.radii.r_hat_c = session_radius;
      out.lever = cand.lever;
      out.watched = cand.watched;
    }

    // Undo the displacement either way, then settle.
    ReverseExciteSession reverse(cand.lever, s12.pattern, *out.radii.r_hat_o, sc.sigma, 2500);
    while (!reverse.done()) {
      driver.step(reverse.control(driver));
      recorder.update(driver, predict_desired(driver, s12.w_init, s12.pattern, cand.lever),
                      *out.radii.r_hat_o);
    }
    settle(150);
    auto& spans = dirty.by_robot[cand.watched];
    for (auto& [a, b] : spans)
      if (b < 0) b = driver.now();

    if (out.radii.r_hat_c) break;
  }

  std::vector<int> herd_disturbed;
  if (!out.radii.r_hat_c && driver.now() < stage3_deadline) {
    // Herd fallback on the probed (verified-reactive) robot.
    recorder.set_target(out.probe_target);
    const long t0 = driver.now();
    std::vector<int> watchers = s12.ids_f;
    HerdRadiusSession herd(out.probe_target, watchers, s12.pattern, *out.radii.r_hat_o, 5200);
    while (!herd.done()) {
      driver.step(herd.control(driver));
      recorder.update(driver, predict_desired(driver, s12.w_init, s12.pattern, out.probe_target),
                      *out.radii.r_hat_o);
    }
    if (herd.result()) {
      out.radii.r_hat_c = herd.result();
      out.radii.break_step = herd.break_step() ? *herd.break_step() : driver.now();
      out.lever = out.probe_target;
      out.watched = -1;
    }
    herd_disturbed = herd.disturbed_ids();
    ReverseExciteSession reverse(out.probe_target, s12.pattern, *out.radii.r_hat_o, sc.sigma, 3500);
    while (!reverse.done()) {
      driver.step(reverse.control(driver));
      recorder.update(driver, predict_desired(driver, s12.w_init, s12.pattern, out.probe_target),
                      *out.radii.r_hat_o);
    }
    const long t1 = driver.now();
    dirty.add(out.probe_target, t0, t1 + 2 * est.pair_response_window);
    // Only the robots that were dragged, chased, or lost edges carry invalid
    // rows over the herd span; everyone else's dynamics stayed clean and the
    // big herd excitation is exactly what breaks ancestral confounds in the
    // regression.
    for (const int id : herd_disturbed)
      if (id != out.probe_target) dirty.add(id, t0, t1);
    settle(200);
  }

  if (out.radii.r_hat_o && out.radii.r_hat_c && *out.radii.r_hat_c <= *out.radii.r_hat_o)
    out.radii.r_hat_c = *out.radii.r_hat_o + 1.0;  // degenerate readout; keep the ordering invariant
  out.radius_ok = out.radii.r_hat_o.has_value() && out.radii.r_hat_c.has_value();

  // --- Widen the inner set and refresh the working estimate on everything
  // seen so far, masking spans where a robot was being pushed around.
  if (out.radius_ok) driver.set_r_h(sc.r_f - *out.radii.r_hat_c);
  const auto fov = driver.fov();
  for (const int id : s12.ids_f) {
    const auto z = driver.observed_smoothed(id);
    if (z && distance(*z, fov.center) <= fov.r_h) out.ids_h_final.push_back(id);
  }
  if (out.ids_h_final.empty()) out.ids_h_final = s12.ids_h_init;

  const double standoff = (out.radii.r_hat_o ? *out.radii.r_hat_o : 2.0) + 0.3;
  const double r_prior = out.radii.r_hat_c ? *out.radii.r_hat_c + 0.3 : 0.5 * sc.r_f;
  try {
    // Short regression stride: parent-child trajectories separate through
    // their dynamic lag once the transitions are fine enough.
    out.w_refined = sparse_iv_estimate_windows(
        driver.frames(), s12.pattern, out.ids_h_final, s12.ids_f, dt, sc.sigma, r_prior,
        [&](int robot) { return detail_s3::windows_for_row(driver, dirty, robot, standoff); }, 6);
    // Rows left without usable windows keep their stage-2 values.
    for (const int id : out.w_refined.row_warnings) {
      const int r = out.w_refined.h_index(id);
      if (r < 0 || !s12.w_init.has_row(id)) continue;
      for (int c = 0; c < static_cast<int>(out.w_refined.ids_f.size()); ++c)
        out.w_refined.w(r, c) = s12.w_init.w_of(id, out.w_refined.ids_f[c]);
    }
  } catch (const std::exception& e) {
    out.w_refined = s12.w_init;
    out.note += std::string(" refine failed: ") + e.what();
  }

  // --- Avoidance regression from the collected pairs.
  out.d_e = recorder.pairs();
  if (static_cast<int>(out.d_e.size()) >= 10) {
    const auto train = subsample_pairs(out.d_e, est.max_training_pairs);
    out.g_model = AvoidanceModel(out.radii.r_hat_o ? *out.radii.r_hat_o : sc.formation.radius_o,
                                 sc.formation.max_accel);
    try {
      out.g_model.fit(train, driver.attacker_rng(), est.regressor);
      out.model_ok = true;
    } catch (const std::exception& e) {
      out.note += std::string(" model fit failed: ") + e.what();
    }
  } else {
    out.note += " too few response pairs";
  }
  return out;
}

}  // namespace mrn
