#pragma once

#include <algorithm>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "mrn/csvio.hpp"
#include "mrn/formation.hpp"
#include "mrn/observer.hpp"
#include "mrn/rng.hpp"
#include "mrn/scenario.hpp"
#include "mrn/topo.hpp"

namespace mrn {

// Closed-loop world driver: advances the simulation one control step at a
// time, keeps the attacker's observation history, and records the trace.
// The field of view is centered on the attacker.
class SimDriver {
 public:
  explicit SimDriver(const Scenario& sc)
      : sc_(sc),
        world_rng_(sc.seed_world),
        obs_rng_(sc.seed_observer),
        atk_rng_(sc.seed_attacker) {
    auto z0 = sc.draw_initial_positions(world_rng_);
    state_ = make_initial_state(sc.formation, z0, sc.attacker_start_position(), true);
    r_h_ = 0.3 * sc.r_f;
    record();
  }

  const Scenario& scenario() const { return sc_; }
  const FormationConfig& cfg() const { return sc_.formation; }
  const WorldState& state() const { return state_; }
  WorldState& mutable_state() { return state_; }
  Rng& attacker_rng() { return atk_rng_; }
  const FrameSeries& frames() const { return frames_; }
  long now() const { return state_.step_index; }
  double r_h() const { return r_h_; }
  void set_r_h(double v) { r_h_ = v; }

  FieldOfView fov() const { return FieldOfView{state_.attacker_position, sc_.r_f, r_h_}; }

  const ObservationFrame& last_frame() const { return last_frame_; }

  std::optional<Vec2> observed(int id) const { return last_frame_.find(id); }

  // The attacker's own position when frame k was taken (known exactly).
  Vec2 attacker_position_at(int frame) const { return attacker_history_[frame]; }

  // Smoothed observation over the trailing window; the attacker uses this
  // for geometry checks where raw noise would dominate.
  std::optional<Vec2> observed_smoothed(int id, int window = 5) const {
    const int n = frames_.size();
    Vec2 acc{};
    int count = 0;
    for (int k = std::max(0, n - window); k < n; ++k)
      if (frames_.present(id, k)) {
        acc += frames_.at(id, k);
        ++count;
      }
    if (count == 0) return std::nullopt;
    return acc / static_cast<double>(count);
  }

  // Mean observed velocity of the visible crowd over the trailing window.
  Vec2 crowd_velocity(int window = 40) const {
    const int n = frames_.size();
    if (n < window + 1) return {};
    const int k0 = n - 1 - window;
    Vec2 acc{};
    int count = 0;
    for (const int id : frames_.ids_present(k0, n - 1)) {
      acc += frames_.at(id, n - 1) - frames_.at(id, k0);
      ++count;
    }
    if (count == 0) return {};
    return acc / (static_cast<double>(count) * static_cast<double>(window) * cfg().step);
  }

  void step(const Vec2& attacker_velocity_cmd) {
    step_formation(state_, cfg(), attacker_velocity_cmd);
    record();
  }

  // Minimum distance from the attacker to any active robot other than
  // `exempt` (ground truth; used for safety assertions in tests).
  double attacker_clearance(int exempt = -1) const {
    double best = 1e300;
    for (int i = 0; i < cfg().n_robots; ++i) {
      if (i == exempt || !state_.membership[i]) continue;
      best = std::min(best, distance(state_.attacker_position, state_.positions[i]));
    }
    return best;
  }

  void write_trace_csv(const std::string& path) const {
    CsvWriter csv(path, "k,robot_id,x,y,vx,vy,is_attacker");
    for (const auto& row : trace_) {
      csv.cell(row.k).cell(row.id).cell(row.x).cell(row.y).cell(row.vx).cell(row.vy).cell(row.is_attacker);
      csv.end_row();
    }
  }

 private:
  struct TraceRow {
    long k;
    int id;
    double x, y, vx, vy;
    int is_attacker;
  };

  void record() {
    last_frame_ = observe(state_, fov(), sc_.sigma, obs_rng_);
    frames_.push(last_frame_);
    attacker_history_.push_back(state_.attacker_position);
    for (int i = 0; i < cfg().n_robots; ++i)
      trace_.push_back({state_.step_index, i + 1, state_.positions[i].x, state_.positions[i].y,
                        state_.velocities[i].x, state_.velocities[i].y, 0});
    trace_.push_back({state_.step_index, 0, state_.attacker_position.x, state_.attacker_position.y,
                      state_.attacker_velocity.x, state_.attacker_velocity.y, 1});
  }

  Scenario sc_;
  WorldState state_;
  Rng world_rng_, obs_rng_, atk_rng_;
  FrameSeries frames_;
  ObservationFrame last_frame_;
  double r_h_ = 0.0;
  std::vector<TraceRow> trace_;
  std::vector<Vec2> attacker_history_;
};

// ---------------------------------------------------------------------------
// Stage 1-2: loiter, watch the shape form, identify the steady pattern, and
// fit the interaction rows of the inner observation set.

struct Stage12Products {
  SteadyPatternEstimate pattern;
  FrameSeries d_c, d_s;
  FrameSeries d_c_regression;   // conditioning-truncated slice of d_c
  std::vector<int> ids_f;       // robots usable as regressors
  std::vector<int> ids_h_init;  // initial inner set
  WEstimate w_init;
  std::vector<WeakEdge> weak_edges;  // sub-threshold couplings worth probing
  int k_hat_s_raw = 0;
};

inline SteadyPatternEstimate estimate_steady_pattern(const FrameSeries& frames, const Scenario& sc,
                                                     int* k_hat_raw_out = nullptr) {
  const auto& est = sc.est;
  const double dt = sc.formation.step;
  const int stride = est.effective_stride(sc.sigma);
  // Block averaging shrinks the per-sample noise floor by sqrt(stride) so
  // the settling transient stands out of the second-difference statistic.
  const FrameSeries dec = frames.block_averaged(stride);
  const double sigma_eff = sc.sigma / std::sqrt(static_cast<double>(stride));
  const int l_d = std::min(est.effective_detect_window(sc.sigma), std::max(2, dec.size() - 2));

  const int n_f = static_cast<int>(dec.ids_present(0, dec.size() - 1).size());
  const double eps_steady = steady_epsilon(sigma_eff, n_f, std::max(1, l_d - 1));
  const auto k0_dec = detect_steady(dec, l_d, eps_steady);
  if (!k0_dec) throw std::runtime_error("stage 1: horizon exhausted before the pattern settled");
  const int k_hat_raw = static_cast<int>(dec.step_at(*k0_dec));
  if (k_hat_raw_out) *k_hat_raw_out = k_hat_raw;

  SteadyPatternEstimate pattern;
  pattern.k_hat_s = k_hat_raw;

  // Leader: the only track without velocity changes during convergence.
  const int k_s_dec = std::max(2, *k0_dec);
  pattern.leader = identify_leader(dec, 0, k_s_dec, leader_epsilon(sigma_eff, std::max(1, k_s_dec - 1)));

  // Velocity and shape from the tail of the steady segment.
  const int lfit = est.fit_window;
  if (frames.size() < k_hat_raw + 2 * lfit)
    throw std::runtime_error("stage 1: not enough steady frames for the pattern fit");
  const auto vfit = estimate_velocity(frames, dt, frames.size() - 1 - lfit, lfit);
  pattern.c_hat = vfit.c_hat;

  FrameSeries d_s = frames.slice(k_hat_raw + 1, frames.size() - 1);
  int anchor = pattern.leader.found ? pattern.leader.id : -1;
  const auto steady_ids = d_s.ids_present(d_s.size() - lfit, d_s.size() - 1);
  if (anchor < 0 || std::find(steady_ids.begin(), steady_ids.end(), anchor) == steady_ids.end())
    anchor = steady_ids.empty() ? -1 : steady_ids.front();
  if (anchor < 0) throw std::runtime_error("stage 1: no robot observed across the fit window");
  const auto shape = estimate_shape(d_s, pattern.c_hat, dt, lfit, anchor);
  pattern.ids = shape.ids;
  pattern.s_hat = shape.s_hat;
  pattern.h_hat = shape.h_hat;
  pattern.anchor = anchor;
  return pattern;
}

inline Stage12Products run_stage12(SimDriver& driver) {
  const Scenario& sc = driver.scenario();
  // Loiter: hold station against the crowd's mean drift so the relative
  // geometry (and with it the observation sets) stays put.
  for (int k = 0; k < sc.stage12_horizon; ++k) driver.step(driver.crowd_velocity());

  Stage12Products out;
  out.pattern = estimate_steady_pattern(driver.frames(), sc, &out.k_hat_s_raw);

  auto [d_c, d_s] = build_datasets(driver.frames(), out.k_hat_s_raw);
  out.d_c = std::move(d_c);
  out.d_s = std::move(d_s);

  // Regression slice. Noise-free: stop once the transient falls below an
  // absolute floor, otherwise the trailing near-collinear columns wreck the
  // regressor conditioning. Noisy: extend past the detected split into the
  // early steady segment — the split step is itself an estimate and the
  // averaging headroom is what keeps weak couplings above the noise.
  if (sc.sigma <= 0.0) {
    const int l_d = std::min(sc.est.effective_detect_window(0.0), std::max(2, out.d_c.size() - 2));
    if (const auto k_reg = detect_steady(out.d_c, l_d, 1e-3)) {
      const int cut_step = static_cast<int>(out.d_c.step_at(*k_reg));
      if (cut_step > 0 && cut_step < out.k_hat_s_raw)
        out.d_c_regression = out.d_c.slice(0, cut_step);
    }
    if (out.d_c_regression.size() == 0) out.d_c_regression = out.d_c;
  } else {
    const int want = std::min(driver.frames().size() - 1, 3 * (out.k_hat_s_raw + 1));
    out.d_c_regression = driver.frames().slice(0, std::max(out.k_hat_s_raw, want));
  }

  // Regressor set: robots observed through the whole convergence segment
  // with a shape estimate; inner set: robots currently inside the inner disk.
  for (const int id : out.d_c.ids_present(0, out.d_c.size() - 1))
    if (out.pattern.h_of(id)) out.ids_f.push_back(id);
  const auto fov = driver.fov();
  for (const int id : out.ids_f) {
    const auto z = driver.observed_smoothed(id);
    if (z && distance(*z, fov.center) <= fov.r_h) out.ids_h_init.push_back(id);
  }
  if (out.ids_h_init.empty()) out.ids_h_init = out.ids_f;

  // Working estimate: sparse per-row selection with the disk-model distance
  // prior (the interaction radius is at most half the observation radius).
  // One settling transient rarely excites every global direction, so a dense
  // solve is reserved for the reporting/metrics path.
  out.w_init = sparse_iv_estimate(out.d_c_regression, out.pattern, out.ids_h_init, out.ids_f,
                                  sc.formation.step, sc.sigma, 0.5 * sc.r_f, 0, 4, &out.weak_edges);
  return out;
}

}  // namespace mrn
