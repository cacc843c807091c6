#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mrn/driver.hpp"
#include "mrn/observer.hpp"
#include "mrn/topo.hpp"
#include "mrn/vec2.hpp"

namespace mrn {

// ---------------------------------------------------------------------------
// Stage-3 products.

struct RadiusEstimate {
  std::optional<double> r_hat_o;
  std::optional<double> r_hat_c;
  long break_step = -1;
};

// One regression sample of the avoidance response, one row per axis. The
// output is the target robot's mean observed velocity over the response
// window that followed the recorded configuration.
struct AvoidancePair {
  long k = 0;
  int axis = 0;
  double q_in[4] = {0, 0, 0, 0};  // rel obstacle, rel goal, own velocity, obstacle velocity
  double q_out = 0.0;             // m/s along the axis
};

struct ExcitationPlan {
  enum class Mode { Orthogonal, Intermittent };
  Mode mode = Mode::Orthogonal;
  int target_j = -1;   // directly excited robot
  int watched_i = -1;  // out-neighbor monitored for the connection break
  double lambda = 1.0;
  double alpha = 0.5;
  int k_l = 20;
  double beta = 0.05;
};

// ---------------------------------------------------------------------------
// Desired-position prediction. Steady branch extrapolates the learned track;
// otherwise a one-step consensus predictor over the estimated in-edges plus
// the universal pattern drift (the anchored offsets absorb the tracking lag,
// so every robot advances at the estimated speed on the pattern).

inline Vec2 track_position(const SteadyPatternEstimate& pattern, int robot, long step, double dt) {
  const auto s = pattern.s_of(robot);
  return *s + pattern.c_hat * (dt * static_cast<double>(step));
}

inline bool in_neighborhood_steady(const SimDriver& driver, const WEstimate& est,
                                   const SteadyPatternEstimate& pattern, int robot, int window = 25) {
  const auto& frames = driver.frames();
  if (frames.size() < window + 1) return false;
  const double dt = driver.cfg().step;
  auto steady_one = [&](int id) {
    const int n = frames.size();
    if (!frames.present(id, n - 1) || !frames.present(id, n - 1 - window)) return false;
    const Vec2 v = (frames.at(id, n - 1) - frames.at(id, n - 1 - window)) / (window * dt);
    const double tol =
        std::max(0.1, 5.0 * driver.scenario().sigma * 1.414 / (window * dt) * std::sqrt(2.0));
    return (v - pattern.c_hat).norm() <= tol;
  };
  if (!steady_one(robot)) return false;
  for (const int j : est.estimated_in_neighbors(robot))
    if (!steady_one(j)) return false;
  return true;
}

inline std::optional<Vec2> predict_desired(const SimDriver& driver, const WEstimate& est,
                                           const SteadyPatternEstimate& pattern, int robot) {
  if (!pattern.s_of(robot)) return std::nullopt;
  const double dt = driver.cfg().step;
  if (in_neighborhood_steady(driver, est, pattern, robot))
    return track_position(pattern, robot, driver.now(), dt);
  if (!est.has_row(robot)) return track_position(pattern, robot, driver.now(), dt);
  const auto zi = driver.observed_smoothed(robot);
  if (!zi) return std::nullopt;
  Vec2 rate{};
  const auto hi = pattern.h_of(robot);
  for (const int j : est.estimated_in_neighbors(robot)) {
    const auto zj = driver.observed_smoothed(j);
    const auto hj = pattern.h_of(j);
    if (!zj || !hj) continue;
    rate += (*zj - *zi - (*hj - *hi)) * est.a_hat(robot, j, dt);
  }
  return *zi + (rate + pattern.c_hat) * dt;
}

// ---------------------------------------------------------------------------
// Deviation monitors.

// Sliding mean of the distance between a robot's observations and a locally
// anchored steady track; fires when a sustained deviation exceeds the
// threshold. The anchor is refreshed while unfrozen, so slow drift of the
// stage-1 track fit cannot masquerade as a reaction. Used by the
// detection-radius probe, where the reaction is quasi-static.
class TrackDeviationMonitor {
 public:
  TrackDeviationMonitor(int robot, double threshold, int window)
      : robot_(robot), threshold_(threshold), window_(window) {}

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  bool update(const SimDriver& driver, const SteadyPatternEstimate& pattern) {
    const auto z = driver.observed(robot_);
    if (!z) return false;
    if (!frozen_) {
      const auto smoothed = driver.observed_smoothed(robot_, 2 * window_);
      if (!smoothed) return false;
      anchor_ = *smoothed + pattern.c_hat * (driver.cfg().step * (2 * window_ - 1) / 2.0);
      anchor_step_ = driver.now();
      residuals_.clear();
      return false;
    }
    const Vec2 track =
        anchor_ + pattern.c_hat * (driver.cfg().step * static_cast<double>(driver.now() - anchor_step_));
    residuals_.push_back(*z - track);
    if (static_cast<int>(residuals_.size()) > window_) residuals_.pop_front();
    if (static_cast<int>(residuals_.size()) < window_) return false;
    Vec2 mean{};
    for (const auto& r : residuals_) mean += r;
    mean = mean / static_cast<double>(window_);
    return mean.norm() > threshold_;
  }

 private:
  int robot_;
  double threshold_;
  int window_;
  Vec2 anchor_;
  long anchor_step_ = 0;
  bool frozen_ = false;
  std::deque<Vec2> residuals_;
};

inline double probe_threshold(double sigma, int window) {
  return std::max(8.0 * sigma * std::sqrt(2.0 / window), 0.02);
}

// Chained one-step-ahead prediction of one robot from the estimated
// interaction row, re-anchored every `window` steps. A broken in-edge makes
// the prediction keep integrating a coupling force the robot no longer
// feels, so the deviation ramps across the window.
class BreakMonitor {
 public:
  BreakMonitor(int watched, double beta, int window) : watched_(watched), beta_(beta), window_(window) {}

  int watched() const { return watched_; }
  double deviation() const { return last_deviation_; }
  void set_beta(double beta) { beta_ = beta; }
  void reset() {
    count_ = 0;
    last_deviation_ = 0.0;
  }

  // Returns the break step once the deviation exceeds beta.
  std::optional<long> update(const SimDriver& driver, const WEstimate& est,
                             const SteadyPatternEstimate& pattern) {
    if (fired_) return fire_step_;
    const double dt = driver.cfg().step;
    const auto z_obs = driver.observed(watched_);
    if (!z_obs) {
      count_ = 0;
      return std::nullopt;
    }
    if (count_ == 0) {
      const auto anchor = driver.observed_smoothed(watched_);
      if (!anchor) return std::nullopt;
      z_hat_ = *anchor;
    }
    // Advance the prediction one step with observed neighbor positions.
    Vec2 rate{};
    const auto hi = pattern.h_of(watched_);
    for (const int j : est.estimated_in_neighbors(watched_)) {
      const auto zj = driver.observed(j);
      const auto hj = pattern.h_of(j);
      if (!zj || !hj) continue;
      rate += (*zj - z_hat_ - (*hj - *hi)) * est.a_hat(watched_, j, dt);
    }
    z_hat_ += (rate + pattern.c_hat) * dt;
    ++count_;
    last_deviation_ = (z_hat_ - *z_obs).norm();
    if (last_deviation_ > beta_) {
      fired_ = true;
      fire_step_ = driver.now();
      return fire_step_;
    }
    if (count_ >= window_) count_ = 0;  // re-anchor
    return std::nullopt;
  }

 private:
  int watched_;
  double beta_;
  int window_;
  Vec2 z_hat_;
  int count_ = 0;
  double last_deviation_ = 0.0;
  bool fired_ = false;
  long fire_step_ = -1;
};

// Rolling evidence for one hypothesized coupling: within-window correlation
// between the watched robot's and the lever's deviations from their steady
// tracks, on block means so observation noise cancels. No dependence on the
// fitted interaction rows — a noisy support entry cannot fake or hide the
// signature. A live edge shows a strong correlation while the lever is
// displaced; the disk-model break shows that correlation dying while the
// lever deviation keeps growing.
class CouplingTracker {
 public:
  CouplingTracker(int watched, int lever, int block, int long_blocks, int short_blocks)
      : watched_(watched), lever_(lever), block_(block), long_blocks_(long_blocks),
        short_blocks_(short_blocks) {}

  void update(const SimDriver& driver, const SteadyPatternEstimate& pattern) {
    const double dt = driver.cfg().step;
    const auto z_w = driver.observed(watched_);
    const auto z_l = driver.observed(lever_);
    if (!z_w || !z_l) {
      in_block_ = 0;
      return;
    }
    if (!anchored_) {
      // Anchor every visible robot; deviations are then measured against the
      // calm crowd's mean deviation, so a shared drift of the extrapolated
      // tracks (speed-estimate error) cancels instead of posing as coupling.
      bool ok = true;
      for (const int id : driver.last_frame().ids) {
        const auto szz = driver.observed_smoothed(id, 2 * block_);
        if (!szz) {
          ok = false;
          break;
        }
        anchors_[id] = *szz + pattern.c_hat * (dt * (2 * block_ - 1) / 2.0);
      }
      if (!ok || !anchors_.count(watched_) || !anchors_.count(lever_)) {
        anchors_.clear();
        return;
      }
      anchor_step_ = driver.now();
      anchored_ = true;
    }
    block_w_ += *z_w;
    block_l_ += *z_l;
    Vec2 ref{};
    int n_ref = 0;
    for (const auto& [id, anchor] : anchors_) {
      if (id == watched_ || id == lever_) continue;
      const auto z = driver.observed(id);
      if (!z) continue;
      const double age0 = dt * static_cast<double>(driver.now() - anchor_step_);
      ref += *z - (anchor + pattern.c_hat * age0);
      ++n_ref;
    }
    if (n_ref > 0) block_ref_ += ref / static_cast<double>(n_ref);
    if (++in_block_ >= block_) {
      const double age = dt * (static_cast<double>(driver.now() - anchor_step_) -
                               (block_ - 1) / 2.0);
      const Vec2 track_w = anchors_[watched_] + pattern.c_hat * age;
      const Vec2 track_l = anchors_[lever_] + pattern.c_hat * age;
      const Vec2 ref_dev = block_ref_ / block_;
      samples_.push_back(
          {block_l_ / block_ - track_l - ref_dev, block_w_ / block_ - track_w - ref_dev});
      if (static_cast<int>(samples_.size()) > long_blocks_) samples_.pop_front();
      block_w_ = {};
      block_l_ = {};
      block_ref_ = {};
      in_block_ = 0;
    }
  }

  // t-statistic of the demeaned lever-to-watched regression over the last
  // `blocks` block samples.
  double t_stat(int blocks) const {
    const int n = std::min<int>(blocks, static_cast<int>(samples_.size()));
    if (n < 4) return 0.0;
    Vec2 mean_r{}, mean_i{};
    const int start = static_cast<int>(samples_.size()) - n;
    for (int k = start; k < static_cast<int>(samples_.size()); ++k) {
      mean_r += samples_[k].lever_dev;
      mean_i += samples_[k].watched_dev;
    }
    mean_r = mean_r / static_cast<double>(n);
    mean_i = mean_i / static_cast<double>(n);
    double srr = 0.0, sri = 0.0;
    for (int k = start; k < static_cast<int>(samples_.size()); ++k) {
      const Vec2 r = samples_[k].lever_dev - mean_r;
      const Vec2 i = samples_[k].watched_dev - mean_i;
      srr += r.dot(r);
      sri += r.dot(i);
    }
    if (srr < 1e-10) return 0.0;
    const double alpha = sri / srr;
    double sse = 0.0;
    for (int k = start; k < static_cast<int>(samples_.size()); ++k) {
      const Vec2 r = samples_[k].lever_dev - mean_r;
      const Vec2 i = samples_[k].watched_dev - mean_i;
      const Vec2 res = i - r * alpha;
      sse += res.dot(res);
    }
    const double dof = std::max(1.0, 2.0 * n - 2.0);
    const double sigma2 = sse / dof;
    if (sigma2 < 1e-16) return alpha > 0.0 ? 100.0 : -100.0;
    return alpha / std::sqrt(sigma2 / srr);
  }

  double t_long() const { return t_stat(long_blocks_); }
  double t_short() const { return t_stat(short_blocks_); }
  int sample_count() const { return static_cast<int>(samples_.size()); }
  int short_blocks() const { return short_blocks_; }
  int block() const { return block_; }

  // Lag (in blocks) at which the lever-to-watched correlation peaks. A
  // direct coupling answers almost immediately; a multi-hop chain reaction
  // accumulates seconds of delay, and pressing it would break some
  // intermediate edge instead of the pair being measured.
  int best_lag(int max_lag = 8) const {
    const int n = static_cast<int>(samples_.size());
    if (n < max_lag + 6) return 0;
    double best = -1.0;
    int arg = 0;
    for (int lag = 0; lag <= max_lag; ++lag) {
      Vec2 mr{}, mi{};
      const int count = n - lag;
      for (int k = 0; k < count; ++k) {
        mr += samples_[k].lever_dev;
        mi += samples_[k + lag].watched_dev;
      }
      mr = mr / static_cast<double>(count);
      mi = mi / static_cast<double>(count);
      double srr = 0.0, sii = 0.0, sri = 0.0;
      for (int k = 0; k < count; ++k) {
        const Vec2 r = samples_[k].lever_dev - mr;
        const Vec2 i = samples_[k + lag].watched_dev - mi;
        srr += r.dot(r);
        sii += i.dot(i);
        sri += r.dot(i);
      }
      const double denom = std::sqrt(std::max(1e-12, srr * sii));
      const double corr = std::abs(sri) / denom;
      if (corr > best) {
        best = corr;
        arg = lag;
      }
    }
    return arg;
  }

 private:
  struct Sample {
    Vec2 lever_dev;
    Vec2 watched_dev;
  };
  int watched_, lever_, block_, long_blocks_, short_blocks_;
  bool anchored_ = false;
  std::map<int, Vec2> anchors_;
  long anchor_step_ = 0;
  int in_block_ = 0;
  Vec2 block_w_, block_l_, block_ref_;
  std::deque<Sample> samples_;
};

// Two-segment fit of a separation history: the disk-gate cut shows as a
// slope knee (following pace before, released pace after); the separation at
// the knee is the radius reading, free of detection lag.
inline std::optional<double> knee_radius(const std::deque<double>& hist) {
  const int n = static_cast<int>(hist.size());
  if (n < 40) return std::nullopt;
  auto segment_sse = [&](int a, int b) {  // inclusive bounds, fit y = p + q*k
    const int m = b - a + 1;
    double sk = 0, skk = 0, sy = 0, sky = 0;
    for (int k = a; k <= b; ++k) {
      sk += k;
      skk += static_cast<double>(k) * k;
      sy += hist[k];
      sky += k * hist[k];
    }
    const double det = m * skk - sk * sk;
    if (std::abs(det) < 1e-12) return 0.0;
    const double q = (m * sky - sk * sy) / det;
    const double p = (sy - q * sk) / m;
    double sse = 0;
    for (int k = a; k <= b; ++k) {
      const double e = hist[k] - (p + q * k);
      sse += e * e;
    }
    return sse;
  };
  int best = -1;
  double best_sse = 1e300;
  for (int m = 12; m + 12 < n; m += 2) {
    const double sse = segment_sse(0, m) + segment_sse(m, n - 1);
    if (sse < best_sse) {
      best_sse = sse;
      best = m;
    }
  }
  if (best < 0) return std::nullopt;
  return hist[best];
}

// Interaction-radius readout at the break step: largest estimated-in-neighbor
// separation of the watched robot.
inline std::optional<double> radius_from_break(const SimDriver& driver, const WEstimate& est,
                                               int watched) {
  const auto zi = driver.observed_smoothed(watched);
  if (!zi) return std::nullopt;
  double best = -1.0;
  for (const int j : est.estimated_in_neighbors(watched)) {
    const auto zj = driver.observed_smoothed(j);
    if (zj) best = std::max(best, distance(*zi, *zj));
  }
  if (best < 0.0) return std::nullopt;
  return best;
}

// ---------------------------------------------------------------------------
// Avoidance-pair recorder. One pending sample per step while the attacker is
// inside the learned detection radius of the target; the output fills in
// once the response window has elapsed.

class PairRecorder {
 public:
  PairRecorder(int response_window, int velocity_window)
      : response_window_(response_window), velocity_window_(velocity_window) {}

  void set_target(int robot) { target_ = robot; }
  int target() const { return target_; }

  // Call once per step after the driver advanced. `r_o_limit` gates the
  // recording range, `goal` is the attacker's desired-position estimate for
  // the target.
  void update(const SimDriver& driver, const std::optional<Vec2>& goal, double r_o_limit) {
    if (target_ < 0) return;
    const auto& frames = driver.frames();
    const int n = frames.size();
    const double dt = driver.cfg().step;

    // Resolve pending samples whose window elapsed.
    while (!pending_.empty() && pending_.front().frame + response_window_ < n) {
      const Pending p = pending_.front();
      pending_.pop_front();
      if (!frames.present(p.robot, p.frame) || !frames.present(p.robot, p.frame + response_window_))
        continue;
      const Vec2 out = (frames.at(p.robot, p.frame + response_window_) - frames.at(p.robot, p.frame)) /
                       (response_window_ * dt);
      for (int axis = 0; axis < 2; ++axis) {
        AvoidancePair pair;
        pair.k = p.step;
        pair.axis = axis;
        for (int f = 0; f < 4; ++f) pair.q_in[f] = axis == 0 ? p.q_in[f].x : p.q_in[f].y;
        pair.q_out = axis == 0 ? out.x : out.y;
        pairs_.push_back(pair);
      }
    }

    const auto zv = driver.observed(target_);
    if (!zv || !goal) return;
    const Vec2 za = driver.state().attacker_position;
    if (distance(*zv, za) >= r_o_limit) return;
    const auto v_v = velocity_of(driver, target_);
    if (!v_v) return;
    Pending p;
    p.robot = target_;
    p.frame = n - 1;
    p.step = driver.now();
    const Vec2 rel_obstacle = *zv - za;
    const Vec2 rel_goal = *goal - *zv;
    p.q_in[0] = {rel_obstacle.x, rel_obstacle.y};
    p.q_in[1] = {rel_goal.x, rel_goal.y};
    p.q_in[2] = {v_v->x, v_v->y};
    p.q_in[3] = {driver.state().attacker_velocity.x, driver.state().attacker_velocity.y};
    pending_.push_back(p);
  }

  const std::vector<AvoidancePair>& pairs() const { return pairs_; }
  std::vector<AvoidancePair>& mutable_pairs() { return pairs_; }

 private:
  struct Pending {
    int robot = -1;
    int frame = 0;
    long step = 0;
    Vec2 q_in[4];
  };

  std::optional<Vec2> velocity_of(const SimDriver& driver, int id) const {
    const auto& frames = driver.frames();
    const int n = frames.size();
    if (n < velocity_window_ + 1) return std::nullopt;
    if (!frames.present(id, n - 1) || !frames.present(id, n - 1 - velocity_window_)) return std::nullopt;
    return (frames.at(id, n - 1) - frames.at(id, n - 1 - velocity_window_)) /
           (velocity_window_ * driver.cfg().step);
  }

  int response_window_;
  int velocity_window_;
  int target_ = -1;
  std::deque<Pending> pending_;
  std::vector<AvoidancePair> pairs_;
};

// ---------------------------------------------------------------------------
// Steering helpers shared by the stage-3 and stage-4 controllers.

// Direction orthogonal to the pattern motion, signed away from the observed
// formation centroid.
inline Vec2 orthogonal_excite_direction(const Vec2& motion_dir, const Vec2& centroid,
                                        const Vec2& target_slot) {
  const Vec2 perp = motion_dir.normalized().perp();
  return (target_slot - centroid).dot(perp) >= 0.0 ? perp : -perp;
}

inline Vec2 observed_centroid(const SimDriver& driver) {
  const auto& f = driver.last_frame();
  Vec2 acc{};
  if (f.ids.empty()) return acc;
  for (const auto& z : f.positions) acc += z;
  return acc / static_cast<double>(f.positions.size());
}

// Velocity command moving the attacker toward `goal`, capped at `speed`, and
// deflected so the next position never enters the safety bubble of any robot
// except `exempt`.
inline Vec2 steer_with_safety(const SimDriver& driver, const Vec2& goal, double speed, int exempt = -1,
                              double margin = 0.1) {
  const auto& s = driver.state();
  const double dt = driver.cfg().step;
  const double r_keep = driver.cfg().radius_s + margin;
  Vec2 v = ((goal - s.attacker_position) / dt).clamped(speed);
  for (int pass = 0; pass < 4; ++pass) {
    const Vec2 next = s.attacker_position + v * dt;
    bool ok = true;
    for (int i = 0; i < driver.cfg().n_robots; ++i) {
      if (i == exempt || !s.membership[i]) continue;
      const Vec2 zi = s.positions[i];
      if (distance(next, zi) < r_keep) {
        // Slide along the bubble: remove the inward radial component.
        const Vec2 out = (next - zi).normalized();
        const double inward = std::min(0.0, v.dot(out));
        v = (v - out * inward) + out * (0.5 * speed);
        v = v.clamped(speed);
        ok = false;
        break;
      }
    }
    if (ok) break;
  }
  return v;
}

// Two-phase approach to a pressing pose: first swing to a staging point on
// the pressing side of the robot (never cutting through it), then close in.
class PressApproach {
 public:
  Vec2 update(const SimDriver& driver, int robot, const Vec2& press_pose, double speed) {
    const auto zt = driver.observed_smoothed(robot);
    if (!zt) return {};
    if (!staged_) {
      const Vec2 staging = *zt + (press_pose - *zt).normalized({0.0, 1.0}) * 2.6;
      if (distance(driver.state().attacker_position, staging) < 0.4) {
        staged_ = true;
      } else {
        return steer_with_safety(driver, staging, speed, -1, 0.5);
      }
    }
    return steer_with_safety(driver, press_pose, speed, robot, 0.05);
  }

 private:
  bool staged_ = false;
};

// ---------------------------------------------------------------------------
// Detection-radius probe: approach a steady robot head-on, watch for the
// first sustained deviation from its track, and read the distance.

class ProbeSession {
 public:
  ProbeSession(int target, const SteadyPatternEstimate& pattern, const EstimatorParams& est,
               double sigma)
      : target_(target),
        pattern_(pattern),
        monitor_(target, probe_threshold(sigma, est.probe_window), est.probe_window),
        slow_speed_(est.probe_speed),
        threshold_(probe_threshold(sigma, est.probe_window)),
        window_(est.probe_window) {}

  bool done() const { return result_.has_value() || failed_; }
  bool failed() const { return failed_; }
  std::optional<double> result() const { return result_; }
  int target() const { return target_; }

  Vec2 control(const SimDriver& driver) {
    const auto zt = driver.observed_smoothed(target_);
    if (!zt) return {};
    const Vec2 za = driver.state().attacker_position;
    const double d = distance(za, *zt);
    if (!monitor_.frozen() && d < 2.9) {
      monitor_.freeze();  // baseline locked before entry
      frozen_at_ = driver.now();
    }
    // The track extrapolation drifts with the speed-estimate error; refresh
    // the anchor if nothing has fired for a long stretch.
    if (monitor_.frozen() && driver.now() - frozen_at_ > 900) monitor_ = remake_monitor(driver);
    const bool fired = monitor_.update(driver, pattern_);  // unfrozen calls keep the anchor fresh
    if (monitor_.frozen() && fired) {
      result_ = d;
      return {};
    }
    if (d <= driver.cfg().radius_s + 0.06) {
      failed_ = true;  // never reacted before the safety shell: inconsistent setup
      return {};
    }
    // Staged approach, always closing faster than the pattern drifts.
    const double c_speed = pattern_.c_hat.norm();
    const double speed = d > 2.9 ? driver.cfg().max_accel
                                 : std::min(driver.cfg().max_accel, c_speed + slow_speed_);
    const Vec2 goal = *zt + pattern_.c_hat * (driver.cfg().step * 2.0);
    return steer_with_safety(driver, goal, speed, target_, 0.05);
  }

 private:
  TrackDeviationMonitor remake_monitor(const SimDriver& driver) {
    TrackDeviationMonitor m(target_, threshold_, window_);
    m.update(driver, pattern_);  // seeds a fresh anchor
    frozen_at_ = driver.now();
    m.freeze();
    return m;
  }

  int target_;
  SteadyPatternEstimate pattern_;
  TrackDeviationMonitor monitor_;
  double slow_speed_;
  double threshold_ = 0.0;
  int window_ = 0;
  long frozen_at_ = 0;
  std::optional<double> result_;
  bool failed_ = false;
};

// ---------------------------------------------------------------------------
// Orthogonal excitation of one lever robot while monitoring one of its
// suspected out-neighbors for a connection break.

class OrthogonalExciteSession {
 public:
  OrthogonalExciteSession(const ExcitationPlan& plan, const SteadyPatternEstimate& pattern,
                          double r_hat_o, int budget_steps)
      : plan_(plan),
        pattern_(pattern),
        r_o_(r_hat_o),
        budget_(budget_steps),
        tracker_(plan.watched_i, plan.target_j, 12, 24, 6) {}

  bool done() const { return result_.has_value() || exhausted_; }
  bool exhausted() const { return exhausted_; }
  std::optional<long> break_step() const { return result_; }
  std::optional<double> radius_readout() const { return radius_; }
  bool edge_confirmed() const { return confirmed_; }

  Vec2 control(const SimDriver& driver, const WEstimate& est) {
    if (--budget_ < 0) {
      exhausted_ = true;
      return {};
    }
    const auto zi = driver.observed_smoothed(plan_.watched_i);
    const auto zj = driver.observed_smoothed(plan_.target_j);
    if (!zi || !zj) return {};
    const double sep = distance(*zi, *zj);
    tracker_.update(driver, pattern_);
    ++steps_;

    const double t_short = tracker_.t_short();
    peak_t_ = std::max(peak_t_ * 0.995, t_short);  // slowly forgetting peak
    if (!confirmed_) {
      if (tracker_.t_long() > 3.0) {
        if (tracker_.best_lag() > 2) {
          exhausted_ = true;  // responsive but through a chain, not this edge
          return {};
        }
        confirmed_ = true;
        confirm_separation_ = sep;
      } else if (steps_ > 900) {
        exhausted_ = true;  // lever does not drive the watched robot
        return {};
      }
    } else if (pending_break_step_ < 0) {
      sep_history_.push_back(sep);
      if (static_cast<int>(sep_history_.size()) > 50) sep_history_.pop_front();
      const double growth =
          sep_history_.size() >= 50
              ? (sep_history_.back() - sep_history_.front()) /
                    (static_cast<double>(sep_history_.size() - 1) * driver.cfg().step)
              : 0.0;
      // Break trigger: the recent coupling evidence collapses while the pair
      // separation is still actively being stretched past the confirmation
      // point. A press that has merely saturated (or a chain reaction) shows
      // the correlation fading with no growth, and never fires.
      if (sep > confirm_separation_ + 0.25 && tracker_.sample_count() >= 12 && peak_t_ > 3.5 &&
          growth > 0.04 && t_short < 1.0) {
        pending_break_step_ = driver.now();
        pending_sep_ = sep;
        const double rate = sep_history_.size() >= 50
                                ? (sep_history_.back() - sep_history_.front()) /
                                      (static_cast<double>(sep_history_.size() - 1) * driver.cfg().step)
                                : 0.0;
        const double lag = 0.5 * tracker_.short_blocks() * tracker_.block() * driver.cfg().step;
        pending_radius_ = std::max(confirm_separation_, sep - std::max(0.0, rate) * lag);
        verify_left_ = 12 * 12;  // hold the press while the evidence settles
      }
    } else {
      // Verification: a genuine break keeps the recent coupling dead.
      if (t_short > 1.5) {
        pending_break_step_ = -1;  // transient dip; keep pressing
      } else if (--verify_left_ <= 0) {
        result_ = pending_break_step_;
        radius_ = pending_radius_;
        return {};
      }
    }
    const Vec2 slot = track_position(pattern_, plan_.target_j, driver.now(), driver.cfg().step);
    const Vec2 push = orthogonal_excite_direction(pattern_.c_hat, observed_centroid(driver), slot);
    // Press pose: behind the target along the push direction, kept inside
    // the learned detection radius of the target's slot.
    Vec2 pose = *zj - push * press_depth_;
    if (distance(pose, slot) >= r_o_ - 0.05)
      pose = slot + (pose - slot).normalized() * (r_o_ - 0.05);
    return approach_.update(driver, plan_.target_j, pose, driver.cfg().max_accel);
  }

 private:
  ExcitationPlan plan_;
  SteadyPatternEstimate pattern_;
  double r_o_;
  int budget_;
  CouplingTracker tracker_;
  PressApproach approach_;
  double press_depth_ = 0.8;
  long steps_ = 0;
  bool confirmed_ = false;
  double confirm_separation_ = 0.0;
  double peak_t_ = 0.0;
  long pending_break_step_ = -1;
  double pending_sep_ = 0.0;
  double pending_radius_ = 0.0;
  int verify_left_ = 0;
  std::deque<double> sep_history_;
  std::optional<long> result_;
  std::optional<double> radius_;
  bool exhausted_ = false;
};

// Intermittent excitation: hop to an interpolated pose between the target
// and its desired position once per period, hold still in between, and run
// the break test at the end of each period.
class IntermittentExciteSession {
 public:
  IntermittentExciteSession(const ExcitationPlan& plan, const SteadyPatternEstimate& pattern,
                            double r_hat_o, int budget_steps, Rng& rng)
      : plan_(plan),
        pattern_(pattern),
        r_o_(r_hat_o),
        budget_(budget_steps),
        rng_(&rng),
        tracker_(plan.watched_i, plan.target_j, 12, 24, 6) {}

  bool done() const { return result_.has_value() || exhausted_ || infeasible_; }
  bool infeasible() const { return infeasible_; }
  std::optional<long> break_step() const { return result_; }
  std::optional<double> radius_readout() const { return radius_; }

  Vec2 control(const SimDriver& driver, const WEstimate& est) {
    if (--budget_ < 0) {
      exhausted_ = true;
      return {};
    }
    const long k = driver.now();
    const auto zw = driver.observed_smoothed(plan_.watched_i);
    const auto zi = driver.observed_smoothed(plan_.target_j);
    if (!zw || !zi) return {};
    const double sep = distance(*zw, *zi);
    tracker_.update(driver, pattern_);
    ++steps_;
    if (!confirmed_) {
      if (tracker_.t_long() > 3.0) {
        if (tracker_.best_lag() > 2) {
          exhausted_ = true;  // chain reaction, not this edge
          return {};
        }
        confirmed_ = true;
        confirm_separation_ = sep;
      } else if (steps_ > 1200) {
        exhausted_ = true;
        return {};
      }
    } else if (k % plan_.k_l == plan_.k_l - 1) {
      // Break test at the end of each excitation period.
      sep_hist_i_.push_back(sep);
      if (static_cast<int>(sep_hist_i_.size()) > 8) sep_hist_i_.pop_front();
      const double growth =
          sep_hist_i_.size() >= 4
              ? (sep_hist_i_.back() - sep_hist_i_.front()) /
                    (static_cast<double>(sep_hist_i_.size() - 1) * plan_.k_l * driver.cfg().step)
              : 0.0;
      if (sep > confirm_separation_ + 0.25 && tracker_.sample_count() >= 12 && growth > 0.02 &&
          tracker_.t_short() < 1.0) {
        result_ = driver.now();
        radius_ = sep;
        return {};
      }
    }
    if (k % plan_.k_l == 0 || !have_pose_) {
      const Vec2 slot = track_position(pattern_, plan_.target_j, driver.now(), driver.cfg().step);
      // Feasible interpolation weights: inside the detection radius of the
      // slot yet outside the safety shell of the robot itself.
      const double d = distance(slot, *zi);
      const double r_s = driver.cfg().radius_s;
      double alpha_lo = d > 1e-9 ? std::min(1.0, (r_s + 0.15) / d) : 1.0;
      double alpha_hi = d > 1e-9 ? std::min(1.0, (r_o_ - 0.05) / d) : 1.0;
      if (d < r_s + 0.2) {  // target sits on its slot: hover at the shell
        alpha_lo = 1.0;
        alpha_hi = 1.0;
      }
      if (alpha_lo > alpha_hi) {
        infeasible_ = true;
        return {};
      }
      const double alpha = alpha_lo + (alpha_hi - alpha_lo) * rng_->uniform();
      pose_ = *zi + (slot - *zi) * alpha;
      if (d < r_s + 0.2) pose_ = slot + Vec2{r_s + 0.2, 0.0};
      have_pose_ = true;
    }
    pose_ += pattern_.c_hat * driver.cfg().step;  // ride along with the pattern
    return approach_.update(driver, plan_.target_j, pose_, driver.cfg().max_accel);
  }

 private:
  ExcitationPlan plan_;
  SteadyPatternEstimate pattern_;
  double r_o_;
  int budget_;
  Rng* rng_;
  CouplingTracker tracker_;
  PressApproach approach_;
  Vec2 pose_;
  bool have_pose_ = false;
  long steps_ = 0;
  bool confirmed_ = false;
  double confirm_separation_ = 0.0;
  std::deque<double> sep_hist_i_;
  std::optional<long> result_;
  std::optional<double> radius_;
  bool exhausted_ = false;
  bool infeasible_ = false;
};

// Radius measurement by herding. Outward phase: drive one verifiably
// reactive robot away at full rate; coupling trackers on the inner robots
// confirm its direct followers and register the coarse connection cuts.
// Inward phase: shepherd the robot back at a controlled pace — the attacker
// blocks the path home and walks slowly, the robot trailing behind its
// repulsion bubble — and read each follower's re-link kick: the instant its
// separation re-enters the interaction radius, a follower acquires a large
// consensus pull and jumps off its track. The slow inward crossing makes
// that reading tight; a small margin covers the detection lag so the radius
// is never understated.
class HerdRadiusSession {
 public:
  HerdRadiusSession(int target, const std::vector<int>& watchers, const SteadyPatternEstimate& pattern,
                    double r_hat_o, int budget_steps)
      : target_(target), pattern_(pattern), r_o_(r_hat_o), budget_(budget_steps) {
    for (const int w : watchers)
      if (w != target) watchers_.push_back({w, CouplingTracker(w, target, 6, 30, 4)});
  }

  bool done() const { return done_ || exhausted_; }
  std::optional<double> result() const { return result_; }
  std::optional<long> break_step() const { return break_step_; }
  int readings() const { return static_cast<int>(readings_.size()); }

  // Robots whose rows are invalid over the herd span: the herded target and
  // everything that demonstrably followed or lost an edge.
  std::vector<int> disturbed_ids() const {
    std::vector<int> out{target_};
    for (const auto& w : watchers_)
      if (w.confirmed || w.cut) out.push_back(w.id);
    return out;
  }

  Vec2 control(const SimDriver& driver) {
    if (--budget_ < 0) {
      finish();
      done_ = result_.has_value();
      exhausted_ = !done_;
      return {};
    }
    const auto zt = driver.observed_smoothed(target_);
    if (!zt) return {};
    if (!started_) {
      // Herd along the ray with the widest angular clearance from nearby
      // robots: followers chase from their side and snap back there, keeping
      // the press corridor open.
      const Vec2 away = (*zt - observed_centroid(driver)).normalized({0.0, -1.0});
      double best_score = -1e9;
      for (int a = 0; a < 24; ++a) {
        const double ang = 2.0 * 3.14159265358979 * a / 24.0;
        const Vec2 dir{std::cos(ang), std::sin(ang)};
        double min_angle = 1e9;
        for (const int id : driver.last_frame().ids) {
          if (id == target_) continue;
          const auto zn = driver.observed(id);
          if (!zn || distance(*zn, *zt) > 6.0) continue;
          const Vec2 rel = (*zn - *zt).normalized();
          min_angle = std::min(min_angle, std::acos(std::max(-1.0, std::min(1.0, dir.dot(rel)))));
        }
        const double score = std::min(min_angle, 1.2) + 0.05 * dir.dot(away);
        if (score > best_score) {
          best_score = score;
          herd_dir_ = dir;
        }
      }
      started_ = true;
    }
    ++steps_;
    return phase_ == 0 ? control_out(driver, *zt) : control_in(driver, *zt);
  }

 private:
  struct Watcher {
    int id;
    CouplingTracker tracker;
    bool confirmed = false;
    bool cut = false;
    double peak_t = 0.0;
    double confirm_sep = 0.0;
    std::deque<double> sep_hist;
    double cut_sep = 0.0;
    // Inward phase bookkeeping.
    bool armed = false;
    bool kicked = false;
    double prev_sep = 1e9;
    Vec2 anchor;
    long anchor_step = 0;
    std::deque<Vec2> residuals;
  };

  Vec2 control_out(const SimDriver& driver, const Vec2& zt) {
    const Vec2 target_track = track_position(pattern_, target_, driver.now(), driver.cfg().step);
    const double target_dev = distance(zt, target_track);
    for (auto& w : watchers_) {
      w.tracker.update(driver, pattern_);
      if (w.cut) continue;
      const auto zw = driver.observed_smoothed(w.id);
      if (!zw) continue;
      const double sep = distance(*zw, zt);
      const double t_short = w.tracker.t_short();
      w.peak_t = std::max(w.peak_t * 0.995, t_short);
      if (!w.confirmed) {
        // Couplings are only attributable once the herd has displaced the
        // target well beyond ambient recovery wiggle.
        if (target_dev > 0.9 && w.tracker.t_long() > 3.0 && w.tracker.best_lag() <= 2) {
          w.confirmed = true;
          w.confirm_sep = sep;
#ifdef MRN_HERD_TRACE
          std::printf("[herd] confirm watcher=%d sep=%.3f k=%ld\n", w.id + 1, sep, driver.now());
#endif
        }
        continue;
      }
      w.sep_hist.push_back(sep);
      if (static_cast<int>(w.sep_hist.size()) > 50) w.sep_hist.pop_front();
      const double growth = w.sep_hist.size() >= 50
                                ? (w.sep_hist.back() - w.sep_hist.front()) /
                                      (49.0 * driver.cfg().step)
                                : 0.0;
      if (sep > std::max(w.confirm_sep + 1.0, r_o_ + 1.0) && growth > 0.05 && w.peak_t > 3.5 &&
          t_short < 1.0) {
        w.cut = true;
        w.cut_sep = sep;
        if (!break_step_) break_step_ = driver.now();
        last_cut_step_ = driver.now();
#ifdef MRN_HERD_TRACE
        std::printf("[herd] cut watcher=%d sep=%.3f k=%ld\n", w.id + 1, sep, driver.now());
#endif
      }
    }
    int confirmed = 0, cut = 0;
    for (const auto& w : watchers_) {
      confirmed += w.confirmed ? 1 : 0;
      cut += w.cut ? 1 : 0;
    }
    if (steps_ > 900 && confirmed == 0) {
      exhausted_ = true;  // nobody follows this robot
      return {};
    }
    // Every confirmed follower accounted for (cut detected or separation far
    // beyond plausible): stop dragging and turn around.
    bool accounted = cut >= 1;
    for (const auto& w : watchers_) {
      if (!w.confirmed || w.cut) continue;
      const auto zw = driver.observed_smoothed(w.id);
      if (zw && distance(*zw, zt) < 8.4) accounted = false;
    }
    if ((cut >= 1 && accounted) || (cut >= 1 && driver.now() - last_cut_step_ > 450)) {
      phase_ = 1;
      return {};
    }
    const Vec2 pose = zt - herd_dir_ * press_depth_;
    return approach_.update(driver, target_, pose, driver.cfg().max_accel);
  }

  Vec2 control_in(const SimDriver& driver, const Vec2& zt) {
    const double dt = driver.cfg().step;
    const Vec2 home = track_position(pattern_, target_, driver.now(), dt);
    const Vec2 to_home = (home - zt).normalized();
    const Vec2 za = driver.state().attacker_position;

    // Interception: the shepherd cannot overtake head-on, so it halts (the
    // pressed robot keeps fleeing and the gap opens), sprints down the home
    // path while the robot U-turns, plants a repulsion wall on the return
    // ray, waits for the watchers to settle, and then marches the wall home
    // at reading pace with the robot trailing at standoff.
    if (in_state_ == 0) {
      if (++halt_steps_ > 20) in_state_ = 1;
      return pattern_.c_hat * 0.0;
    }
    const double dist5 = distance(zt, home);
    if (in_state_ == 1) {
      const double my_dist = distance(za, home);
      if ((my_dist < dist5 - 1.4 && my_dist < 9.0) || ++sprint_steps_ > 900) {
        in_state_ = 2;
        wall_dist_ = std::min(9.0, dist5 - 1.5);
      } else {
        return steer_with_safety(driver, home, driver.cfg().max_accel, target_, 0.05);
      }
    }
    const Vec2 ray = (zt - home).normalized({0.0, 1.0});
    if (in_state_ == 2) {
      // Hold the wall until every plausible watcher is armed (or a cap).
      bool all_armed = true;
      for (const auto& w : watchers_)
        if (w.cut && w.cut_sep <= 10.0 && !w.armed && !w.kicked) all_armed = false;
      if ((dist5 < wall_dist_ + 2.2 && all_armed) || ++hold_steps_ > 700) in_state_ = 3;
    }
    if (in_state_ == 3) {
      wall_dist_ = std::max(1.0, wall_dist_ - walk_speed_ * dt);
      if (dist5 < 3.5) in_state_ = 4;  // clear off and let it dock
    }

    for (auto& w : watchers_) {
      // Only followers whose connection died at a plausible distance carry a
      // re-link reading; phantom far cuts would only add noise monitors.
      if (!w.cut || w.kicked || w.cut_sep > 10.0) continue;
      const auto zw = driver.observed(w.id);
      const auto zws = driver.observed_smoothed(w.id, 12);
      if (!zw || !zws) continue;
      const double sep = distance(*zws, zt);
      if (!w.armed) {
        // Slide the anchor until the watcher has settled back on a steady
        // track and the separation enters the reading corridor from above;
        // the short crossing window then leaves no room for drift.
        w.anchor = *zws + pattern_.c_hat * (dt * 11.0 / 2.0);
        w.anchor_step = driver.now();
        w.residuals.clear();
        const auto& frames = driver.frames();
        const int n = frames.size();
        bool settled = false;
        if (n > 101 && frames.present(w.id, n - 1) && frames.present(w.id, n - 101) &&
            frames.present(w.id, n - 51)) {
          const Vec2 v_long = (frames.at(w.id, n - 1) - frames.at(w.id, n - 101)) / (100.0 * dt);
          const Vec2 v_half = (frames.at(w.id, n - 1) - frames.at(w.id, n - 51)) / (50.0 * dt);
          settled = (v_long - pattern_.c_hat).norm() < 0.25 && (v_half - pattern_.c_hat).norm() < 0.3;
        }
        if (settled && sep < coarse_bound_ + 0.8 && sep > 4.5) w.armed = true;
        continue;
      }
      const Vec2 track =
          w.anchor + pattern_.c_hat * (dt * static_cast<double>(driver.now() - w.anchor_step));
      w.residuals.push_back(*zw - track);
      if (static_cast<int>(w.residuals.size()) > 10) w.residuals.pop_front();
      if (static_cast<int>(w.residuals.size()) < 10) continue;
      Vec2 mean{};
      for (const auto& r : w.residuals) mean += r;
      mean = mean / static_cast<double>(w.residuals.size());
      if (mean.norm() > 0.15) {
        w.kicked = true;
        // Margin covers the detection lag of the inward crossing; a kick at
        // an implausibly small separation records no reading.
        if (sep > 4.5) readings_.push_back(sep + 0.35);
#ifdef MRN_HERD_TRACE
        std::printf("[herd] kick watcher=%d sep=%.3f k=%ld\n", w.id + 1, sep, driver.now());
#endif
      }
    }
    int cut = 0, kicked = 0;
    for (const auto& w : watchers_) {
      cut += (w.cut && w.cut_sep <= 10.0) ? 1 : 0;
      kicked += w.kicked ? 1 : 0;
    }
    if ((kicked >= 1 && kicked == cut) || dist5 < 1.2 || cut == 0) {
      finish();
      done_ = result_.has_value();
      exhausted_ = !done_;
      return {};
    }
    if (in_state_ < 4) {
      const Vec2 wall_pose = home + ray * wall_dist_;
      return steer_with_safety(driver, wall_pose, driver.cfg().max_accel, target_, 0.05);
    }
    // Hold a station near the home track while the robot docks: picked once,
    // clear of every robot's track and of the return corridor.
    if (!have_station_) {
      double best = -1e9;
      for (int a = 0; a < 24; ++a) {
        const double ang = 2.0 * 3.14159265358979 * a / 24.0;
        const Vec2 dir{std::cos(ang), std::sin(ang)};
        if (dir.dot(herd_dir_) > 0.5) continue;  // keep out of the return corridor
        const Vec2 cand = home + dir * 3.5;
        double closest = 1e9;
        for (const int id : driver.last_frame().ids) {
          if (id == target_) continue;
          const auto z = driver.observed(id);
          if (z) closest = std::min(closest, distance(cand, *z));
        }
        if (closest > best) {
          best = closest;
          station_dir_ = dir;
        }
      }
      have_station_ = true;
    }
    return steer_with_safety(driver, home + station_dir_ * 3.5, driver.cfg().max_accel, -1, 0.05);
  }

  void finish() {
    if (readings_.empty()) return;
    std::vector<double> r = readings_;
    std::sort(r.begin(), r.end());
    result_ = r[(r.size() - 1) / 2];
  }

  int target_;
  SteadyPatternEstimate pattern_;
  double r_o_;
  int budget_;
  std::vector<Watcher> watchers_;
  PressApproach approach_;
  Vec2 herd_dir_;
  bool started_ = false;
  int phase_ = 0;
  int in_state_ = 0;
  int halt_steps_ = 0;
  int sprint_steps_ = 0;
  int hold_steps_ = 0;
  double wall_dist_ = 9.0;
  bool have_station_ = false;
  Vec2 station_dir_;
  Vec2 march_pose_;
  long steps_ = 0;
  long last_cut_step_ = 0;
  double press_depth_ = 0.7;
  double walk_speed_ = 0.35;
  double coarse_bound_ = 8.0;
  std::vector<double> readings_;
  std::optional<double> result_;
  std::optional<long> break_step_;
  bool done_ = false;
  bool exhausted_ = false;
};

// Reverse excitation: press from the far side to walk the displaced robot
// back onto its track, then retreat and let the neighborhood settle.
class ReverseExciteSession {
 public:
  ReverseExciteSession(int target, const SteadyPatternEstimate& pattern, double r_hat_o, double sigma,
                       int budget_steps)
      : target_(target), pattern_(pattern), r_o_(r_hat_o), sigma_(sigma), budget_(budget_steps) {}

  bool done() const { return done_ || exhausted_; }

  Vec2 control(const SimDriver& driver) {
    if (--budget_ < 0) {
      exhausted_ = true;
      return {};
    }
    const auto zt = driver.observed_smoothed(target_);
    if (!zt) return {};
    const Vec2 slot = track_position(pattern_, target_, driver.now(), driver.cfg().step);
    const double err = distance(*zt, slot);
    const double tol = std::max(3.0 * sigma_, 0.08);
    if (phase_ == 0) {
      if (err < tol) {
        phase_ = 1;
        return {};
      }
      const Vec2 away = (*zt - slot).normalized();
      const Vec2 pose = *zt + away * press_depth_;
      return approach_.update(driver, target_, pose, driver.cfg().max_accel);
    }
    // Retreat beyond the detection radius and wait for calm.
    const Vec2 za = driver.state().attacker_position;
    if (distance(za, *zt) < r_o_ + 0.4)
      return steer_with_safety(driver, za + (za - *zt).normalized() * 2.0, driver.cfg().max_accel, -1,
                               0.05);
    if (++settled_ > 40) done_ = true;
    return pattern_.c_hat;  // keep station
  }

 private:
  int target_;
  SteadyPatternEstimate pattern_;
  double r_o_;
  double sigma_;
  int budget_;
  PressApproach approach_;
  double press_depth_ = 0.8;
  int phase_ = 0;
  int settled_ = 0;
  bool done_ = false;
  bool exhausted_ = false;
};

}  // namespace mrn
