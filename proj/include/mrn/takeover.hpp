#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mrn/avoidance_model.hpp"
#include "mrn/driver.hpp"
#include "mrn/excitation.hpp"
#include "mrn/stage3.hpp"
#include "mrn/topo.hpp"

namespace mrn {

// ---------------------------------------------------------------------------
// Victim evaluation.

struct VictimScore {
  int id = -1;
  double score = 0.0;
  int in_degree = 0;
  int out_degree = 0;
  bool feasible = false;
};

inline std::vector<VictimScore> victim_scores(const WEstimate& est, const std::vector<int>& ids_h,
                                              double alpha1) {
  std::vector<VictimScore> out;
  for (const int i : ids_h) {
    VictimScore v;
    v.id = i;
    v.in_degree = static_cast<int>(est.estimated_in_neighbors(i).size());
    v.out_degree = static_cast<int>(est.estimated_out_neighbors(i).size());
    double col = 0.0, row = 0.0;
    for (const int h : est.ids_h) col += std::abs(est.w_of(h, i));
    for (const int f : est.ids_f) row += std::abs(est.w_of(i, f));
    v.score = v.out_degree + col - v.in_degree - row;
    v.feasible = v.out_degree >= 1 && v.in_degree <= static_cast<int>(alpha1);
    out.push_back(v);
  }
  return out;
}

// Highest-value feasible robot; ties go to the lowest id. Throws when no
// candidate qualifies.
inline int evaluate_victim(const WEstimate& est, const std::vector<int>& ids_h, double alpha1) {
  std::optional<VictimScore> best;
  for (const auto& v : victim_scores(est, ids_h, alpha1)) {
    if (!v.feasible) continue;
    if (!best || v.score > best->score + 1e-12 ||
        (std::abs(v.score - best->score) <= 1e-12 && v.id < best->id))
      best = v;
  }
  if (!best) throw std::runtime_error("evaluate_victim: no feasible candidate");
  return best->id;
}

// ---------------------------------------------------------------------------
// Geometry: 1-hop convex pattern and the feasible replacement zone.

struct ConvexPattern {
  int owner = -1;
  bool exists = false;
  std::vector<int> vertex_ids;
};

namespace detail_hull {

// Monotone-chain convex hull over (id, point) pairs; returns hull ids in
// counter-clockwise order. Collinear points are not hull vertices.
inline std::vector<int> hull_ids(std::vector<std::pair<int, Vec2>> pts) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    if (a.second.x != b.second.x) return a.second.x < b.second.x;
    return a.second.y < b.second.y;
  });
  const int n = static_cast<int>(pts.size());
  if (n < 3) {
    std::vector<int> ids;
    for (const auto& [id, z] : pts) ids.push_back(id);
    return ids;
  }
  std::vector<std::pair<int, Vec2>> h(2 * n);
  int k = 0;
  for (int i = 0; i < n; ++i) {
    while (k >= 2 &&
           (h[k - 1].second - h[k - 2].second).cross(pts[i].second - h[k - 2].second) <= 1e-12)
      --k;
    h[k++] = pts[i];
  }
  const int lower = k + 1;
  for (int i = n - 2; i >= 0; --i) {
    while (k >= lower &&
           (h[k - 1].second - h[k - 2].second).cross(pts[i].second - h[k - 2].second) <= 1e-12)
      --k;
    h[k++] = pts[i];
  }
  std::vector<int> ids;
  for (int i = 0; i < k - 1; ++i) ids.push_back(h[i].first);
  return ids;
}

}  // namespace detail_hull

// The owner together with its out-neighbors forms the 1-hop pattern when the
// owner is a strict vertex of their convex hull.
inline ConvexPattern convex_pattern(int owner, const Vec2& owner_pos,
                                    const std::vector<std::pair<int, Vec2>>& out_neighbors) {
  if (out_neighbors.empty()) throw std::invalid_argument("convex_pattern: no out-neighbors");
  ConvexPattern p;
  p.owner = owner;
  std::vector<std::pair<int, Vec2>> pts = out_neighbors;
  pts.push_back({owner, owner_pos});
  p.vertex_ids = detail_hull::hull_ids(pts);
  p.exists = std::find(p.vertex_ids.begin(), p.vertex_ids.end(), owner) != p.vertex_ids.end();
  if (out_neighbors.size() == 1) {
    // Two points always span a hull; the degenerate coincident case fails.
    p.exists = distance(owner_pos, out_neighbors[0].second) > 1e-9;
  }
  return p;
}

struct FeasibleZone {
  int owner = -1;
  bool found = false;
  Vec2 point;
};

// Strict membership test for the replacement zone: closer to every
// out-neighbor than the owner is.
inline bool in_feasible_zone(const Vec2& z, const Vec2& owner_pos,
                             const std::vector<Vec2>& out_neighbor_pos) {
  for (const auto& zj : out_neighbor_pos)
    if (distance(z, zj) >= distance(owner_pos, zj)) return false;
  return true;
}

// Rejection sampling inside the intersection of the out-neighbor disks, with
// a deterministic inward-bisector fallback before giving up.
inline FeasibleZone feasible_zone_sample(int owner, const Vec2& owner_pos,
                                         const std::vector<Vec2>& out_neighbor_pos, Rng& rng,
                                         int n_samples = 4000) {
  FeasibleZone zone;
  zone.owner = owner;
  if (out_neighbor_pos.empty()) return zone;
  // Smallest disk bounds the sampling box.
  double r_min = 1e300;
  Vec2 c_min;
  for (const auto& zj : out_neighbor_pos) {
    const double d = distance(owner_pos, zj);
    if (d < r_min) {
      r_min = d;
      c_min = zj;
    }
  }
  for (int k = 0; k < n_samples; ++k) {
    const Vec2 z = c_min + rng.unit_vec() * (r_min * std::sqrt(rng.uniform()));
    if (in_feasible_zone(z, owner_pos, out_neighbor_pos)) {
      zone.found = true;
      zone.point = z;
      return zone;
    }
  }
  // Inward bisector: a strict hull vertex sees every out-neighbor within an
  // open half-plane, so a small step along the mean inward direction works.
  Vec2 inward{};
  for (const auto& zj : out_neighbor_pos) inward += (zj - owner_pos).normalized();
  inward = inward.normalized();
  for (double step = 0.25 * r_min; step > 1e-6; step *= 0.5) {
    const Vec2 z = owner_pos + inward * step;
    if (in_feasible_zone(z, owner_pos, out_neighbor_pos)) {
      zone.found = true;
      zone.point = z;
      return zone;
    }
  }
  return zone;
}

// ---------------------------------------------------------------------------
// Indirect controllability (scalar test on the dominant displacement axis).

inline bool indirectly_controllable(double a_ij, double a_bar_ij, double u_e, double u_c,
                                    double goal_displacement) {
  if (goal_displacement * u_c > 0.0) return u_e * u_c > 0.0;
  return std::abs(a_ij * u_e) > std::abs(a_bar_ij * u_c);
}

inline bool indirectly_controllable_2d(const WEstimate& est, int target, int lever, double step_seconds,
                                       const Vec2& u_e, const Vec2& u_c, const Vec2& goal_disp) {
  const int axis = std::abs(goal_disp.x) >= std::abs(goal_disp.y) ? 0 : 1;
  const double a_ij = est.a_hat(target, lever, step_seconds);
  double a_bar = 0.0;
  for (const int j : est.estimated_in_neighbors(target))
    if (j != lever) a_bar += est.a_hat(target, j, step_seconds);
  const double ue = axis == 0 ? u_e.x : u_e.y;
  const double uc = axis == 0 ? u_c.x : u_c.y;
  const double gd = axis == 0 ? goal_disp.x : goal_disp.y;
  return indirectly_controllable(a_ij, a_bar, ue, uc, gd);
}

// ---------------------------------------------------------------------------
// ECR session.

enum class EcrPhase { Evaluate, Cut, Restore, Done };

struct AttackOutcome {
  bool success = false;
  int victim = -1;
  EcrPhase reached = EcrPhase::Evaluate;
  long cut_start = -1;
  long break_step = -1;
  long restore_start = -1;
  long swap_step = -1;
  long steady_step = -1;
  std::string note;
  // Restore-phase distance deviations per out-neighbor (negative while the
  // attacker sits between the displaced victim and its followers).
  struct DeviationSample {
    long k;
    int neighbor;
    double value;
  };
  std::vector<DeviationSample> deviations;
  std::vector<AvoidancePair> d_a;
};

class EcrSession {
 public:
  EcrSession(const Stage12Products& s12, const Stage3Products& s3, const EstimatorParams& est,
             double sigma)
      : pattern_(s12.pattern),
        west_(s3.w_refined),
        g_(&s3.g_model),
        est_(est),
        sigma_(sigma),
        recorder_(est.pair_response_window, est.pair_response_window),
        r_o_(s3.radii.r_hat_o ? *s3.radii.r_hat_o : 2.0),
        r_c_(s3.radii.r_hat_c ? *s3.radii.r_hat_c : 7.0) {}

  const AttackOutcome& outcome() const { return outcome_; }
  EcrPhase phase() const { return phase_; }
  bool done() const { return phase_ == EcrPhase::Done || failed_; }
  bool failed() const { return failed_; }
  int victim() const { return victim_; }

  // Picks the victim and checks approachability; returns false on failure.
  bool evaluate(SimDriver& driver) {
    try {
      victim_ = evaluate_victim(west_, west_.ids_h, est_.alpha1);
    } catch (const std::exception& e) {
      fail(e.what());
      return false;
    }
    outcome_.victim = victim_;
    out_neighbors_ = west_.estimated_out_neighbors(victim_);
    in_neighbors_ = west_.estimated_in_neighbors(victim_);
    if (out_neighbors_.empty()) {
      fail("victim without out-neighbors");
      return false;
    }
    recorder_.set_target(victim_);
    phase_ = EcrPhase::Cut;
    outcome_.reached = phase_;
    outcome_.cut_start = driver.now();
    return true;
  }

  Vec2 control(SimDriver& driver) {
    if (done()) return {};
    if (--budget_ < 0) {
      fail("phase budget exhausted");
      return {};
    }
    switch (phase_) {
      case EcrPhase::Evaluate:
        if (!evaluate(driver)) return {};
        budget_ = est_.phase_timeout;
        return {};
      case EcrPhase::Cut:
        return cut_control(driver);
      case EcrPhase::Restore:
        return restore_control(driver);
      case EcrPhase::Done:
        return {};
    }
    return {};
  }

  // Called after every driver step so the recorder sees fresh frames and the
  // replacement rule can fire.
  void after_step(SimDriver& driver) {
    recorder_.update(driver, predict_desired(driver, west_, pattern_, victim_), r_o_);
    if (phase_ == EcrPhase::Restore && tracker_) {
      record_deviations(driver);
      if (tracker_->update(driver.mutable_state(), driver.cfg())) {
        outcome_.swap_step = driver.now();
        post_swap_ = true;
        budget_ = est_.phase_timeout;
      }
      if (post_swap_ && !settle_checked_ && driver.now() - outcome_.swap_step > 200) {
        if (const auto k = post_swap_steady(driver)) {
          outcome_.steady_step = *k;
          outcome_.success = true;
          phase_ = EcrPhase::Done;
          outcome_.reached = phase_;
          outcome_.d_a = recorder_.pairs();
        }
      }
    }
  }

 private:
  void fail(const std::string& why) {
    failed_ = true;
    outcome_.note = why;
    outcome_.d_a = recorder_.pairs();
  }

  // Candidate next-step poses for the sampling controllers.
  Vec2 sampled_control(SimDriver& driver, const std::function<double(const Vec2&)>& objective,
                       const std::function<bool(const Vec2&)>& feasible) {
    const auto& s = driver.state();
    const double dt = driver.cfg().step;
    const double b = driver.cfg().max_accel;
    Rng& rng = driver.attacker_rng();
    double best = -1e300;
    Vec2 best_u{};
    bool any = false;
    for (int m = 0; m < est_.sample_budget; ++m) {
      const Vec2 u = rng.unit_vec() * (b * std::sqrt(rng.uniform()));
      const Vec2 next = s.attacker_position + u * dt;
      if (!safe(driver, next) || !feasible(next)) continue;
      const double val = objective(next);
      if (val > best) {
        best = val;
        best_u = u;
        any = true;
      }
    }
    if (!any) {
      ++infeasible_streak_;
      return {};
    }
    infeasible_streak_ = 0;
    return best_u;
  }

  bool safe(const SimDriver& driver, const Vec2& next) const {
    const auto& s = driver.state();
    for (int i = 0; i < driver.cfg().n_robots; ++i) {
      if (i == victim_ || !s.membership[i]) continue;
      if (distance(next, s.positions[i]) < driver.cfg().radius_s + 0.08) return false;
    }
    return true;
  }

  // Predicted victim displacement for a candidate attacker pose.
  Vec2 predict_victim(const SimDriver& driver, const Vec2& attacker_next, const Vec2& zv,
                      const Vec2& goal) const {
    const Vec2 response = g_->predict(zv - attacker_next, goal - zv, {}, {});
    return zv + response * driver.cfg().step;
  }

  Vec2 cut_control(SimDriver& driver) {
    const auto zv = driver.observed_smoothed(victim_);
    if (!zv) return {};
    const Vec2 goal = track_position(pattern_, victim_, driver.now(), driver.cfg().step);

    // Terminate on the learned radius: every estimated in-edge held broken.
    bool all_broken = !in_neighbors_.empty();
    for (const int j : in_neighbors_) {
      const auto zj = driver.observed_smoothed(j);
      if (!zj || distance(*zj, *zv) < r_c_ + 0.35) all_broken = false;
    }
    broken_streak_ = all_broken ? broken_streak_ + 1 : 0;
    if (broken_streak_ > 30) {
      phase_ = EcrPhase::Restore;
      outcome_.reached = phase_;
      outcome_.restore_start = driver.now();
      outcome_.break_step = driver.now();
      tracker_.emplace(victim_);
      budget_ = est_.phase_timeout;
      return {};
    }

    auto objective = [&](const Vec2& next) {
      const Vec2 zv_next = predict_victim(driver, next, *zv, goal);
      double val = est_.alpha2 * distance(zv_next, goal);
      for (const int j : in_neighbors_) {
        const auto zj = driver.observed_smoothed(j);
        const auto hj = pattern_.h_of(j);
        const auto hv = pattern_.h_of(victim_);
        if (!zj || !hj || !hv) continue;
        val += est_.alpha3 * ((*zj - zv_next - (*hv - *hj)).norm());
      }
      // Light pressure toward stronger contact keeps the press locked.
      val -= 0.02 * distance(next, *zv);
      return val;
    };
    return sampled_control(driver, objective, [](const Vec2&) { return true; });
  }

  Vec2 restore_control(SimDriver& driver) {
    const auto zv = driver.observed_smoothed(victim_);
    if (!zv) return {};
    const Vec2 goal = track_position(pattern_, victim_, driver.now(), driver.cfg().step);

    if (post_swap_) {
      // Occupy the vacated slot and cruise with the pattern.
      const Vec2 slot = track_position(pattern_, victim_, driver.now(), driver.cfg().step);
      const Vec2 err = slot - driver.state().attacker_position;
      return (err * 1.0 + pattern_.c_hat).clamped(driver.cfg().max_accel);
    }

    std::vector<Vec2> out_pos;
    for (const int j : out_neighbors_) {
      const auto zj = driver.observed_smoothed(j);
      if (zj) out_pos.push_back(*zj);
    }
    auto feasible = [&](const Vec2& next) {
      if (!in_feasible_zone(next, *zv, out_pos)) return false;
      for (const auto& zj : out_pos)
        if (distance(next, zj) > r_c_ - 0.5) return false;  // stay authenticable
      return true;
    };
    auto objective = [&](const Vec2& next) {
      const Vec2 zv_next = predict_victim(driver, next, *zv, goal);
      double val = distance(zv_next, goal);
      val -= 0.05 * distance(next, *zv);  // keep contact with the victim
      return val;
    };
    const Vec2 u = sampled_control(driver, objective, feasible);
    if (infeasible_streak_ > 200) fail("restore: feasible zone sampling failed");
    return u;
  }

  void record_deviations(SimDriver& driver) {
    if (post_swap_) return;
    const auto zv = driver.observed_smoothed(victim_);
    if (!zv) return;
    for (const int j : out_neighbors_) {
      const auto zj = driver.observed_smoothed(j);
      if (!zj) continue;
      const double dev = distance(driver.state().attacker_position, *zj) - distance(*zv, *zj);
      outcome_.deviations.push_back({driver.now(), j, dev});
    }
  }

  std::optional<long> post_swap_steady(SimDriver& driver) {
    settle_checked_ = true;
    steady_probe_start_ = driver.now();
    return std::nullopt;  // overwritten by run_stage4's settling loop
  }

 public:
  // Exposed for the stage driver: checks steadiness of the member frames
  // collected after the swap.
  bool swap_happened() const { return post_swap_; }
  PairRecorder& recorder() { return recorder_; }
  AttackOutcome& mutable_outcome() { return outcome_; }
  const WEstimate& estimate() const { return west_; }

 private:
  SteadyPatternEstimate pattern_;
  WEstimate west_;
  const AvoidanceModel* g_;
  EstimatorParams est_;
  double sigma_;
  PairRecorder recorder_;
  double r_o_, r_c_;
  int victim_ = -1;
  std::vector<int> out_neighbors_, in_neighbors_;
  EcrPhase phase_ = EcrPhase::Evaluate;
  AttackOutcome outcome_;
  std::optional<ReplacementTracker> tracker_;
  long budget_ = 100000;
  int broken_streak_ = 0;
  int infeasible_streak_ = 0;
  bool post_swap_ = false;
  bool settle_checked_ = false;
  long steady_probe_start_ = 0;
  bool failed_ = false;
};

// ---------------------------------------------------------------------------
// Stage-4 driver.

inline AttackOutcome run_stage4(SimDriver& driver, const Stage12Products& s12, Stage3Products& s3) {
  const Scenario& sc = driver.scenario();
  EcrSession ecr(s12, s3, sc.est, sc.sigma);
  const long hard_deadline = driver.now() + 5L * sc.est.phase_timeout;
  while (!ecr.done() && driver.now() < hard_deadline) {
    driver.step(ecr.control(driver));
    ecr.after_step(driver);
    if (ecr.swap_happened() && !ecr.outcome().success) {
      // Post-swap: cruise as the new member until the pattern settles again.
      AttackOutcome& oc = ecr.mutable_outcome();
      const long swap = oc.swap_step;
      const int post_budget = 2 * sc.est.phase_timeout;
      long steady_at = -1;
      for (int k = 0; k < post_budget; ++k) {
        driver.step(ecr.control(driver));
        ecr.after_step(driver);
        if (k % 100 == 99) {
          // Windowed second-difference check over current members.
          const auto& frames = driver.frames();
          const int stride = sc.est.effective_stride(sc.sigma);
          const int span = 6 * std::max(1, stride);
          if (frames.size() < span + 2) continue;
          const FrameSeries recent = frames.slice(frames.size() - span - 1, frames.size() - 1);
          const FrameSeries dec = recent.block_averaged(stride);
          if (dec.size() < 4) continue;
          const auto ids = dec.ids_present(0, dec.size() - 1);
          if (ids.empty()) continue;
          double total = 0.0;
          for (const int id : ids) total += second_diff_accum(dec, id, 0, dec.size() - 1);
          const double sigma_eff = sc.sigma / std::sqrt(static_cast<double>(std::max(1, stride)));
          if (total <= steady_epsilon(sigma_eff, static_cast<int>(ids.size()),
                                      std::max(1, dec.size() - 2))) {
            steady_at = driver.now();
            break;
          }
        }
      }
      oc.steady_step = steady_at;
      oc.success = steady_at > 0 && steady_at - swap <= 2 * sc.est.phase_timeout;
      oc.reached = EcrPhase::Done;
      oc.d_a = ecr.recorder().pairs();
      break;
    }
  }
  AttackOutcome outcome = ecr.outcome();
  if (!outcome.success && outcome.note.empty()) outcome.note = "attack did not complete";
  // Online refresh of the avoidance model from the attack-phase pairs.
  if (!outcome.d_a.empty() && s3.model_ok) {
    try {
      const auto batch = subsample_pairs(outcome.d_a, sc.est.max_training_pairs / 2);
      s3.g_model.update_online(batch, driver.attacker_rng());
    } catch (const std::exception&) {
      // keep the stage-3 model
    }
  }
  return outcome;
}

}  // namespace mrn
