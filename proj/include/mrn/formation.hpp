#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mrn/graph.hpp"
#include "mrn/linalg.hpp"
#include "mrn/vec2.hpp"

namespace mrn {

// ---------------------------------------------------------------------------
// Ground-truth network description. Robot ids are 1-based in configs and
// traces; everything in memory is indexed by role 0..n-1 (id = role + 1).

struct AvoidanceParams {
  double repulsion_gain = 30.0;
  double attraction_gain = 1.0;
  double saturation = 1.0;  // b, m/s
};

struct FormationConfig {
  int n_robots = 0;
  Mat adjacency0;                   // preset weights a0_ij, zero diagonal
  std::vector<Vec2> shape_offsets;  // h_i, meters
  int leader_index = 0;             // role index of the leader
  double leader_speed = 0.2;        // c, m/s
  Vec2 leader_heading{1.0, 0.0};    // unit vector
  double radius_c = 7.0;
  double radius_o = 2.0;
  double radius_s = 0.5;
  double max_accel = 1.0;           // b: avoidance bound and attacker speed bound, m/s
  double step = 0.05;               // eps_T, seconds
  int ruleset_window = 40;          // t_l, steps, for the replacement rule
  double restore_gain = 1.0;        // gain of the move-back rule
  AvoidanceParams avoidance;

  // Leader-lag test variant: when kappa > 0, every robot receives the common
  // ramp input c * (1 - exp(-kappa t)) instead of the leader-only input.
  double nonlinear_kappa_s = 0.0;

  Vec2 leader_velocity() const { return leader_heading * leader_speed; }

  void validate() const {
    if (n_robots < 2) throw std::invalid_argument("formation.n_robots: need at least 2 robots");
    if (!(radius_c > radius_o && radius_o > radius_s && radius_s > 0.0))
      throw std::invalid_argument("formation.radii: need radius_c > radius_o > radius_s > 0");
    if (adjacency0.rows() != n_robots || adjacency0.cols() != n_robots)
      throw std::invalid_argument("formation.adjacency: size does not match n_robots");
    for (int i = 0; i < n_robots; ++i) {
      if (adjacency0(i, i) != 0.0)
        throw std::invalid_argument("formation.adjacency: diagonal must be zero");
      for (int j = 0; j < n_robots; ++j)
        if (adjacency0(i, j) < 0.0)
          throw std::invalid_argument("formation.adjacency: weights must be nonnegative");
    }
    for (int j = 0; j < n_robots; ++j)
      if (adjacency0(leader_index, j) != 0.0)
        throw std::invalid_argument("formation.leader: leader row of adjacency must be zero");
    if (static_cast<int>(shape_offsets.size()) != n_robots)
      throw std::invalid_argument("formation.shape: offset count does not match n_robots");
    if (!has_spanning_tree(adjacency0, leader_index))
      throw std::invalid_argument("formation.adjacency: no spanning tree rooted at the leader");
    if (step <= 0.0) throw std::invalid_argument("formation.step: must be positive");
    if (max_accel <= 0.0) throw std::invalid_argument("formation.max_accel: must be positive");
    const Mat w = Mat::identity(n_robots) - build_laplacian(adjacency0) * step;
    if (spectral_radius(w) > 1.0 + 1e-9)
      throw std::invalid_argument("formation.step: unstable discretization (spectral radius above one)");
  }
};

// The disk-model gate on a preset weight.
inline double effective_weight(double a0, const Vec2& zi, const Vec2& zj, double radius_c) {
  if (a0 < 0.0) throw std::invalid_argument("effective_weight: negative preset weight");
  return distance(zi, zj) < radius_c ? a0 : 0.0;
}

// Bounded avoidance response: zero beyond the detection radius, a clamped
// potential-field sum in the middle band, and a full-rate push directly away
// from the obstacle inside the safety radius. `rel_obstacle` and `rel_goal`
// point from the robot. Velocity arguments are accepted for interface
// completeness; this mechanism does not use them.
inline Vec2 avoidance_true(const Vec2& rel_obstacle, const Vec2& rel_goal, const Vec2& /*v_obstacle*/,
                           const Vec2& /*v_self*/, const AvoidanceParams& p, double radius_o,
                           double radius_s) {
  const double d = rel_obstacle.norm();
  if (d > radius_o) return {0.0, 0.0};
  // Degenerate coincident case: push along a fixed canonical direction.
  const Vec2 away = d > 0.0 ? (rel_obstacle / d) * -1.0 : Vec2{1.0, 0.0};
  if (d < radius_s) return away * p.saturation;
  const Vec2 repulse = away * (p.repulsion_gain * (1.0 / d - 1.0 / radius_o) / (d * d));
  const Vec2 attract = rel_goal * p.attraction_gain;
  return (repulse + attract).clamped(p.saturation);
}

// ---------------------------------------------------------------------------
// World state.

struct WorldState {
  long step_index = 0;
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;  // m/s, last applied
  Vec2 attacker_position;
  Vec2 attacker_velocity;
  bool attacker_present = false;
  Mat live_edges;                // current effective a_ij
  std::vector<char> membership;  // 1 while the original robot holds its role
  bool attacker_is_member = false;
  int attacker_role = -1;        // role the attacker occupies after the swap

  // Move-back bookkeeping: the last consensus-implied slot of each robot and
  // the dead-reckoned target used once every in-edge is gone.
  std::vector<char> disconnected;
  std::vector<Vec2> last_slot;
  std::vector<Vec2> reckoned_target;

  // Effective position of the occupant of role j (attacker after the swap).
  Vec2 role_position(int j) const {
    return (attacker_is_member && j == attacker_role) ? attacker_position : positions[j];
  }
};

// Desired position implied by the live in-edges: where the consensus force
// vanishes. Empty when the robot currently has no live in-edge.
inline std::optional<Vec2> consensus_slot(const WorldState& s, const FormationConfig& cfg, int i) {
  double wsum = 0.0;
  Vec2 acc{};
  for (int j = 0; j < cfg.n_robots; ++j) {
    const double a = s.live_edges(i, j);
    if (a <= 0.0) continue;
    acc += (s.role_position(j) - (cfg.shape_offsets[j] - cfg.shape_offsets[i])) * a;
    wsum += a;
  }
  if (wsum <= 0.0) return std::nullopt;
  return acc / wsum;
}

inline WorldState make_initial_state(const FormationConfig& cfg, const std::vector<Vec2>& positions,
                                     const Vec2& attacker_position, bool attacker_present) {
  WorldState s;
  s.positions = positions;
  s.velocities.assign(cfg.n_robots, Vec2{});
  s.attacker_position = attacker_position;
  s.attacker_present = attacker_present;
  s.live_edges = Mat(cfg.n_robots, cfg.n_robots);
  for (int i = 0; i < cfg.n_robots; ++i)
    for (int j = 0; j < cfg.n_robots; ++j)
      s.live_edges(i, j) = effective_weight(cfg.adjacency0(i, j), positions[i], positions[j], cfg.radius_c);
  s.membership.assign(cfg.n_robots, 1);
  s.disconnected.assign(cfg.n_robots, 0);
  s.last_slot = positions;
  s.reckoned_target = positions;
  for (int i = 0; i < cfg.n_robots; ++i)
    if (auto slot = consensus_slot(s, cfg, i)) s.last_slot[i] = *slot;
  return s;
}

// Ground-truth desired position of robot i at the current step.
inline Vec2 true_desired_position(const WorldState& s, const FormationConfig& cfg, int i) {
  if (i == cfg.leader_index) return s.positions[i];
  if (s.disconnected[i]) return s.reckoned_target[i];
  if (auto slot = consensus_slot(s, cfg, i)) return *slot;
  return s.last_slot[i];
}

// One simulation step. Order: attacker moves on its commanded velocity, every
// member robot updates per the consensus law with the avoidance override and
// the move-back rule, then the disk gate is refreshed from new positions.
inline void step_formation(WorldState& s, const FormationConfig& cfg, const Vec2& attacker_velocity_cmd) {
  const int n = cfg.n_robots;
  const double dt = cfg.step;
  const double t = static_cast<double>(s.step_index) * dt;

  if (s.attacker_present) {
    s.attacker_velocity = attacker_velocity_cmd.clamped(cfg.max_accel);
    s.attacker_position += s.attacker_velocity * dt;
  }

  std::vector<Vec2> u(n);
  for (int i = 0; i < n; ++i) {
    if (!s.membership[i]) continue;  // replaced robot: parked

    Vec2 common_input{};
    if (cfg.nonlinear_kappa_s > 0.0)
      common_input = cfg.leader_velocity() * (1.0 - std::exp(-cfg.nonlinear_kappa_s * t));

    Vec2 ui{};
    if (i == cfg.leader_index) {
      ui = cfg.nonlinear_kappa_s > 0.0 ? common_input : cfg.leader_velocity();
    } else {
      bool any_live = false;
      for (int j = 0; j < n; ++j) {
        const double a = s.live_edges(i, j);
        if (a <= 0.0) continue;
        any_live = true;
        ui += (s.role_position(j) - s.positions[i] - (cfg.shape_offsets[j] - cfg.shape_offsets[i])) * a;
      }
      ui += common_input;
      if (any_live) {
        if (s.disconnected[i]) s.disconnected[i] = 0;
        if (auto slot = consensus_slot(s, cfg, i)) s.last_slot[i] = *slot;
      } else {
        if (!s.disconnected[i]) {
          s.disconnected[i] = 1;
          s.reckoned_target[i] = s.last_slot[i];
        }
        ui = ((s.reckoned_target[i] - s.positions[i]) * cfg.restore_gain).clamped(cfg.max_accel);
      }
    }

    // Obstacle override: nearest non-member body within the detection radius
    // (the attacker before the swap, or a parked ex-member) dominates.
    double best_d = cfg.radius_o;
    Vec2 obstacle{}, obstacle_v{};
    bool have_obstacle = false;
    if (s.attacker_present && !s.attacker_is_member) {
      const double d = distance(s.attacker_position, s.positions[i]);
      if (d < best_d) {
        best_d = d;
        obstacle = s.attacker_position;
        obstacle_v = s.attacker_velocity;
        have_obstacle = true;
      }
    }
    for (int o = 0; o < n; ++o) {
      if (s.membership[o] || o == i) continue;
      const double d = distance(s.positions[o], s.positions[i]);
      if (d < best_d) {
        best_d = d;
        obstacle = s.positions[o];
        obstacle_v = s.velocities[o];
        have_obstacle = true;
      }
    }
    if (have_obstacle) {
      const Vec2 goal = true_desired_position(s, cfg, i);
      AvoidanceParams p = cfg.avoidance;
      p.saturation = cfg.max_accel;
      ui = avoidance_true(obstacle - s.positions[i], goal - s.positions[i], obstacle_v, s.velocities[i],
                          p, cfg.radius_o, cfg.radius_s);
    }
    u[i] = ui;
  }

  for (int i = 0; i < n; ++i) {
    if (!s.membership[i]) {
      s.velocities[i] = {0.0, 0.0};
      continue;
    }
    s.positions[i] += u[i] * dt;
    s.velocities[i] = u[i];
    if (s.disconnected[i]) s.reckoned_target[i] += cfg.leader_velocity() * dt;
  }
  ++s.step_index;

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const bool i_active = s.membership[i] != 0;
      const bool j_active = s.membership[j] != 0 || (s.attacker_is_member && j == s.attacker_role);
      s.live_edges(i, j) = (i_active && j_active)
                               ? effective_weight(cfg.adjacency0(i, j), s.positions[i], s.role_position(j),
                                                  cfg.radius_c)
                               : 0.0;
    }
}

// ---------------------------------------------------------------------------
// Neighbor-replacement authentication rule.

struct ReplacementConditions {
  bool victim_in_edges_broken = false;
  bool attacker_within_range_of_out_neighbors = false;
  bool attacker_closer_to_desired = false;
  bool all() const {
    return victim_in_edges_broken && attacker_within_range_of_out_neighbors && attacker_closer_to_desired;
  }
};

inline ReplacementConditions replacement_conditions(const WorldState& s, const FormationConfig& cfg,
                                                    int victim) {
  ReplacementConditions c;
  c.victim_in_edges_broken = true;
  bool has_in = false;
  for (int j = 0; j < cfg.n_robots; ++j)
    if (cfg.adjacency0(victim, j) > 0.0) {
      has_in = true;
      if (s.live_edges(victim, j) > 0.0) c.victim_in_edges_broken = false;
    }
  if (!has_in) c.victim_in_edges_broken = false;  // leader-like victim: rule does not apply

  c.attacker_within_range_of_out_neighbors = true;
  bool has_out = false;
  for (int i = 0; i < cfg.n_robots; ++i)
    if (cfg.adjacency0(i, victim) > 0.0) {
      has_out = true;
      if (distance(s.attacker_position, s.positions[i]) >= cfg.radius_c)
        c.attacker_within_range_of_out_neighbors = false;
    }
  if (!has_out) c.attacker_within_range_of_out_neighbors = false;

  const Vec2 desired = true_desired_position(s, cfg, victim);
  c.attacker_closer_to_desired =
      distance(s.attacker_position, desired) < distance(s.positions[victim], desired);
  return c;
}

// Window form: true iff every one of the last `window` records satisfies all
// three conditions.
inline bool rule_replacement_check(const std::deque<ReplacementConditions>& history, int window) {
  if (static_cast<int>(history.size()) < window)
    throw std::invalid_argument("rule_replacement_check: history shorter than the rule window");
  for (std::size_t k = history.size() - window; k < history.size(); ++k)
    if (!history[k].all()) return false;
  return true;
}

// Streak tracker driving the membership swap inside the simulation loop.
class ReplacementTracker {
 public:
  explicit ReplacementTracker(int victim) : victim_(victim) {}

  // Returns true at the step the swap happens.
  bool update(WorldState& s, const FormationConfig& cfg) {
    if (done_) return false;
    streak_ = replacement_conditions(s, cfg, victim_).all() ? streak_ + 1 : 0;
    if (streak_ >= cfg.ruleset_window) {
      s.membership[victim_] = 0;
      s.attacker_is_member = true;
      s.attacker_role = victim_;
      done_ = true;
      return true;
    }
    return false;
  }

  int streak() const { return streak_; }
  bool done() const { return done_; }

 private:
  int victim_;
  int streak_ = 0;
  bool done_ = false;
};

}  // namespace mrn
