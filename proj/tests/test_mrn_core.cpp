#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <deque>

#include "mrn/formation.hpp"
#include "mrn/graph.hpp"
#include "mrn/rng.hpp"
#include "mrn/scenario.hpp"
#include "mrn/steady.hpp"

using namespace mrn;

namespace {

// Two-robot chain: robot 2 leads at speed c, robot 1 follows with offset 5.
FormationConfig two_robot_chain() {
  FormationConfig f;
  f.n_robots = 2;
  f.adjacency0 = Mat(2, 2);
  f.adjacency0(0, 1) = 1.0;
  f.leader_index = 1;
  f.leader_speed = 0.2;
  f.leader_heading = {0.0, 1.0};  // scalar-style setup along one axis
  f.shape_offsets = {{0.0, 0.0}, {0.0, 5.0}};
  f.radius_c = 100.0;
  f.radius_o = 2.0;
  f.radius_s = 0.5;
  f.step = 0.05;
  return f;
}

FormationConfig fig3a() { return default_scenario().formation; }

std::vector<Vec2> run_free(const FormationConfig& cfg, std::vector<Vec2> z0, int steps) {
  WorldState s = make_initial_state(cfg, z0, {1e6, 1e6}, false);
  for (int k = 0; k < steps; ++k) step_formation(s, cfg, {});
  return s.positions;
}

}  // namespace

TEST_CASE("build_laplacian: empty graph") {
  const Mat l = build_laplacian(Mat(2, 2));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) CHECK(l(r, c) == 0.0);
}

TEST_CASE("build_laplacian: single directed edge") {
  Mat a(2, 2);
  a(0, 1) = 1.0;
  const Mat l = build_laplacian(a);
  CHECK(l(0, 0) == 1.0);
  CHECK(l(0, 1) == -1.0);
  CHECK(l(1, 0) == 0.0);
  CHECK(l(1, 1) == 0.0);
}

TEST_CASE("build_laplacian: shipped network rows sum to zero") {
  const Mat l = build_laplacian(fig3a().adjacency0);
  for (int r = 0; r < l.rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < l.cols(); ++c) s += l(r, c);
    CHECK(std::abs(s) < 1e-12);
  }
}

TEST_CASE("build_laplacian: random adjacencies keep zero row sums") {
  Rng rng(9);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(15));
    Mat a(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        if (r != c && rng.uniform() < 0.4) a(r, c) = rng.uniform(0.0, 2.0);
    const Mat l = build_laplacian(a);
    for (int r = 0; r < n; ++r) {
      double s = 0.0;
      for (int c = 0; c < n; ++c) s += l(r, c);
      CHECK(std::abs(s) < 1e-12);
    }
  }
}

TEST_CASE("build_laplacian rejects non-square input") {
  CHECK_THROWS_AS(build_laplacian(Mat(2, 3)), std::invalid_argument);
}

TEST_CASE("effective_weight disk gate") {
  CHECK(effective_weight(0.5, {0, 0}, {3, 0}, 7.0) == 0.5);
  CHECK(effective_weight(0.5, {0, 0}, {8, 0}, 7.0) == 0.0);
  CHECK(effective_weight(0.0, {0, 0}, {1, 0}, 7.0) == 0.0);
}

TEST_CASE("avoidance_true three-band envelope") {
  AvoidanceParams p;
  p.saturation = 1.0;
  const double ro = 2.0, rs = 0.5;
  // Outside the detection radius: no response.
  CHECK(avoidance_true({3.0, 0.0}, {1.0, 1.0}, {}, {}, p, ro, rs).norm() == 0.0);
  // Inside the safety radius: full-rate push directly away.
  const Vec2 g_in = avoidance_true({0.3, 0.0}, {5.0, 0.0}, {}, {}, p, ro, rs);
  CHECK(g_in.norm() == doctest::Approx(1.0));
  CHECK(g_in.x < 0.0);
  // Middle band: bounded.
  const Vec2 g_mid = avoidance_true({1.0, 0.0}, {0.5, 0.0}, {}, {}, p, ro, rs);
  CHECK(g_mid.norm() <= 1.0 + 1e-12);
}

TEST_CASE("avoidance_true bound holds over random inputs") {
  Rng rng(77);
  AvoidanceParams p;
  p.repulsion_gain = 30.0;
  p.attraction_gain = 1.0;
  p.saturation = 1.0;
  for (int k = 0; k < 10000; ++k) {
    const Vec2 rel_o = rng.unit_vec() * rng.uniform(0.0, 4.0);
    const Vec2 rel_g = rng.unit_vec() * rng.uniform(0.0, 8.0);
    const Vec2 g = avoidance_true(rel_o, rel_g, {}, {}, p, 2.0, 0.5);
    const double d = rel_o.norm();
    if (d > 2.0) {
      CHECK(g.norm() == 0.0);
    } else if (d < 0.5) {
      CHECK(g.norm() == doctest::Approx(1.0));
    } else {
      CHECK(g.norm() <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("avoidance_true degenerate coincident obstacle") {
  AvoidanceParams p;
  const Vec2 g = avoidance_true({0.0, 0.0}, {1.0, 0.0}, {}, {}, p, 2.0, 0.5);
  CHECK(g.norm() == doctest::Approx(p.saturation));
  CHECK(g.x > 0.0);  // canonical direction
}

TEST_CASE("step_formation: two-robot chain settles to offset 5.2") {
  const FormationConfig cfg = two_robot_chain();
  // dz1/dt = z2 - z1 - 5 settles where the gap equals 5 + c.
  const auto z = run_free(cfg, {{0.0, 0.0}, {0.0, 5.0}}, 4000);
  CHECK(z[1].y - z[0].y == doctest::Approx(5.2).epsilon(1e-6));
}

TEST_CASE("step_formation: distant attacker changes nothing") {
  const FormationConfig cfg = fig3a();
  const auto z0 = cfg.shape_offsets;
  WorldState a = make_initial_state(cfg, z0, {500.0, 500.0}, true);
  WorldState b = make_initial_state(cfg, z0, {500.0, 500.0}, false);
  for (int k = 0; k < 50; ++k) {
    step_formation(a, cfg, {0.1, 0.0});
    step_formation(b, cfg, {});
  }
  for (int i = 0; i < cfg.n_robots; ++i) {
    CHECK(a.positions[i].x == b.positions[i].x);
    CHECK(a.positions[i].y == b.positions[i].y);
  }
}

TEST_CASE("step_formation: exact pattern advances at the leader velocity") {
  const FormationConfig cfg = two_robot_chain();
  // Start on the steady track (offset 5.2 absorbs the tracking lag).
  WorldState s = make_initial_state(cfg, {{0.0, -0.2}, {0.0, 5.0}}, {1e6, 1e6}, false);
  const auto before = s.positions;
  step_formation(s, cfg, {});
  for (int i = 0; i < 2; ++i) {
    CHECK(s.positions[i].y - before[i].y == doctest::Approx(cfg.leader_speed * cfg.step).epsilon(1e-9));
    CHECK(std::abs(s.positions[i].x - before[i].x) < 1e-12);
  }
}

TEST_CASE("steady oracle: two-robot closed form") {
  const FormationConfig cfg = two_robot_chain();
  const auto oracle = steady_offset_oracle(cfg, {{0.0, 0.0}, {0.0, 5.0}});
  REQUIRE(oracle.has_value());
  CHECK(oracle->offset_vector[0].y == doctest::Approx(-0.2).epsilon(1e-9));
  CHECK(oracle->offset_vector[1].y == doctest::Approx(5.0).epsilon(1e-9));
  // p1 is the leader indicator; q1 all ones.
  CHECK(oracle->left_eig_p1[0] == doctest::Approx(0.0));
  CHECK(oracle->left_eig_p1[1] == doctest::Approx(1.0));
}

TEST_CASE("steady oracle: static formation with zero speed is the shape itself") {
  FormationConfig cfg = two_robot_chain();
  cfg.leader_speed = 0.0;
  const auto oracle = steady_offset_oracle(cfg, cfg.shape_offsets);
  REQUIRE(oracle.has_value());
  for (int i = 0; i < 2; ++i) {
    CHECK(oracle->offset_vector[i].x == doctest::Approx(cfg.shape_offsets[i].x).epsilon(1e-9));
    CHECK(oracle->offset_vector[i].y == doctest::Approx(cfg.shape_offsets[i].y).epsilon(1e-9));
  }
}

TEST_CASE("steady oracle matches a long shipped-network run") {
  const FormationConfig cfg = fig3a();
  const auto z0 = cfg.shape_offsets;  // start on the shape, lag settles in
  const auto oracle = steady_offset_oracle(cfg, z0);
  REQUIRE(oracle.has_value());
  const int steps = 10000;  // 500 s
  const auto z = run_free(cfg, z0, steps);
  const Vec2 drift = cfg.leader_velocity() * (cfg.step * steps);
  double err2 = 0.0, s2 = 0.0;
  for (int i = 0; i < cfg.n_robots; ++i) {
    err2 += (z[i] - drift - oracle->offset_vector[i]).norm_sq();
    s2 += oracle->offset_vector[i].norm_sq();
  }
  CHECK(std::sqrt(err2) < 1e-3 * std::max(1.0, std::sqrt(s2)));
}

TEST_CASE("steady oracle rejects defective networks") {
  // Chain of identical unit weights: the Laplacian is triangular with a
  // repeated nonzero eigenvalue and a deficient eigenspace.
  FormationConfig f;
  f.n_robots = 3;
  f.adjacency0 = Mat(3, 3);
  f.adjacency0(1, 0) = 1.0;  // 2 listens to 1
  f.adjacency0(2, 1) = 1.0;  // 3 listens to 2
  f.leader_index = 0;
  f.shape_offsets = {{0, 0}, {1, 0}, {2, 0}};
  std::string why;
  const auto oracle = steady_offset_oracle(f, f.shape_offsets, &why);
  CHECK(!oracle.has_value());
  CHECK(why.find("defective") != std::string::npos);
}

TEST_CASE("disk gate matches distances after every step") {
  FormationConfig cfg = fig3a();
  cfg.radius_c = 5.0;  // force some edges to toggle during convergence
  Rng rng(4);
  std::vector<Vec2> z0 = cfg.shape_offsets;
  for (auto& z : z0) z += rng.gaussian_vec(1.0);
  WorldState s = make_initial_state(cfg, z0, {1e6, 1e6}, false);
  for (int k = 0; k < 200; ++k) {
    step_formation(s, cfg, {});
    for (int i = 0; i < cfg.n_robots; ++i)
      for (int j = 0; j < cfg.n_robots; ++j) {
        const bool live = s.live_edges(i, j) > 0.0;
        const bool should = cfg.adjacency0(i, j) > 0.0 &&
                            distance(s.positions[i], s.positions[j]) < cfg.radius_c;
        CHECK(live == should);
        if (live) CHECK(s.live_edges(i, j) == cfg.adjacency0(i, j));
      }
  }
}

TEST_CASE("convergence: step-to-step velocity change dies out on schedule") {
  // Shallow random trees (leader plus two tiers) with distinct weights: the
  // decay-rate bound k = 10 / (step * min Re lambda) has a healthy margin.
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    FormationConfig cfg;
    const int n = 6 + static_cast<int>(rng.below(6));
    cfg.n_robots = n;
    cfg.adjacency0 = Mat(n, n);
    cfg.shape_offsets.assign(n, Vec2{});
    cfg.leader_index = 0;
    cfg.radius_c = 1e7;
    cfg.leader_speed = 0.2;
    for (int i = 1; i < n; ++i) {
      const int parent = i <= 3 ? 0 : 1 + static_cast<int>(rng.below(3));
      cfg.adjacency0(i, parent) = rng.uniform(0.5, 1.3);
      cfg.shape_offsets[i] = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
    }
    std::vector<Vec2> z0 = cfg.shape_offsets;
    for (auto& z : z0) z += rng.gaussian_vec(0.5);
    const auto oracle = steady_offset_oracle(cfg, z0);
    REQUIRE(oracle.has_value());
    const int k_bound = static_cast<int>(10.0 / (cfg.step * oracle->min_nonzero_re));
    WorldState s = make_initial_state(cfg, z0, {1e6, 1e6}, false);
    std::vector<Vec2> prev_v(n);
    double max_change = 0.0;
    for (int k = 0; k <= k_bound; ++k) {
      prev_v = s.velocities;
      step_formation(s, cfg, {});
      max_change = 0.0;
      for (int i = 0; i < n; ++i)
        max_change = std::max(max_change, (s.velocities[i] - prev_v[i]).norm() * cfg.step);
    }
    CHECK(max_change < 1e-6);
  }
}

TEST_CASE("determinism: identical seeds give identical trajectories") {
  const Scenario sc = default_scenario();
  std::vector<Vec2> first;
  for (int run = 0; run < 2; ++run) {
    Rng world(sc.seed_world);
    auto z0 = sc.draw_initial_positions(world);
    WorldState s = make_initial_state(sc.formation, z0, sc.attacker_start_position(), true);
    for (int k = 0; k < 300; ++k) step_formation(s, sc.formation, {0.2, 0.0});
    if (run == 0) {
      first = s.positions;
    } else {
      for (int i = 0; i < sc.formation.n_robots; ++i) {
        CHECK(s.positions[i].x == first[i].x);
        CHECK(s.positions[i].y == first[i].y);
      }
    }
  }
}

TEST_CASE("replacement rule: window semantics") {
  ReplacementConditions good{true, true, true};
  ReplacementConditions bad_range{true, false, true};
  ReplacementConditions bad_edge{false, true, true};

  std::deque<ReplacementConditions> h(40, good);
  CHECK(rule_replacement_check(h, 40));

  h[20] = bad_range;  // attacker left the interaction range once
  CHECK(!rule_replacement_check(h, 40));

  std::deque<ReplacementConditions> h2(40, good);
  h2[39] = bad_edge;  // victim reconnected at the last step
  CHECK(!rule_replacement_check(h2, 40));

  std::deque<ReplacementConditions> short_history(10, good);
  CHECK_THROWS_AS(rule_replacement_check(short_history, 40), std::invalid_argument);
}

TEST_CASE("shipped scenario validates") {
  const Scenario sc = default_scenario();
  CHECK_NOTHROW(sc.validate());
  CHECK(sc.formation.n_robots == 17);
  // Robot 5: one in-neighbor (14), three out-neighbors (6, 7, 8).
  CHECK(in_neighbors(sc.formation.adjacency0, 4) == std::vector<int>{13});
  CHECK(out_neighbors(sc.formation.adjacency0, 4) == std::vector<int>{5, 6, 7});
}

TEST_CASE("disconnected robot steers back and reconnects") {
  FormationConfig cfg = two_robot_chain();
  cfg.radius_c = 8.0;
  WorldState s = make_initial_state(cfg, {{0.0, 0.0}, {0.0, 5.0}}, {1e6, 1e6}, false);
  for (int k = 0; k < 400; ++k) step_formation(s, cfg, {});  // learn the slot
  CHECK(s.live_edges(0, 1) > 0.0);
  s.positions[0] += Vec2{12.0, 0.0};  // knocked out of range
  step_formation(s, cfg, {});
  step_formation(s, cfg, {});
  CHECK(s.live_edges(0, 1) == 0.0);
  CHECK(s.disconnected[0] == 1);
  for (int k = 0; k < 3000 && s.live_edges(0, 1) == 0.0; ++k) step_formation(s, cfg, {});
  CHECK(s.live_edges(0, 1) > 0.0);
  step_formation(s, cfg, {});
  CHECK(s.disconnected[0] == 0);
}
