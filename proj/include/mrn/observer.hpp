#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mrn/formation.hpp"
#include "mrn/rng.hpp"
#include "mrn/vec2.hpp"

namespace mrn {

// ---------------------------------------------------------------------------
// Sensing. A frame holds the ids visible inside the observation radius and
// their noisy positions. Ids are 0-based role indices, kept sorted so noise
// draws are reproducible.

struct ObservationFrame {
  long step_index = 0;
  std::vector<int> ids;
  std::vector<Vec2> positions;

  std::optional<Vec2> find(int id) const {
    const auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return std::nullopt;
    return positions[static_cast<std::size_t>(it - ids.begin())];
  }
};

struct FieldOfView {
  Vec2 center;
  double r_f = 0.0;
  double r_h = 0.0;

  std::vector<int> visible_ids(const WorldState& s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < s.positions.size(); ++i)
      if (s.membership[i] && distance(s.positions[i], center) <= r_f) out.push_back(static_cast<int>(i));
    return out;
  }

  std::vector<int> inner_ids(const WorldState& s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < s.positions.size(); ++i)
      if (s.membership[i] && distance(s.positions[i], center) <= r_h) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline ObservationFrame observe(const WorldState& s, const FieldOfView& fov, double sigma, Rng& rng) {
  ObservationFrame frame;
  frame.step_index = s.step_index;
  frame.ids = fov.visible_ids(s);
  frame.positions.reserve(frame.ids.size());
  for (const int id : frame.ids) {
    Vec2 z = s.positions[id];
    if (sigma > 0.0) z += rng.gaussian_vec(sigma);
    frame.positions.push_back(z);
  }
  return frame;
}

// Column store over a frame sequence; tolerates robots entering/leaving the
// field of view.
class FrameSeries {
 public:
  void push(const ObservationFrame& f) {
    steps_.push_back(f.step_index);
    for (std::size_t k = 0; k < f.ids.size(); ++k) {
      auto& track = tracks_[f.ids[k]];
      track.resize(steps_.size() - 1, std::nullopt);
      track.push_back(f.positions[k]);
    }
    for (auto& [id, track] : tracks_)
      if (track.size() < steps_.size()) track.resize(steps_.size(), std::nullopt);
  }

  int size() const { return static_cast<int>(steps_.size()); }
  long step_at(int k) const { return steps_[k]; }

  std::vector<int> ids() const {
    std::vector<int> out;
    for (const auto& [id, _] : tracks_) out.push_back(id);
    return out;
  }

  // Ids present in every frame of [k0, k1].
  std::vector<int> ids_present(int k0, int k1) const {
    std::vector<int> out;
    for (const auto& [id, track] : tracks_) {
      bool ok = true;
      for (int k = k0; k <= k1 && ok; ++k) ok = track[k].has_value();
      if (ok) out.push_back(id);
    }
    return out;
  }

  bool present(int id, int k) const {
    const auto it = tracks_.find(id);
    return it != tracks_.end() && it->second[k].has_value();
  }

  Vec2 at(int id, int k) const {
    const auto it = tracks_.find(id);
    if (it == tracks_.end() || !it->second[k].has_value())
      throw std::runtime_error("FrameSeries: robot missing from frame");
    return *it->second[k];
  }

  FrameSeries decimated(int stride) const {
    if (stride <= 1) return *this;
    FrameSeries out;
    for (int k = 0; k < size(); k += stride) {
      ObservationFrame f;
      f.step_index = steps_[k];
      for (const auto& [id, track] : tracks_)
        if (track[k].has_value()) {
          f.ids.push_back(id);
          f.positions.push_back(*track[k]);
        }
      out.push(f);
    }
    return out;
  }

  // One frame per block of `stride` consecutive frames, holding the mean
  // position of each robot visible through the whole block. Averaging cuts
  // the observation noise by sqrt(stride) before differencing.
  FrameSeries block_averaged(int stride) const {
    if (stride <= 1) return *this;
    FrameSeries out;
    for (int k0 = 0; k0 + stride <= size(); k0 += stride) {
      ObservationFrame f;
      f.step_index = steps_[k0];
      for (const auto& [id, track] : tracks_) {
        Vec2 acc{};
        bool full = true;
        for (int k = k0; k < k0 + stride && full; ++k) {
          if (!track[k].has_value()) full = false;
          else acc += *track[k];
        }
        if (!full) continue;
        f.ids.push_back(id);
        f.positions.push_back(acc / static_cast<double>(stride));
      }
      out.push(f);
    }
    return out;
  }

  FrameSeries slice(int k0, int k1) const {  // inclusive bounds
    FrameSeries out;
    for (int k = k0; k <= k1; ++k) {
      ObservationFrame f;
      f.step_index = steps_[k];
      for (const auto& [id, track] : tracks_)
        if (track[k].has_value()) {
          f.ids.push_back(id);
          f.positions.push_back(*track[k]);
        }
      out.push(f);
    }
    return out;
  }

 private:
  std::vector<long> steps_;
  std::map<int, std::vector<std::optional<Vec2>>> tracks_;
};

// ---------------------------------------------------------------------------
// Steady-pattern identification.

// Accumulated second-order state difference of one robot over the frame
// window [k0, k0 + l] (frame indices). Throws when the robot is missing from
// any frame of the window.
inline double second_diff_accum(const FrameSeries& frames, int robot, int k0, int l) {
  if (k0 < 0 || k0 + l >= frames.size())
    throw std::invalid_argument("second_diff_accum: window exceeds available frames");
  double acc = 0.0;
  for (int k = k0 + 1; k <= k0 + l - 1; ++k) {
    const Vec2 d2 = (frames.at(robot, k + 1) - frames.at(robot, k)) -
                    (frames.at(robot, k) - frames.at(robot, k - 1));
    acc += d2.norm();
  }
  return acc;
}

// Common-slope line fit of all observed tracks against time. Returns the
// estimated steady velocity and the per-axis intercepts.
struct VelocityFit {
  Vec2 c_hat;
  Vec2 intercept;
};

inline VelocityFit estimate_velocity(const FrameSeries& frames, double step_seconds, int k0, int l) {
  if (l < 1 || k0 < 0 || k0 + l >= frames.size())
    throw std::invalid_argument("estimate_velocity: degenerate window");
  const auto ids = frames.ids_present(k0, k0 + l);
  if (ids.empty()) throw std::invalid_argument("estimate_velocity: no robot covers the window");
  // Pooled least squares per axis: common slope and intercept; the constant
  // per-robot offsets are orthogonal to time, so the slope is unbiased.
  double st = 0.0, stt = 0.0;
  double n = 0.0;
  Vec2 sz{}, szt{};
  for (int k = k0; k <= k0 + l; ++k) {
    const double t = step_seconds * static_cast<double>(frames.step_at(k));
    for (const int id : ids) {
      const Vec2 z = frames.at(id, k);
      st += t;
      stt += t * t;
      sz += z;
      szt += z * t;
      n += 1.0;
    }
  }
  const double denom = n * stt - st * st;
  if (std::abs(denom) < 1e-12) throw std::invalid_argument("estimate_velocity: degenerate window");
  VelocityFit fit;
  fit.c_hat = (szt * n - sz * st) / denom;
  fit.intercept = (sz - fit.c_hat * st) / n;
  return fit;
}

struct LeaderGuess {
  int id = -1;
  bool found = false;
  bool low_confidence = false;
  double delta_s = 0.0;
};

// The leader is the robot whose track shows no velocity change during the
// convergence phase [k0, k_s]. `epsilon` bounds the accumulated second
// difference for acceptance; when several robots qualify the smallest wins
// and the result is flagged low-confidence.
inline LeaderGuess identify_leader(const FrameSeries& frames, int k0, int k_s, double epsilon) {
  LeaderGuess g;
  if (k_s - k0 < 2) {
    g.low_confidence = true;
    return g;
  }
  const auto ids = frames.ids_present(k0, k_s);
  int qualified = 0;
  double best = 0.0;
  for (const int id : ids) {
    const double ds = second_diff_accum(frames, id, k0, k_s - k0);
    if (ds < epsilon) {
      ++qualified;
      if (!g.found || ds < best) {
        best = ds;
        g.id = id;
        g.found = true;
        g.delta_s = ds;
      }
    }
  }
  g.low_confidence = qualified != 1;
  return g;
}

// Smallest frame index k0 whose l-window total second difference over all
// visible robots drops below epsilon. Empty when the horizon never settles.
inline std::optional<int> detect_steady(const FrameSeries& frames, int l, double epsilon) {
  for (int k0 = 0; k0 + l < frames.size(); ++k0) {
    const auto ids = frames.ids_present(k0, k0 + l);
    if (ids.empty()) continue;
    double total = 0.0;
    for (const int id : ids) total += second_diff_accum(frames, id, k0, l);
    if (total <= epsilon) return k0;
  }
  return std::nullopt;
}

// Thresholds. The per-term noise floor of a second difference of two
// i.i.d.-noisy positions is E||N(0, 6 sigma^2 I_2)|| = sigma*sqrt(6*pi/2).
inline double steady_epsilon(double sigma, int n_robots, int window_terms) {
  if (sigma <= 0.0) return 1e-6;
  return 5.0 * sigma * static_cast<double>(n_robots) * static_cast<double>(window_terms);
}

inline double leader_epsilon(double sigma, int window_terms) {
  if (sigma <= 0.0) return 1e-6;
  const double per_term = 3.07 * sigma;
  const double spread = 1.6 * sigma * std::sqrt(static_cast<double>(std::max(1, window_terms)));
  return per_term * window_terms + 5.0 * spread;
}

// Splits frames at the detected steady step: frame k <= k_hat_s goes to the
// convergence set, the rest to the steady set.
inline std::pair<FrameSeries, FrameSeries> build_datasets(const FrameSeries& frames, int k_hat_s) {
  FrameSeries d_c = frames.slice(0, std::min(k_hat_s, frames.size() - 1));
  FrameSeries d_s = k_hat_s + 1 < frames.size() ? frames.slice(k_hat_s + 1, frames.size() - 1)
                                                : FrameSeries{};
  return {std::move(d_c), std::move(d_s)};
}

// ---------------------------------------------------------------------------
// Shape estimation.

struct SteadyPatternEstimate {
  int k_hat_s = 0;                 // absolute step index of the detected steady point
  Vec2 c_hat;                      // steady velocity estimate, m/s
  LeaderGuess leader;
  std::vector<int> ids;            // robots covered by the estimates below
  std::vector<Vec2> s_hat;         // steady-track intercepts per robot
  std::vector<Vec2> h_hat;         // shape offsets anchored at `anchor`
  int anchor = -1;

  std::optional<Vec2> h_of(int id) const {
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (ids[k] == id) return h_hat[k];
    return std::nullopt;
  }
  std::optional<Vec2> s_of(int id) const {
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (ids[k] == id) return s_hat[k];
    return std::nullopt;
  }
  bool is_leader(int id) const { return leader.found && leader.id == id; }
};

struct ShapeFit {
  std::vector<int> ids;
  std::vector<Vec2> s_hat;
  std::vector<Vec2> h_hat;
};

// Mean steady-track residual per robot over the last `l` frames of the
// series; h anchored so the anchor robot's offset is exactly zero.
inline ShapeFit estimate_shape(const FrameSeries& steady_frames, const Vec2& c_hat, double step_seconds,
                               int l, int anchor) {
  const int n = steady_frames.size();
  if (n < l) throw std::invalid_argument("estimate_shape: need at least l steady frames");
  const int k0 = n - l;
  ShapeFit fit;
  fit.ids = steady_frames.ids_present(k0, n - 1);
  bool anchor_seen = false;
  for (const int id : fit.ids) anchor_seen = anchor_seen || id == anchor;
  if (!anchor_seen) throw std::invalid_argument("estimate_shape: anchor robot not observed");
  Vec2 anchor_s{};
  for (const int id : fit.ids) {
    Vec2 acc{};
    for (int k = k0; k < n; ++k)
      acc += steady_frames.at(id, k) - c_hat * (step_seconds * static_cast<double>(steady_frames.step_at(k)));
    const Vec2 s = acc / static_cast<double>(l);
    fit.s_hat.push_back(s);
    if (id == anchor) anchor_s = s;
  }
  for (const Vec2& s : fit.s_hat) fit.h_hat.push_back(s - anchor_s);
  return fit;
}

}  // namespace mrn
