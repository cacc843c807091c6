#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrn/excitation.hpp"
#include "mrn/svr.hpp"
#include "mrn/vec2.hpp"

namespace mrn {

// Learned avoidance response: one kernel regressor per axis over the 4-tuple
// (relative obstacle, relative goal, own velocity, obstacle velocity), with
// the physical envelope enforced on top — zero beyond the learned detection
// radius and speed clamped to the shared bound.
class AvoidanceModel {
 public:
  AvoidanceModel() = default;
  AvoidanceModel(double cutoff_radius, double speed_bound)
      : cutoff_(cutoff_radius), bound_(speed_bound) {}

  bool fitted() const { return fitted_; }
  double cutoff() const { return cutoff_; }
  double speed_bound() const { return bound_; }
  int training_size() const { return static_cast<int>(train_pairs_.size()); }
  const std::string& family() const { return family_; }

  void fit(const std::vector<AvoidancePair>& pairs, Rng& rng, const std::string& family = "svr",
           int cv_folds = 10) {
    if (pairs.size() < 10) throw std::invalid_argument("AvoidanceModel::fit: need at least 10 samples");
    train_pairs_ = pairs;
    family_ = family;
    KernelFitConfig cfg;
    cfg.family = family;
    cfg.cv_folds = cv_folds;
    for (int axis = 0; axis < 2; ++axis) {
      std::vector<std::vector<double>> xs;
      std::vector<double> ys;
      for (const auto& p : pairs) {
        if (p.axis != axis) continue;
        xs.push_back({p.q_in[0], p.q_in[1], p.q_in[2], p.q_in[3]});
        ys.push_back(p.q_out);
      }
      if (xs.size() < 4) throw std::invalid_argument("AvoidanceModel::fit: too few samples on one axis");
      fits_[axis] = fit_kernel_regressor(xs, ys, cfg, rng);
    }
    fitted_ = true;
  }

  // Per-axis raw regression value, pre-envelope.
  double predict_axis(int axis, const double q_in[4]) const {
    if (!fitted_) throw std::logic_error("AvoidanceModel: not fitted");
    const std::vector<double> x{q_in[0], q_in[1], q_in[2], q_in[3]};
    return fits_[axis].model.predict(fits_[axis].norm.apply(x));
  }

  // Velocity response (m/s) for a 2-D configuration; exactly zero when the
  // obstacle is beyond the learned cutoff, norm clamped to the bound. The
  // first argument points from the obstacle to the responding robot, the
  // second from the robot to its goal (the training-pair convention).
  Vec2 predict(const Vec2& target_minus_obstacle, const Vec2& goal_minus_target, const Vec2& v_target,
               const Vec2& v_obstacle) const {
    if (target_minus_obstacle.norm() > cutoff_) return {0.0, 0.0};
    const double qx[4] = {target_minus_obstacle.x, goal_minus_target.x, v_target.x, v_obstacle.x};
    const double qy[4] = {target_minus_obstacle.y, goal_minus_target.y, v_target.y, v_obstacle.y};
    return Vec2{predict_axis(0, qx), predict_axis(1, qy)}.clamped(bound_);
  }

  // Batch refit on the accumulated data plus a new batch.
  void update_online(const std::vector<AvoidancePair>& batch, Rng& rng) {
    if (batch.empty()) return;
    auto all = train_pairs_;
    all.insert(all.end(), batch.begin(), batch.end());
    fit(all, rng, family_);
  }

  std::string serialize() const {
    std::ostringstream out;
    out.precision(17);
    out << "avoidance-model v1\n";
    out << family_ << " " << cutoff_ << " " << bound_ << "\n";
    for (int axis = 0; axis < 2; ++axis) {
      const auto& f = fits_[axis];
      out << "axis " << axis << " " << f.gamma << " " << f.penalty << " " << f.tube << " "
          << f.model.bias << "\n";
      out << "norm";
      for (double v : f.norm.mean) out << " " << v;
      for (double v : f.norm.scale) out << " " << v;
      out << "\n";
      out << "sv " << f.model.support.size() << "\n";
      for (std::size_t i = 0; i < f.model.support.size(); ++i) {
        for (double v : f.model.support[i]) out << v << " ";
        out << f.model.coef[i] << "\n";
      }
    }
    return out.str();
  }

  static AvoidanceModel deserialize(std::istream& in) {
    AvoidanceModel m;
    std::string line;
    std::getline(in, line);
    if (line != "avoidance-model v1") throw std::invalid_argument("avoidance model: bad header");
    in >> m.family_ >> m.cutoff_ >> m.bound_;
    for (int axis = 0; axis < 2; ++axis) {
      std::string tag;
      int ax = 0;
      auto& f = m.fits_[axis];
      in >> tag >> ax >> f.gamma >> f.penalty >> f.tube >> f.model.bias;
      f.model.gamma = f.gamma;
      in >> tag;
      f.norm.mean.resize(4);
      f.norm.scale.resize(4);
      for (double& v : f.norm.mean) in >> v;
      for (double& v : f.norm.scale) in >> v;
      std::size_t nsv = 0;
      in >> tag >> nsv;
      f.model.support.assign(nsv, std::vector<double>(4));
      f.model.coef.assign(nsv, 0.0);
      for (std::size_t i = 0; i < nsv; ++i) {
        for (double& v : f.model.support[i]) in >> v;
        in >> f.model.coef[i];
      }
    }
    if (!in) throw std::invalid_argument("avoidance model: truncated record");
    m.fitted_ = true;
    return m;
  }

  const KernelFitResult& axis_fit(int axis) const { return fits_[axis]; }

 private:
  double cutoff_ = 2.0;
  double bound_ = 1.0;
  std::string family_ = "svr";
  KernelFitResult fits_[2];
  std::vector<AvoidancePair> train_pairs_;
  bool fitted_ = false;
};

// Regression-quality metrics. `mda_paper` is the signed-mean statistic as
// printed in the source material (range [-1, 1]); `directional_agreement`
// is the fraction of samples whose predicted sign matches, which is what the
// reported percentages correspond to.
struct RegressionReport {
  double mda_paper = 0.0;
  double directional_agreement = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  int samples = 0;
};

inline RegressionReport evaluate_pairs(const AvoidanceModel& model,
                                       const std::vector<AvoidancePair>& pairs) {
  RegressionReport rep;
  if (pairs.empty()) throw std::invalid_argument("evaluate_pairs: empty test set");
  double se = 0.0, ae = 0.0, mda = 0.0, agree = 0.0;
  for (const auto& p : pairs) {
    const double pred = model.predict_axis(p.axis, p.q_in);
    const double e = p.q_out - pred;
    se += e * e;
    ae += std::abs(e);
    mda += e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
    const auto sgn = [](double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); };
    agree += sgn(p.q_out) == sgn(pred) ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(pairs.size());
  rep.samples = static_cast<int>(pairs.size());
  rep.rmse = std::sqrt(se / n);
  rep.mae = ae / n;
  rep.mda_paper = mda / n;
  rep.directional_agreement = agree / n;
  return rep;
}

// Deterministic even subsample used to cap the training set.
inline std::vector<AvoidancePair> subsample_pairs(const std::vector<AvoidancePair>& pairs, int cap) {
  if (static_cast<int>(pairs.size()) <= cap) return pairs;
  std::vector<AvoidancePair> out;
  const double stride = static_cast<double>(pairs.size()) / cap;
  for (int i = 0; i < cap; ++i) out.push_back(pairs[static_cast<std::size_t>(i * stride)]);
  return out;
}

// Quasi-static response episodes against the true mechanism: a robot with a
// displaced goal reacts to a parked observer for one response window. Inputs
// carry observation noise; outputs are the window-mean velocity, optionally
// noise-free for evaluation against ground truth.
inline std::vector<AvoidancePair> synthetic_avoidance_pairs(const FormationConfig& cfg, double sigma,
                                                            int n_records, int response_window,
                                                            int velocity_window, Rng& rng,
                                                            bool clean_outputs) {
  std::vector<AvoidancePair> out;
  AvoidanceParams p = cfg.avoidance;
  p.saturation = cfg.max_accel;
  const double dt = cfg.step;
  while (static_cast<int>(out.size()) < n_records) {
    const double d0 = rng.uniform(cfg.radius_s + 0.05, cfg.radius_o * 0.97);
    const Vec2 rel0 = rng.unit_vec() * d0;  // obstacle held at this offset from the robot
    const Vec2 goal = rng.unit_vec() * rng.uniform(0.0, 1.2);
    Vec2 z{};
    Vec2 v{};
    // The obstacle shadows the robot, holding the relative configuration;
    // a short lead-in makes the recorded velocity the reacting one.
    const int lead = velocity_window;
    std::vector<Vec2> track{z};
    for (int k = 0; k < lead + response_window; ++k) {
      v = avoidance_true(-rel0, goal - z, {}, v, p, cfg.radius_o, cfg.radius_s);
      z += v * dt;
      track.push_back(z);
    }
    const Vec2 z_start = track[lead];
    const Vec2 mean_v_true = (track[lead + response_window] - z_start) / (response_window * dt);
    const Vec2 noise_pos_v = rng.gaussian_vec(sigma);
    const Vec2 noise_pos_a = rng.gaussian_vec(sigma);
    const Vec2 vel_feature = (track[lead] - track[0]) / (lead * dt) +
                             rng.gaussian_vec(sigma * std::sqrt(2.0) / (lead * dt));
    const Vec2 out_noise = clean_outputs
                               ? Vec2{}
                               : rng.gaussian_vec(sigma * std::sqrt(2.0) / (response_window * dt));
    const Vec2 rel_obstacle = rel0 + noise_pos_v - noise_pos_a;
    // The goal estimate is track-based in the pipeline and much cleaner
    // than a raw position observation.
    const Vec2 rel_goal = goal - z_start + rng.gaussian_vec(0.5 * sigma);
    for (int axis = 0; axis < 2; ++axis) {
      AvoidancePair pair;
      pair.k = static_cast<long>(out.size());
      pair.axis = axis;
      pair.q_in[0] = axis == 0 ? rel_obstacle.x : rel_obstacle.y;
      pair.q_in[1] = axis == 0 ? rel_goal.x : rel_goal.y;
      pair.q_in[2] = axis == 0 ? vel_feature.x : vel_feature.y;
      pair.q_in[3] = 0.0;  // observer parked
      pair.q_out = (axis == 0 ? mean_v_true.x + out_noise.x : mean_v_true.y + out_noise.y);
      out.push_back(pair);
      if (static_cast<int>(out.size()) >= n_records) break;
    }
  }
  return out;
}

}  // namespace mrn
