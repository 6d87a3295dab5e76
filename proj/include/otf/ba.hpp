#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "otf/core.hpp"
#include "otf/scene.hpp"
#include "otf/vocab_tree.hpp"

namespace otf {

struct BaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Layered neighborhood of a new frame. Layer 0 is the frame itself; deeper
// layers are retrieval/covisibility neighbors of the previous layer. The
// deepest layer is frozen during BA and anchors the local gauge.
struct AssociationTree {
  std::vector<std::vector<FrameId>> layers;  // layer 0 first
  std::map<FrameId, double> weights;         // per-frame damping weight p_i
  int frozen_layer = -1;                     // index into layers; -1 = none

  bool isFrozen(FrameId id) const {
    if (frozen_layer < 0) return false;
    const auto& l = layers[frozen_layer];
    return std::find(l.begin(), l.end(), id) != l.end();
  }
};

// Breadth-first expansion over `neighbors`, de-duplicated across layers,
// stopping at depth L. Weights: the new image gets 1, layer i gets k^(i-1),
// the deepest layer is frozen.
inline AssociationTree buildAssociationTree(
    FrameId new_frame, int depth_l, double k,
    const std::function<std::vector<FrameId>(FrameId)>& neighbors) {
  AssociationTree tree;
  std::set<FrameId> seen{new_frame};
  tree.layers.push_back({new_frame});
  for (int layer = 1; layer <= depth_l; ++layer) {
    std::vector<FrameId> next;
    for (FrameId f : tree.layers.back()) {
      for (FrameId nb : neighbors(f)) {
        if (seen.insert(nb).second) next.push_back(nb);
      }
    }
    if (next.empty()) break;
    std::sort(next.begin(), next.end());
    tree.layers.push_back(std::move(next));
  }
  tree.weights[new_frame] = 1.0;
  // The deepest non-empty layer beyond 0 is frozen; earlier layers get k^(i-1).
  if (tree.layers.size() > 1) {
    tree.frozen_layer = int(tree.layers.size()) - 1;
    for (int i = 1; i < tree.frozen_layer; ++i)
      for (FrameId f : tree.layers[i]) tree.weights[f] = std::pow(k, i - 1);
    for (FrameId f : tree.layers[tree.frozen_layer])
      tree.weights[f] = std::numeric_limits<double>::infinity();
  }
  return tree;
}

// Neighbor provider for the pipeline: retrieval top-N intersected with
// covisibility (at least one shared point).
inline std::function<std::vector<FrameId>(FrameId)> retrievalCovisibilityNeighbors(
    const SceneGraph& scene, const VocabTree& tree, int top_n) {
  return [&scene, &tree, top_n](FrameId f) {
    const FrameRecord& rec = scene.frame(f);
    std::set<FrameId> covis;
    for (const auto& [id, count] : scene.covisibleFrames(f)) covis.insert(id);
    std::vector<FrameId> out;
    for (const auto& [id, dist] : tree.retrieveTopN(rec.global_descriptor, top_n)) {
      if (id == f) continue;
      if (!scene.hasFrame(id)) continue;
      if (scene.frame(id).state != FrameState::kRegistered) continue;
      if (!covis.count(id)) continue;
      out.push_back(id);
    }
    return out;
  };
}

// ---------------------------------------------------------------------------
// Weighted sparse bundle adjustment
// ---------------------------------------------------------------------------

struct BaCamera {
  FrameId id = -1;
  Pose pose;
  double weight = 1.0;  // damping scale p_i; larger => smaller updates
  bool fixed = false;
};

struct BaPoint {
  PointId id = -1;
  Vec3 position = Vec3::Zero();
};

struct BaObservation {
  int camera = 0;  // index into cameras
  int point = 0;   // index into points
  Vec2 pixel = Vec2::Zero();
};

struct BaProblem {
  std::vector<BaCamera> cameras;
  std::vector<BaPoint> points;
  std::vector<BaObservation> observations;
  CameraIntrinsics intrinsics;
  double huber_width = 2.0;
  bool fix_scale = false;  // pin the distance between the first variable and
                           // first fixed camera (two-view initialization)
  double rel_tol = 1e-6;
  int max_iters = 50;
};

struct BaSolveStats {
  int iterations = 0;
  double initial_cost = 0;
  double final_cost = 0;
  double mre_before = 0;
  double mre_after = 0;
  bool converged = false;
  bool numerical_failure = false;
};

namespace ba_detail {

inline double huberCost(double e, double delta) {
  return e <= delta ? e * e : delta * (2.0 * e - delta);
}

inline double problemCost(const BaProblem& p) {
  double cost = 0;
  for (const auto& o : p.observations) {
    const Vec3 c = p.cameras[o.camera].pose.toCamera(p.points[o.point].position);
    if (c.z() <= 1e-12) {
      cost += ba_detail::huberCost(1e3, p.huber_width);  // behind camera: large fixed penalty
      continue;
    }
    const double e = (p.intrinsics.project(c) - o.pixel).norm();
    cost += huberCost(e, p.huber_width);
  }
  return cost;
}

inline double problemMre(const BaProblem& p) {
  if (p.observations.empty()) return 0;
  double sum = 0;
  for (const auto& o : p.observations) {
    const Vec3 c = p.cameras[o.camera].pose.toCamera(p.points[o.point].position);
    if (c.z() <= 1e-12) continue;
    sum += (p.intrinsics.project(c) - o.pixel).norm();
  }
  return sum / double(p.observations.size());
}

struct ResidualBlock {
  Eigen::Matrix<double, 2, 6> jc = Eigen::Matrix<double, 2, 6>::Zero();
  Eigen::Matrix<double, 2, 3> jp = Eigen::Matrix<double, 2, 3>::Zero();
  Vec2 r = Vec2::Zero();
  bool valid = false;
};

inline ResidualBlock evaluateObservation(const BaProblem& p, const BaObservation& o) {
  ResidualBlock block;
  const Pose& pose = p.cameras[o.camera].pose;
  const Vec3 c = pose.toCamera(p.points[o.point].position);
  if (c.z() <= 1e-9) return block;
  const double iz = 1.0 / c.z();
  block.r = p.intrinsics.project(c) - o.pixel;
  Eigen::Matrix<double, 2, 3> dproj;
  dproj << p.intrinsics.fx * iz, 0, -p.intrinsics.fx * c.x() * iz * iz, 0, p.intrinsics.fy * iz,
      -p.intrinsics.fy * c.y() * iz * iz;
  block.jc.block<2, 3>(0, 0) = dproj * (-skew(c));
  block.jc.block<2, 3>(0, 3) = dproj;
  block.jp = dproj * pose.rotation;
  // Huber whitening.
  const double e = block.r.norm();
  if (e > p.huber_width) {
    const double w = std::sqrt(p.huber_width / e);
    block.r *= w;
    block.jc *= w;
    block.jp *= w;
  }
  block.valid = true;
  return block;
}

}  // namespace ba_detail

// Levenberg-Marquardt with Huber loss: point blocks eliminated by Schur
// complement, reduced camera system solved by dense Cholesky. Each variable
// camera's diagonal damping block is scaled by its weight, so higher-weight
// (farther-ripple) cameras receive smaller updates; fixed cameras are not
// unknowns at all.
inline BaSolveStats solveWeightedLocalBa(BaProblem& p) {
  const int nc = int(p.cameras.size());
  const int np = int(p.points.size());
  std::vector<int> cam_var_index(nc, -1);
  int n_var = 0;
  for (int i = 0; i < nc; ++i)
    if (!p.cameras[i].fixed) cam_var_index[i] = n_var++;

  BaSolveStats stats;
  stats.initial_cost = ba_detail::problemCost(p);
  stats.mre_before = ba_detail::problemMre(p);
  if (n_var == 0 || np == 0 || p.observations.empty()) {
    stats.final_cost = stats.initial_cost;
    stats.mre_after = stats.mre_before;
    stats.converged = true;
    return stats;
  }

  double scale_anchor = -1;
  int scale_var_cam = -1, scale_fixed_cam = -1;
  if (p.fix_scale) {
    for (int i = 0; i < nc && (scale_var_cam < 0 || scale_fixed_cam < 0); ++i) {
      if (!p.cameras[i].fixed && scale_var_cam < 0) scale_var_cam = i;
      if (p.cameras[i].fixed && scale_fixed_cam < 0) scale_fixed_cam = i;
    }
    if (scale_var_cam >= 0 && scale_fixed_cam >= 0)
      scale_anchor = (p.cameras[scale_var_cam].pose.center() -
                      p.cameras[scale_fixed_cam].pose.center())
                         .norm();
  }

  double lambda = 1e-4;
  double cost = stats.initial_cost;

  for (int iter = 0; iter < p.max_iters; ++iter) {
    stats.iterations = iter + 1;

    // Assemble block-structured normal equations.
    std::vector<Eigen::Matrix<double, 6, 6>> hcc(n_var, Eigen::Matrix<double, 6, 6>::Zero());
    std::vector<Eigen::Matrix<double, 6, 1>> gc(n_var, Eigen::Matrix<double, 6, 1>::Zero());
    std::vector<Mat3> hpp(np, Mat3::Zero());
    std::vector<Vec3> gp(np, Vec3::Zero());
    // Camera-point coupling blocks, grouped per point for the Schur step.
    std::vector<std::vector<std::pair<int, Eigen::Matrix<double, 6, 3>>>> hcp(np);

    bool nan_seen = false;
    for (const auto& o : p.observations) {
      const auto block = ba_detail::evaluateObservation(p, o);
      if (!block.valid) continue;
      if (!block.r.allFinite()) {
        nan_seen = true;
        break;
      }
      const int v = cam_var_index[o.camera];
      hpp[o.point] += block.jp.transpose() * block.jp;
      gp[o.point] += block.jp.transpose() * block.r;
      if (v >= 0) {
        hcc[v] += block.jc.transpose() * block.jc;
        gc[v] += block.jc.transpose() * block.r;
        hcp[o.point].emplace_back(v, block.jc.transpose() * block.jp);
      }
    }
    if (nan_seen) {
      stats.numerical_failure = true;
      break;
    }

    // Jacobi scaling D = sqrt(diag(JtJ)) before damping.
    std::vector<Eigen::Matrix<double, 6, 1>> dc(n_var);
    for (int v = 0; v < n_var; ++v)
      dc[v] = hcc[v].diagonal().cwiseMax(1e-12).cwiseSqrt();
    std::vector<Vec3> dp(np);
    for (int j = 0; j < np; ++j) dp[j] = hpp[j].diagonal().cwiseMax(1e-12).cwiseSqrt();

    bool step_done = false;
    for (int escalation = 0; escalation < 10 && !step_done; ++escalation) {
      // Damped per-block diagonals. Variable camera i gets lambda * p_i * D^2.
      std::vector<Mat3> hpp_damped(np);
      std::vector<Mat3> hpp_inv(np);
      bool chol_ok = true;
      for (int j = 0; j < np; ++j) {
        hpp_damped[j] = hpp[j] + lambda * dp[j].cwiseProduct(dp[j]).asDiagonal().toDenseMatrix();
        const Eigen::LLT<Mat3> llt(hpp_damped[j]);
        if (llt.info() != Eigen::Success) {
          chol_ok = false;
          break;
        }
        hpp_inv[j] = llt.solve(Mat3::Identity());
      }
      if (chol_ok) {
        // Reduced camera system (Schur complement).
        MatX s = MatX::Zero(6 * n_var, 6 * n_var);
        VecX rhs = VecX::Zero(6 * n_var);
        int cam_idx = 0;
        for (int i = 0; i < nc; ++i) {
          const int v = cam_var_index[i];
          if (v < 0) continue;
          const double w = p.cameras[i].weight;
          Eigen::Matrix<double, 6, 6> damped =
              hcc[v] +
              (lambda * w * dc[v].cwiseProduct(dc[v])).asDiagonal().toDenseMatrix();
          s.block<6, 6>(6 * v, 6 * v) = damped;
          rhs.segment<6>(6 * v) = -gc[v];
          (void)cam_idx;
        }
        for (int j = 0; j < np; ++j) {
          const Vec3 hinv_gp = hpp_inv[j] * gp[j];
          for (const auto& [va, wa] : hcp[j]) {
            rhs.segment<6>(6 * va) += wa * hinv_gp;
            for (const auto& [vb, wb] : hcp[j]) {
              s.block<6, 6>(6 * va, 6 * vb) -= wa * hpp_inv[j] * wb.transpose();
            }
          }
        }
        const Eigen::LLT<MatX> llt(s);
        if (llt.info() == Eigen::Success) {
          const VecX delta_c = llt.solve(rhs);
          // Back-substitute point updates.
          std::vector<Vec3> delta_p(np);
          for (int j = 0; j < np; ++j) {
            Vec3 acc = -gp[j];
            for (const auto& [va, wa] : hcp[j]) acc -= wa.transpose() * delta_c.segment<6>(6 * va);
            delta_p[j] = hpp_inv[j] * acc;
          }
          // Trial state.
          BaProblem trial = p;
          for (int i = 0; i < nc; ++i) {
            const int v = cam_var_index[i];
            if (v < 0) continue;
            const Eigen::Matrix<double, 6, 1> d = delta_c.segment<6>(6 * v);
            // Left-multiplicative increment on the full pose, matching the
            // -skew(c) rotation block of the Jacobian.
            const Mat3 dr = expSo3(d.head<3>());
            trial.cameras[i].pose.rotation = dr * p.cameras[i].pose.rotation;
            trial.cameras[i].pose.translation = dr * p.cameras[i].pose.translation + d.tail<3>();
          }
          for (int j = 0; j < np; ++j)
            trial.points[j].position = p.points[j].position + delta_p[j];
          if (scale_anchor > 0) {
            const double d = (trial.cameras[scale_var_cam].pose.center() -
                              trial.cameras[scale_fixed_cam].pose.center())
                                 .norm();
            if (d > 1e-12) {
              const double su = scale_anchor / d;
              const Vec3 origin = trial.cameras[scale_fixed_cam].pose.center();
              for (int i = 0; i < nc; ++i) {
                if (cam_var_index[i] < 0) continue;
                Pose& pose = trial.cameras[i].pose;
                const Vec3 c = origin + su * (pose.center() - origin);
                pose.translation = -pose.rotation * c;
              }
              for (int j = 0; j < np; ++j)
                trial.points[j].position =
                    origin + su * (trial.points[j].position - origin);
            }
          }

          const double trial_cost = ba_detail::problemCost(trial);
          if (std::isnan(trial_cost)) {
            stats.numerical_failure = true;
            return stats;
          }
          if (trial_cost < cost) {
            const double rel_decrease = (cost - trial_cost) / std::max(cost, 1e-300);
            p.cameras = std::move(trial.cameras);
            p.points = std::move(trial.points);
            cost = trial_cost;
            lambda = std::max(lambda / 3.0, 1e-12);
            step_done = true;
            if (rel_decrease < p.rel_tol) {
              stats.converged = true;
              stats.final_cost = cost;
              stats.mre_after = ba_detail::problemMre(p);
              return stats;
            }
            continue;
          }
        }
      }
      lambda *= 10.0;  // rejected step or factorization failure
      if (lambda > 1e12) break;
    }
    if (!step_done) {
      stats.converged = true;  // no further progress possible
      break;
    }
  }
  stats.final_cost = cost;
  stats.mre_after = ba_detail::problemMre(p);
  return stats;
}

// ---------------------------------------------------------------------------
// Scene-level local BA
// ---------------------------------------------------------------------------

struct LocalBaConfig {
  int top_n = 8;
  int depth_l = 4;
  double k = 2.0;
  double huber_width = 2.0;
  double rel_tol = 1e-6;
  int max_iters = 50;
};

struct LocalBaStats {
  double wall_ms = 0;
  int iterations = 0;
  double mre_before = 0;
  double mre_after = 0;
  int n_var_cams = 0;
  int n_fixed_cams = 0;
  int n_points = 0;
};

// Build the BA problem for the enrolled frame set: every point observed by at
// least two enrolled frames, with only the enrolled observations.
inline BaProblem assembleBaProblem(const SceneGraph& scene, const AssociationTree& tree,
                                   const CameraIntrinsics& intr, const LocalBaConfig& cfg) {
  BaProblem prob;
  prob.intrinsics = intr;
  prob.huber_width = cfg.huber_width;
  prob.rel_tol = cfg.rel_tol;
  prob.max_iters = cfg.max_iters;

  std::map<FrameId, int> cam_index;
  for (size_t layer = 0; layer < tree.layers.size(); ++layer) {
    for (FrameId f : tree.layers[layer]) {
      BaCamera cam;
      cam.id = f;
      cam.pose = scene.frame(f).pose;
      const double w = tree.weights.at(f);
      cam.fixed = std::isinf(w);
      cam.weight = cam.fixed ? 1.0 : w;
      cam_index[f] = int(prob.cameras.size());
      prob.cameras.push_back(cam);
    }
  }

  std::map<PointId, std::vector<std::pair<FrameId, int>>> enrolled_obs;
  for (const auto& [pid, pt] : scene.points()) {
    for (const auto& t : pt.track) {
      if (cam_index.count(t.frame_id)) enrolled_obs[pid].emplace_back(t.frame_id, t.keypoint_index);
    }
  }
  for (const auto& [pid, obs_list] : enrolled_obs) {
    if (obs_list.size() < 2) continue;
    const int pt_idx = int(prob.points.size());
    prob.points.push_back({pid, scene.points().at(pid).position});
    for (const auto& [fid, kp_idx] : obs_list) {
      const Keypoint& kp = scene.frame(fid).keypoints[kp_idx];
      prob.observations.push_back({cam_index.at(fid), pt_idx, Vec2(kp.x, kp.y)});
    }
  }

  // Two-view degenerate case: a single variable camera against one frozen
  // camera leaves the scale free; pin it.
  int nvar = 0, nfix = 0;
  for (const auto& c : prob.cameras) (c.fixed ? nfix : nvar)++;
  prob.fix_scale = (nvar == 1 && nfix >= 1);
  return prob;
}

// Build tree, assemble, solve, and commit the result atomically.
inline LocalBaStats runLocalBa(SceneGraph& scene, const VocabTree& retrieval, FrameId new_frame,
                               const CameraIntrinsics& intr, const LocalBaConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (scene.frame(new_frame).state != FrameState::kRegistered)
    throw BaError("runLocalBa: frame not registered");

  const auto neighbors = retrievalCovisibilityNeighbors(scene, retrieval, cfg.top_n);
  AssociationTree tree = buildAssociationTree(new_frame, cfg.depth_l, cfg.k, neighbors);
  BaProblem prob = assembleBaProblem(scene, tree, intr, cfg);
  const BaSolveStats solve_stats = solveWeightedLocalBa(prob);

  LocalBaStats stats;
  stats.iterations = solve_stats.iterations;
  stats.mre_before = solve_stats.mre_before;
  stats.mre_after = solve_stats.mre_after;
  stats.n_points = int(prob.points.size());
  for (const auto& c : prob.cameras) (c.fixed ? stats.n_fixed_cams : stats.n_var_cams)++;

  if (!solve_stats.numerical_failure) {
    for (const auto& c : prob.cameras)
      if (!c.fixed) scene.updatePose(c.id, c.pose);
    for (const auto& pt : prob.points)
      scene.updatePoint(pt.id, pt.position, scene.points().at(pt.id).error);
    // Refresh stored per-point errors for the touched points.
    for (const auto& pt : prob.points) {
      const Point3D& sp = scene.points().at(pt.id);
      double err = 0;
      int n = 0;
      for (const auto& t : sp.track) {
        const FrameRecord& fr = scene.frame(t.frame_id);
        if (fr.state != FrameState::kRegistered) continue;
        const Vec3 c = fr.pose.toCamera(sp.position);
        if (c.z() <= 0) continue;
        const Keypoint& kp = fr.keypoints[t.keypoint_index];
        err += (intr.project(c) - Vec2(kp.x, kp.y)).norm();
        ++n;
      }
      scene.updatePoint(pt.id, sp.position, n ? err / n : 0.0);
    }
  }
  stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
  return stats;
}

}  // namespace otf

