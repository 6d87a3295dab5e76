#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "otf/core.hpp"
#include "otf/image.hpp"
#include "otf/scene.hpp"

namespace otf {

// Affine + linear-radiometric warp between two local grey-value windows.
struct LsmParams {
  double a0 = 0, a1 = 1, a2 = 0;
  double b0 = 0, b1 = 0, b2 = 1;
  double h0 = 0, h1 = 1;

  bool affineNonDegenerate() const { return std::abs(a1 * b2 - a2 * b1) > 1e-3; }
};

struct LsmResult {
  bool converged = false;
  Vec2 refined_point = Vec2::Zero();
  LsmParams params;
  int iterations = 0;
  double final_rmse = 0;
};

namespace lsm_detail {

// Residuals and Jacobian of the 8-parameter model over the window.
// Window coordinates (u, v) run over the patch centered at p1 in image 1;
// the affine maps them into image 2.
inline bool evaluate(const ImageU8& img1, const ImageU8& img2, const Vec2& p1, int half,
                     const LsmParams& p, VecX* residuals, MatX* jacobian) {
  const int n = (2 * half + 1) * (2 * half + 1);
  if (residuals) residuals->resize(n);
  if (jacobian) jacobian->resize(n, 8);
  int row = 0;
  for (int v = -half; v <= half; ++v) {
    for (int u = -half; u <= half; ++u, ++row) {
      const double x1 = p1.x() + u, y1 = p1.y() + v;
      const double x2 = p.a0 + p.a1 * u + p.a2 * v;
      const double y2 = p.b0 + p.b1 * u + p.b2 * v;
      if (!img1.inBounds(x1, y1, 1.0) || !img2.inBounds(x2, y2, 2.0)) return false;
      const double i1 = img1.sample(x1, y1);
      const double i2 = img2.sample(x2, y2);
      if (residuals) (*residuals)(row) = i1 - p.h0 - p.h1 * i2;
      if (jacobian) {
        // Exact gradient of the bilinear interpolant at (x2, y2).
        const int x0 = int(std::floor(x2)), y0 = int(std::floor(y2));
        const double fx = x2 - x0, fy = y2 - y0;
        const double i00 = img2.at(x0, y0), i10 = img2.at(x0 + 1, y0);
        const double i01 = img2.at(x0, y0 + 1), i11 = img2.at(x0 + 1, y0 + 1);
        const double gx = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
        const double gy = (1.0 - fx) * (i01 - i00) + fx * (i11 - i10);
        (*jacobian)(row, 0) = -p.h1 * gx;
        (*jacobian)(row, 1) = -p.h1 * gx * u;
        (*jacobian)(row, 2) = -p.h1 * gx * v;
        (*jacobian)(row, 3) = -p.h1 * gy;
        (*jacobian)(row, 4) = -p.h1 * gy * u;
        (*jacobian)(row, 5) = -p.h1 * gy * v;
        (*jacobian)(row, 6) = -1.0;
        (*jacobian)(row, 7) = -i2;
      }
    }
  }
  return true;
}

}  // namespace lsm_detail

// Gauss-Newton refinement of a single correspondence. Failure (flat texture,
// window leaving the image, non-convergence) marks the match as an outlier.
inline LsmResult lsmRefine(const ImageU8& img1, const ImageU8& img2, const Vec2& p1,
                           const Vec2& p2_init, int window = 15, int max_iters = 20) {
  if (window % 2 == 0) throw std::invalid_argument("lsmRefine: window must be odd");
  const int half = window / 2;
  LsmResult result;
  LsmParams p;
  p.a0 = p2_init.x();
  p.b0 = p2_init.y();

  const double border = half + 2.0;
  if (!img1.inBounds(p1.x(), p1.y(), border) || !img2.inBounds(p2_init.x(), p2_init.y(), border))
    return result;

  double prev_rmse = std::numeric_limits<double>::infinity();
  int bad_steps = 0;
  VecX r;
  MatX j;
  for (int iter = 1; iter <= max_iters; ++iter) {
    result.iterations = iter;
    if (!lsm_detail::evaluate(img1, img2, p1, half, p, &r, &j)) return result;

    const double rmse = std::sqrt(r.squaredNorm() / r.size());
    if (iter > 1 && rmse > prev_rmse + 1e-9) {
      if (++bad_steps > 1) return result;  // diverging
    }
    prev_rmse = std::min(prev_rmse, rmse);

    Eigen::Matrix<double, 8, 8> normal = j.transpose() * j;
    Eigen::JacobiSVD<Eigen::Matrix<double, 8, 8>> svd(normal,
                                                      Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double cond = svd.singularValues()(0) / std::max(svd.singularValues()(7), 1e-300);
    if (cond > 1e12) return result;  // flat texture

    const Eigen::Matrix<double, 8, 1> delta = svd.solve(-j.transpose() * r);
    p.a0 += delta(0);
    p.a1 += delta(1);
    p.a2 += delta(2);
    p.b0 += delta(3);
    p.b1 += delta(4);
    p.b2 += delta(5);
    p.h0 += delta(6);
    p.h1 += delta(7);
    if (p.h1 <= 0 || !p.affineNonDegenerate()) return result;

    // Position-equivalent update: max displacement of any window pixel.
    const double pos_update =
        std::max(std::abs(delta(0)) + half * (std::abs(delta(1)) + std::abs(delta(2))),
                 std::abs(delta(3)) + half * (std::abs(delta(4)) + std::abs(delta(5))));
    const double h_update = std::max(std::abs(delta(6)) / std::max(std::abs(p.h0), 1.0),
                                     std::abs(delta(7)) / std::max(std::abs(p.h1), 1e-6));
    if (pos_update < 0.01 && h_update < 1e-3) {
      if (!lsm_detail::evaluate(img1, img2, p1, half, p, &r, nullptr)) return result;
      result.converged = true;
      result.params = p;
      result.refined_point = {p.a0, p.b0};
      result.final_rmse = std::sqrt(r.squaredNorm() / r.size());
      if (!img2.inBounds(result.refined_point.x(), result.refined_point.y(), half))
        result.converged = false;
      return result;
    }
  }
  return result;  // iteration budget exhausted
}

struct RefineMatchesResult {
  // Parallel to the input list: refined image-2 positions for survivors.
  std::vector<std::pair<int, Vec2>> refined;  // (input index, refined p2)
  std::vector<int> outliers;                  // input indices
  std::vector<LsmResult> details;
};

inline RefineMatchesResult refineMatches(const ImageU8& img1, const ImageU8& img2,
                                         const std::vector<std::pair<Vec2, Vec2>>& matches,
                                         int window = 15, double rmse_reject = 20.0) {
  RefineMatchesResult out;
  out.details.reserve(matches.size());
  for (size_t i = 0; i < matches.size(); ++i) {
    LsmResult r = lsmRefine(img1, img2, matches[i].first, matches[i].second, window);
    if (r.converged && r.final_rmse <= rmse_reject)
      out.refined.emplace_back(int(i), r.refined_point);
    else
      out.outliers.push_back(int(i));
    out.details.push_back(std::move(r));
  }
  return out;
}

struct DensifiedMatch {
  PointId point_id;
  Vec2 position;  // refined 2D position in the new frame
};

// Reproject already-triangulated points that the new frame should see but does
// not observe yet, then LSM-refine each coarse position against the reference
// patch from the track member with the smallest viewing-angle difference.
inline std::vector<DensifiedMatch> densifyMatches(const SceneGraph& scene,
                                                  const FrameRecord& frame,
                                                  const Pose& coarse_pose,
                                                  const CameraIntrinsics& intrinsics,
                                                  int window = 15, double rmse_reject = 20.0) {
  std::vector<DensifiedMatch> out;
  const double margin = window / 2 + 2.0;
  const Vec3 new_center = coarse_pose.center();
  for (const auto& [pid, pt] : scene.points()) {
    const Vec3 cam = coarse_pose.toCamera(pt.position);
    if (cam.z() <= 0) continue;  // behind camera
    const Vec2 proj = intrinsics.project(cam);
    if (proj.x() < margin || proj.y() < margin || proj.x() > intrinsics.width - 1 - margin ||
        proj.y() > intrinsics.height - 1 - margin)
      continue;
    bool already_observed = false;
    for (const auto& t : pt.track)
      if (t.frame_id == frame.frame_id) {
        already_observed = true;
        break;
      }
    if (already_observed) continue;

    // Reference patch: smallest angle between viewing rays.
    const Vec3 new_ray = (pt.position - new_center).normalized();
    double best_angle = std::numeric_limits<double>::infinity();
    const Observation* best_obs = nullptr;
    for (const auto& t : pt.track) {
      const FrameRecord& ref = scene.frame(t.frame_id);
      if (ref.state != FrameState::kRegistered) continue;
      const Vec3 ray = (pt.position - ref.pose.center()).normalized();
      const double angle = std::acos(std::clamp(new_ray.dot(ray), -1.0, 1.0));
      if (angle < best_angle) {
        best_angle = angle;
        best_obs = &t;
      }
    }
    if (!best_obs) continue;
    const FrameRecord& ref = scene.frame(best_obs->frame_id);
    const Keypoint& kp = ref.keypoints[best_obs->keypoint_index];
    const LsmResult r =
        lsmRefine(ref.pixels, frame.pixels, {kp.x, kp.y}, proj, window);
    if (r.converged && r.final_rmse <= rmse_reject) out.push_back({pid, r.refined_point});
  }
  return out;
}

}  // namespace otf
