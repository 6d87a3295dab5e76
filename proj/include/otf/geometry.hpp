#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "otf/core.hpp"
#include "otf/rng.hpp"

namespace otf {

enum class ModelKind { kFundamental, kEssential, kHomography };

struct TwoViewModel {
  ModelKind kind = ModelKind::kFundamental;
  Mat3 matrix = Mat3::Zero();  // F, E, or H
  std::vector<int> inlier_indices;
  double inlier_threshold = 4.0;
  double gric_score = 0;
  // Essential only: relative pose of the second camera w.r.t. the first,
  // with unit baseline.
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  bool rotation_degenerate = false;
};

struct RansacOptions {
  double threshold = 4.0;
  int max_iters = 2000;
  double confidence = 0.99;
  uint64_t seed = 0;
};

namespace geo_detail {

inline int adaptiveIterations(int inliers, int total, int sample_size, double confidence,
                              int max_iters) {
  if (inliers <= 0 || total <= 0) return max_iters;
  const double w = double(inliers) / total;
  const double p_sample = std::pow(w, sample_size);
  if (p_sample >= 1.0 - 1e-12) return 1;
  const double denom = std::log(1.0 - p_sample);
  if (denom >= -1e-12) return max_iters;
  const double n = std::log(1.0 - confidence) / denom;
  return n > max_iters ? max_iters : std::max(1, int(std::ceil(n)));
}

// Hartley normalization: translate to centroid, scale mean distance to sqrt(2).
inline Mat3 normalizingTransform(const std::vector<Vec2>& pts, const std::vector<int>& idx) {
  Vec2 mean = Vec2::Zero();
  for (int i : idx) mean += pts[i];
  mean /= double(idx.size());
  double mean_dist = 0;
  for (int i : idx) mean_dist += (pts[i] - mean).norm();
  mean_dist /= double(idx.size());
  const double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  Mat3 t;
  t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
  return t;
}

inline std::vector<int> sampleIndices(SeededRng& rng, int n, int k) {
  std::vector<int> idx(k);
  for (int i = 0; i < k; ++i) {
    bool dup;
    do {
      dup = false;
      idx[i] = rng.uniformInt(0, n - 1);
      for (int j = 0; j < i; ++j)
        if (idx[j] == idx[i]) {
          dup = true;
          break;
        }
    } while (dup);
  }
  return idx;
}

}  // namespace geo_detail

inline double sampsonDistance(const Mat3& f, const Vec2& x1, const Vec2& x2) {
  const Vec3 p1(x1.x(), x1.y(), 1.0), p2(x2.x(), x2.y(), 1.0);
  const Vec3 fp1 = f * p1;
  const Vec3 ftp2 = f.transpose() * p2;
  const double num = p2.dot(fp1);
  const double den = fp1.head<2>().squaredNorm() + ftp2.head<2>().squaredNorm();
  if (den < 1e-300) return std::numeric_limits<double>::infinity();
  return std::abs(num) / std::sqrt(den);
}

// Normalized linear solver for F (>= 8 correspondences); rank-2 enforced.
inline std::optional<Mat3> solveFundamentalLinear(const std::vector<Vec2>& a,
                                                  const std::vector<Vec2>& b,
                                                  const std::vector<int>& idx) {
  if (idx.size() < 8) return std::nullopt;
  const Mat3 ta = geo_detail::normalizingTransform(a, idx);
  const Mat3 tb = geo_detail::normalizingTransform(b, idx);
  MatX m(idx.size(), 9);
  for (size_t r = 0; r < idx.size(); ++r) {
    const Vec3 p1 = ta * Vec3(a[idx[r]].x(), a[idx[r]].y(), 1.0);
    const Vec3 p2 = tb * Vec3(b[idx[r]].x(), b[idx[r]].y(), 1.0);
    m.row(r) << p2.x() * p1.x(), p2.x() * p1.y(), p2.x(), p2.y() * p1.x(), p2.y() * p1.y(),
        p2.y(), p1.x(), p1.y(), 1.0;
  }
  Eigen::JacobiSVD<MatX> svd(m, Eigen::ComputeFullV);
  if (svd.rank() < 8) return std::nullopt;  // degenerate sample
  const VecX fvec = svd.matrixV().col(8);
  Mat3 f;
  f << fvec(0), fvec(1), fvec(2), fvec(3), fvec(4), fvec(5), fvec(6), fvec(7), fvec(8);
  // Rank-2 enforcement.
  Eigen::JacobiSVD<Mat3> fs(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = fs.singularValues();
  s(2) = 0;
  f = fs.matrixU() * s.asDiagonal() * fs.matrixV().transpose();
  f = tb.transpose() * f * ta;
  const double norm = f.norm();
  if (norm < 1e-300) return std::nullopt;
  return Mat3(f / norm);
}

// DLT homography from >= 4 correspondences.
inline std::optional<Mat3> solveHomographyLinear(const std::vector<Vec2>& a,
                                                 const std::vector<Vec2>& b,
                                                 const std::vector<int>& idx) {
  if (idx.size() < 4) return std::nullopt;
  const Mat3 ta = geo_detail::normalizingTransform(a, idx);
  const Mat3 tb = geo_detail::normalizingTransform(b, idx);
  MatX m(2 * idx.size(), 9);
  for (size_t r = 0; r < idx.size(); ++r) {
    const Vec3 p1 = ta * Vec3(a[idx[r]].x(), a[idx[r]].y(), 1.0);
    const Vec3 p2 = tb * Vec3(b[idx[r]].x(), b[idx[r]].y(), 1.0);
    m.row(2 * r) << -p1.x(), -p1.y(), -1, 0, 0, 0, p2.x() * p1.x(), p2.x() * p1.y(), p2.x();
    m.row(2 * r + 1) << 0, 0, 0, -p1.x(), -p1.y(), -1, p2.y() * p1.x(), p2.y() * p1.y(), p2.y();
  }
  Eigen::JacobiSVD<MatX> svd(m, Eigen::ComputeFullV);
  if (svd.rank() < 8) return std::nullopt;
  const VecX hvec = svd.matrixV().col(8);
  Mat3 h;
  h << hvec(0), hvec(1), hvec(2), hvec(3), hvec(4), hvec(5), hvec(6), hvec(7), hvec(8);
  h = tb.inverse() * h * ta;
  if (std::abs(h.determinant()) < 1e-12) return std::nullopt;
  return Mat3(h / h(2, 2));
}

inline double symmetricTransferDistance(const Mat3& h, const Mat3& h_inv, const Vec2& x1,
                                        const Vec2& x2) {
  const Vec3 p1(x1.x(), x1.y(), 1.0), p2(x2.x(), x2.y(), 1.0);
  const Vec3 f = h * p1;
  const Vec3 r = h_inv * p2;
  if (std::abs(f.z()) < 1e-12 || std::abs(r.z()) < 1e-12)
    return std::numeric_limits<double>::infinity();
  const double d1 = (f.head<2>() / f.z() - x2).norm();
  const double d2 = (r.head<2>() / r.z() - x1).norm();
  return std::sqrt(0.5 * (d1 * d1 + d2 * d2));
}

// First-order geometric (Sampson) squared error of a homography: algebraic
// transfer residual whitened by its Jacobian over all four measurement
// coordinates. Codimension 2, so the expected value under noise sigma per
// coordinate is 2 sigma^2, matching the GRIC dimension terms.
inline double homographySampsonSq(const Mat3& h, const Vec2& x1, const Vec2& x2) {
  const Vec3 p1(x1.x(), x1.y(), 1.0);
  const Vec3 hp = h * p1;
  const Vec2 g(x2.x() * hp.z() - hp.x(), x2.y() * hp.z() - hp.y());
  Eigen::Matrix<double, 2, 4> j;
  j << x2.x() * h(2, 0) - h(0, 0), x2.x() * h(2, 1) - h(0, 1), hp.z(), 0,
      x2.y() * h(2, 0) - h(1, 0), x2.y() * h(2, 1) - h(1, 1), 0, hp.z();
  const Eigen::Matrix2d jjt = j * j.transpose();
  if (std::abs(jjt.determinant()) < 1e-300) return std::numeric_limits<double>::infinity();
  return g.dot(jjt.inverse() * g);
}

// LO-RANSAC with the normalized 8-point solver and Sampson-distance inliers.
inline std::optional<TwoViewModel> estimateFundamental(const std::vector<Vec2>& a,
                                                       const std::vector<Vec2>& b,
                                                       const RansacOptions& opt,
                                                       int min_inliers = 15) {
  const int n = int(a.size());
  if (n < 8) return std::nullopt;
  SeededRng rng(opt.seed, "ransac_f");
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;

  Mat3 best_f = Mat3::Zero();
  std::vector<int> best_inliers;
  int iters = opt.max_iters;
  for (int it = 0; it < iters; ++it) {
    const auto sample = geo_detail::sampleIndices(rng, n, 8);
    auto f = solveFundamentalLinear(a, b, sample);
    if (!f) continue;
    std::vector<int> inliers;
    for (int i = 0; i < n; ++i)
      if (sampsonDistance(*f, a[i], b[i]) < opt.threshold) inliers.push_back(i);
    if (inliers.size() > best_inliers.size()) {
      // Local optimization: refit on the inlier set and recount.
      if (inliers.size() >= 8) {
        auto refined = solveFundamentalLinear(a, b, inliers);
        if (refined) {
          std::vector<int> in2;
          for (int i = 0; i < n; ++i)
            if (sampsonDistance(*refined, a[i], b[i]) < opt.threshold) in2.push_back(i);
          if (in2.size() >= inliers.size()) {
            inliers = std::move(in2);
            f = refined;
          }
        }
      }
      best_inliers = inliers;
      best_f = *f;
      iters = std::min(iters, it + 1 + geo_detail::adaptiveIterations(int(best_inliers.size()), n,
                                                                      8, opt.confidence,
                                                                      opt.max_iters));
    }
  }
  if (int(best_inliers.size()) < std::max(min_inliers, 8)) return std::nullopt;
  // Final least-squares refit on inliers.
  if (auto final_f = solveFundamentalLinear(a, b, best_inliers)) {
    std::vector<int> in2;
    for (int i = 0; i < n; ++i)
      if (sampsonDistance(*final_f, a[i], b[i]) < opt.threshold) in2.push_back(i);
    if (in2.size() >= best_inliers.size()) {
      best_f = *final_f;
      best_inliers = std::move(in2);
    }
  }
  TwoViewModel model;
  model.kind = ModelKind::kFundamental;
  model.matrix = best_f;
  model.inlier_indices = std::move(best_inliers);
  model.inlier_threshold = opt.threshold;
  return model;
}

inline std::optional<TwoViewModel> estimateHomography(const std::vector<Vec2>& a,
                                                      const std::vector<Vec2>& b,
                                                      const RansacOptions& opt,
                                                      int min_inliers = 15) {
  const int n = int(a.size());
  if (n < 4) return std::nullopt;
  SeededRng rng(opt.seed, "ransac_h");

  Mat3 best_h = Mat3::Identity();
  std::vector<int> best_inliers;
  int iters = opt.max_iters;
  for (int it = 0; it < iters; ++it) {
    const auto sample = geo_detail::sampleIndices(rng, n, 4);
    auto h = solveHomographyLinear(a, b, sample);
    if (!h) continue;
    const Mat3 h_inv = h->inverse();
    std::vector<int> inliers;
    for (int i = 0; i < n; ++i)
      if (symmetricTransferDistance(*h, h_inv, a[i], b[i]) < opt.threshold) inliers.push_back(i);
    if (inliers.size() > best_inliers.size()) {
      if (inliers.size() >= 4) {
        auto refined = solveHomographyLinear(a, b, inliers);
        if (refined) {
          const Mat3 r_inv = refined->inverse();
          std::vector<int> in2;
          for (int i = 0; i < n; ++i)
            if (symmetricTransferDistance(*refined, r_inv, a[i], b[i]) < opt.threshold)
              in2.push_back(i);
          if (in2.size() >= inliers.size()) {
            inliers = std::move(in2);
            h = refined;
          }
        }
      }
      best_inliers = inliers;
      best_h = *h;
      iters = std::min(iters, it + 1 + geo_detail::adaptiveIterations(int(best_inliers.size()), n,
                                                                      4, opt.confidence,
                                                                      opt.max_iters));
    }
  }
  if (int(best_inliers.size()) < std::max(min_inliers, 4)) return std::nullopt;
  TwoViewModel model;
  model.kind = ModelKind::kHomography;
  model.matrix = best_h;
  model.inlier_indices = std::move(best_inliers);
  model.inlier_threshold = opt.threshold;
  return model;
}

// Homogeneous-DLT two-view triangulation with projection matrices [R|t].
inline Vec3 triangulateDlt(const Pose& pose1, const Pose& pose2, const Vec2& n1, const Vec2& n2) {
  Eigen::Matrix<double, 3, 4> p1, p2;
  p1 << pose1.rotation, pose1.translation;
  p2 << pose2.rotation, pose2.translation;
  Eigen::Matrix4d m;
  m.row(0) = n1.x() * p1.row(2) - p1.row(0);
  m.row(1) = n1.y() * p1.row(2) - p1.row(1);
  m.row(2) = n2.x() * p2.row(2) - p2.row(0);
  m.row(3) = n2.y() * p2.row(2) - p2.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(m, Eigen::ComputeFullV);
  Eigen::Vector4d x = svd.matrixV().col(3);
  if (std::abs(x(3)) < 1e-300) return Vec3::Constant(std::numeric_limits<double>::quiet_NaN());
  return x.head<3>() / x(3);
}

// Essential matrix through the normalized 8-point solver inside RANSAC,
// singular values projected to (s, s, 0), decomposed with cheirality
// disambiguation over the four (R, t) candidates.
inline std::optional<TwoViewModel> estimateEssential(const std::vector<Vec2>& a,
                                                     const std::vector<Vec2>& b,
                                                     const CameraIntrinsics& intr,
                                                     const RansacOptions& opt,
                                                     int min_inliers = 15) {
  const int n = int(a.size());
  if (n < 8) return std::nullopt;
  std::vector<Vec2> na(n), nb(n);
  for (int i = 0; i < n; ++i) {
    na[i] = intr.normalize(a[i]);
    nb[i] = intr.normalize(b[i]);
  }
  const double focal = 0.5 * (intr.fx + intr.fy);
  const double norm_threshold = opt.threshold / focal;

  auto solveE = [&](const std::vector<int>& idx) -> std::optional<Mat3> {
    auto f = solveFundamentalLinear(na, nb, idx);
    if (!f) return std::nullopt;
    Eigen::JacobiSVD<Mat3> svd(*f, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 s = svd.singularValues();
    const double m = 0.5 * (s(0) + s(1));
    Mat3 e = svd.matrixU() * Vec3(m, m, 0).asDiagonal() * svd.matrixV().transpose();
    return Mat3(e / e.norm());
  };

  SeededRng rng(opt.seed, "ransac_e");
  Mat3 best_e = Mat3::Zero();
  std::vector<int> best_inliers;
  int iters = opt.max_iters;
  for (int it = 0; it < iters; ++it) {
    const auto sample = geo_detail::sampleIndices(rng, n, 8);
    auto e = solveE(sample);
    if (!e) continue;
    std::vector<int> inliers;
    for (int i = 0; i < n; ++i)
      if (sampsonDistance(*e, na[i], nb[i]) < norm_threshold) inliers.push_back(i);
    if (inliers.size() > best_inliers.size()) {
      if (inliers.size() >= 8) {
        if (auto refined = solveE(inliers)) {
          std::vector<int> in2;
          for (int i = 0; i < n; ++i)
            if (sampsonDistance(*refined, na[i], nb[i]) < norm_threshold) in2.push_back(i);
          if (in2.size() >= inliers.size()) {
            inliers = std::move(in2);
            e = refined;
          }
        }
      }
      best_inliers = inliers;
      best_e = *e;
      iters = std::min(iters, it + 1 + geo_detail::adaptiveIterations(int(best_inliers.size()), n,
                                                                      8, opt.confidence,
                                                                      opt.max_iters));
    }
  }
  if (int(best_inliers.size()) < std::max(min_inliers, 8)) return std::nullopt;

  // Decompose: E = [t]x R, four candidates.
  Eigen::JacobiSVD<Mat3> svd(best_e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  if (u.determinant() < 0) u.col(2) *= -1;
  if (v.determinant() < 0) v.col(2) *= -1;
  Mat3 w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 r1 = u * w * v.transpose();
  const Mat3 r2 = u * w.transpose() * v.transpose();
  const Vec3 t = u.col(2);

  const Pose identity_pose;
  int best_support = -1;
  Mat3 best_r = Mat3::Identity();
  Vec3 best_t = Vec3::Zero();
  const std::vector<std::pair<Mat3, Vec3>> candidates{
      {r1, t}, {r1, -t}, {r2, t}, {r2, -t}};
  for (const auto& [r, tt] : candidates) {
    Pose second{r, tt};
    int support = 0;
    for (int i : best_inliers) {
      const Vec3 x = triangulateDlt(identity_pose, second, na[i], nb[i]);
      if (!x.allFinite()) continue;
      if (x.z() > 0 && second.toCamera(x).z() > 0) ++support;
    }
    if (support > best_support) {
      best_support = support;
      best_r = r;
      best_t = tt;
    }
  }
  if (best_support <= 0) return std::nullopt;

  TwoViewModel model;
  model.kind = ModelKind::kEssential;
  model.matrix = best_e;
  model.inlier_indices = best_inliers;
  model.inlier_threshold = opt.threshold;
  model.rotation = best_r;
  model.translation = best_t;
  // Pure rotation: few inliers pass the cheirality test with a meaningful
  // baseline when translation is degenerate.
  model.rotation_degenerate = best_support < int(best_inliers.size()) / 2;
  return model;
}

// GRIC score (lower is better): sum of truncated robust residual terms plus
// model-dimension and parameter-count penalties.
inline double gricScore(const TwoViewModel& model, const std::vector<Vec2>& a,
                        const std::vector<Vec2>& b, const CameraIntrinsics& intr, double sigma) {
  const int n = int(a.size());
  const double r = 4.0;
  double d, kparams;
  switch (model.kind) {
    case ModelKind::kFundamental: d = 3; kparams = 7; break;
    case ModelKind::kEssential: d = 3; kparams = 5; break;
    case ModelKind::kHomography: d = 2; kparams = 8; break;
    default: d = 3; kparams = 7; break;
  }
  const double lambda1 = std::log(r);
  const double lambda2 = std::log(r * n);
  const double cap = 2.0 * (r - d);

  Mat3 pixel_f = model.matrix;
  if (model.kind == ModelKind::kEssential) {
    const Mat3 k_inv = intr.K().inverse();
    pixel_f = k_inv.transpose() * model.matrix * k_inv;
  }
  double score = 0;
  for (int i = 0; i < n; ++i) {
    double e2;
    if (model.kind == ModelKind::kHomography)
      e2 = homographySampsonSq(model.matrix, a[i], b[i]);
    else {
      const double e = sampsonDistance(pixel_f, a[i], b[i]);
      e2 = e * e;
    }
    score += std::min(e2 / (sigma * sigma), cap);
  }
  score += lambda1 * d * n + lambda2 * kparams;
  return score;
}

// Lowest GRIC wins; ties prefer E, then F, then H.
inline TwoViewModel gricSelect(std::vector<TwoViewModel> models, const std::vector<Vec2>& a,
                               const std::vector<Vec2>& b, const CameraIntrinsics& intr,
                               double sigma = 1.0) {
  if (models.empty()) throw std::invalid_argument("gricSelect: no models");
  auto rank = [](ModelKind k) {
    switch (k) {
      case ModelKind::kEssential: return 0;
      case ModelKind::kFundamental: return 1;
      default: return 2;
    }
  };
  for (auto& m : models) m.gric_score = gricScore(m, a, b, intr, sigma);
  std::sort(models.begin(), models.end(), [&](const TwoViewModel& x, const TwoViewModel& y) {
    if (x.gric_score != y.gric_score) return x.gric_score < y.gric_score;
    return rank(x.kind) < rank(y.kind);
  });
  return models.front();
}

// ---------------------------------------------------------------------------
// EPnP
// ---------------------------------------------------------------------------

struct RegistrationResult {
  Pose pose;
  std::vector<int> inlier_indices;  // into the 2D-3D match list
  double mean_reproj_error = 0;
};

namespace geo_detail {

// Pose from 3D-3D correspondences (no scale): Umeyama/Procrustes.
inline Pose poseFromPoints(const std::vector<Vec3>& world, const std::vector<Vec3>& camera) {
  Vec3 mw = Vec3::Zero(), mc = Vec3::Zero();
  for (size_t i = 0; i < world.size(); ++i) {
    mw += world[i];
    mc += camera[i];
  }
  mw /= double(world.size());
  mc /= double(world.size());
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < world.size(); ++i) h += (camera[i] - mc) * (world[i] - mw).transpose();
  const Mat3 r = nearestRotation(h);
  return {r, mc - r * mw};
}

struct EpnpContext {
  std::vector<Vec3> world;
  std::vector<Vec2> norm;  // normalized image coordinates
  Eigen::Matrix<double, 4, 3> control;  // control points, world frame
  MatX alphas;                          // n x 4 barycentric coordinates
};

inline bool epnpSetup(const std::vector<Vec3>& world, const std::vector<Vec2>& norm,
                      EpnpContext& ctx) {
  const int n = int(world.size());
  ctx.world = world;
  ctx.norm = norm;
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : world) centroid += p;
  centroid /= double(n);
  Mat3 cov = Mat3::Zero();
  for (const auto& p : world) cov += (p - centroid) * (p - centroid).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  // Control points: centroid plus principal axes (descending eigenvalue).
  ctx.control.row(0) = centroid;
  for (int i = 0; i < 3; ++i) {
    double len = std::sqrt(std::max(es.eigenvalues()(2 - i), 0.0) / n);
    if (len < 1e-9) len = 1e-9;  // coplanar/collinear sets keep a tiny extent
    ctx.control.row(i + 1) = (centroid + len * es.eigenvectors().col(2 - i)).transpose();
  }
  // Barycentric coordinates.
  Mat3 basis;
  for (int i = 0; i < 3; ++i)
    basis.col(i) = (ctx.control.row(i + 1) - ctx.control.row(0)).transpose();
  const Eigen::FullPivLU<Mat3> lu(basis);
  if (!lu.isInvertible()) return false;
  ctx.alphas.resize(n, 4);
  for (int i = 0; i < n; ++i) {
    const Vec3 w = lu.solve(world[i] - centroid);
    ctx.alphas(i, 1) = w(0);
    ctx.alphas(i, 2) = w(1);
    ctx.alphas(i, 3) = w(2);
    ctx.alphas(i, 0) = 1.0 - w.sum();
  }
  return true;
}

inline double reprojError(const Pose& pose, const EpnpContext& ctx) {
  double sum = 0;
  for (size_t i = 0; i < ctx.world.size(); ++i) {
    const Vec3 c = pose.toCamera(ctx.world[i]);
    if (c.z() <= 0) return std::numeric_limits<double>::infinity();
    sum += (Vec2(c.x() / c.z(), c.y() / c.z()) - ctx.norm[i]).norm();
  }
  return sum / double(ctx.world.size());
}

inline Pose poseFromBetas(const EpnpContext& ctx, const Eigen::Matrix<double, 12, 4>& vbasis,
                          const Eigen::Vector4d& betas) {
  Eigen::Matrix<double, 12, 1> x = vbasis * betas;
  std::vector<Vec3> cc(4);
  for (int i = 0; i < 4; ++i) cc[i] = x.segment<3>(3 * i);
  // Resolve the global sign with the depth of the first point.
  std::vector<Vec3> cam(ctx.world.size());
  auto computeCam = [&](double sign) {
    for (size_t i = 0; i < ctx.world.size(); ++i) {
      cam[i] = Vec3::Zero();
      for (int j = 0; j < 4; ++j) cam[i] += sign * ctx.alphas(i, j) * cc[j];
    }
  };
  computeCam(1.0);
  double mean_z = 0;
  for (const auto& c : cam) mean_z += c.z();
  if (mean_z < 0) computeCam(-1.0);
  std::vector<Vec3> world_cp;
  for (size_t i = 0; i < ctx.world.size(); ++i) world_cp.push_back(ctx.world[i]);
  return poseFromPoints(world_cp, cam);
}

// Distances between the 6 control-point pairs.
inline Eigen::Matrix<double, 6, 1> controlDistances(const Eigen::Matrix<double, 4, 3>& cp) {
  Eigen::Matrix<double, 6, 1> d;
  int k = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j)
      d(k++) = (cp.row(i) - cp.row(j)).norm();
  return d;
}

}  // namespace geo_detail

// EPnP (control-point barycentric formulation) followed by Gauss-Newton
// refinement on reprojection. Points in world frame, observations in pixels.
inline std::optional<Pose> solveEpnp(const std::vector<Vec3>& world,
                                     const std::vector<Vec2>& pixels,
                                     const CameraIntrinsics& intr) {
  const int n = int(world.size());
  if (n < 4) return std::nullopt;
  geo_detail::EpnpContext ctx;
  std::vector<Vec2> norm(n);
  for (int i = 0; i < n; ++i) norm[i] = intr.normalize(pixels[i]);
  if (!geo_detail::epnpSetup(world, norm, ctx)) return std::nullopt;

  // M x = 0 with x the stacked camera-frame control points.
  MatX m(2 * n, 12);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) {
      const double a = ctx.alphas(i, j);
      m(2 * i, 3 * j) = a;
      m(2 * i, 3 * j + 1) = 0;
      m(2 * i, 3 * j + 2) = -a * ctx.norm[i].x();
      m(2 * i + 1, 3 * j) = 0;
      m(2 * i + 1, 3 * j + 1) = a;
      m(2 * i + 1, 3 * j + 2) = -a * ctx.norm[i].y();
    }
  }
  Eigen::JacobiSVD<MatX> svd(m, Eigen::ComputeFullV);
  Eigen::Matrix<double, 12, 4> vbasis;
  for (int i = 0; i < 4; ++i) vbasis.col(i) = svd.matrixV().col(11 - i);

  const Eigen::Matrix<double, 6, 1> dist_w = geo_detail::controlDistances(ctx.control);

  // Pair distance helpers over the null-space basis.
  auto vDiff = [&](int col, int i, int j) -> Vec3 {
    return vbasis.col(col).segment<3>(3 * i) - vbasis.col(col).segment<3>(3 * j);
  };

  std::vector<Eigen::Vector4d> beta_candidates;

  {  // N = 1: x = b1 v1, b1 from distance ratio.
    double num = 0, den = 0;
    int k = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) {
        const double dv = vDiff(0, i, j).norm();
        num += dv * dist_w(k);
        den += dv * dv;
        ++k;
      }
    if (den > 1e-300) beta_candidates.push_back({num / den, 0, 0, 0});
  }
  {  // N = 2: solve for b11, b12, b22 from the 6 distance equations.
    MatX l(6, 3);
    int k = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) {
        const Vec3 d1 = vDiff(0, i, j), d2 = vDiff(1, i, j);
        l.row(k) << d1.squaredNorm(), 2.0 * d1.dot(d2), d2.squaredNorm();
        ++k;
      }
    const Vec3 sol = l.colPivHouseholderQr().solve(dist_w.array().square().matrix());
    const double b1 = std::sqrt(std::abs(sol(0)));
    const double b2 = std::sqrt(std::abs(sol(2))) * ((sol(1) < 0) != (sol(0) < 0) ? -1.0 : 1.0);
    beta_candidates.push_back({b1, b2, 0, 0});
  }
  {  // N = 3: unknowns b11, b12, b22, b13, b23, b33.
    MatX l(6, 6);
    int k = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) {
        const Vec3 d1 = vDiff(0, i, j), d2 = vDiff(1, i, j), d3 = vDiff(2, i, j);
        l.row(k) << d1.squaredNorm(), 2.0 * d1.dot(d2), d2.squaredNorm(), 2.0 * d1.dot(d3),
            2.0 * d2.dot(d3), d3.squaredNorm();
        ++k;
      }
    const VecX sol = l.colPivHouseholderQr().solve(dist_w.array().square().matrix());
    const double b1 = std::sqrt(std::abs(sol(0)));
    const double b2 = std::sqrt(std::abs(sol(2))) * ((sol(1) < 0) != (sol(0) < 0) ? -1.0 : 1.0);
    const double b3 = std::sqrt(std::abs(sol(5))) * ((sol(3) < 0) != (sol(0) < 0) ? -1.0 : 1.0);
    beta_candidates.push_back({b1, b2, b3, 0});
  }

  // Gauss-Newton on the betas: minimize control-point distance mismatch.
  auto refineBetas = [&](Eigen::Vector4d betas) {
    for (int iter = 0; iter < 10; ++iter) {
      Eigen::Matrix<double, 6, 4> jac;
      Eigen::Matrix<double, 6, 1> res;
      int k = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
          Vec3 diff = Vec3::Zero();
          for (int c = 0; c < 4; ++c) diff += betas(c) * vDiff(c, i, j);
          res(k) = diff.squaredNorm() - dist_w(k) * dist_w(k);
          for (int c = 0; c < 4; ++c) jac(k, c) = 2.0 * diff.dot(vDiff(c, i, j));
          ++k;
        }
      const Eigen::Vector4d delta =
          (jac.transpose() * jac + 1e-12 * Eigen::Matrix4d::Identity())
              .ldlt()
              .solve(-jac.transpose() * res);
      betas += delta;
      if (delta.norm() < 1e-12) break;
    }
    return betas;
  };

  Pose best_pose;
  double best_err = std::numeric_limits<double>::infinity();
  for (auto& betas : beta_candidates) {
    const Eigen::Vector4d refined = refineBetas(betas);
    for (const auto& cand : {betas, refined}) {
      const Pose pose = geo_detail::poseFromBetas(ctx, vbasis, cand);
      const double err = geo_detail::reprojError(pose, ctx);
      if (err < best_err) {
        best_err = err;
        best_pose = pose;
      }
    }
  }
  if (!std::isfinite(best_err)) return std::nullopt;
  return best_pose;
}

// Gauss-Newton pose refinement on pixel reprojection over the given matches.
inline Pose refinePoseGaussNewton(Pose pose, const std::vector<Vec3>& world,
                                  const std::vector<Vec2>& pixels, const CameraIntrinsics& intr,
                                  int max_iters = 20) {
  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (size_t i = 0; i < world.size(); ++i) {
      const Vec3 c = pose.toCamera(world[i]);
      if (c.z() <= 1e-9) continue;
      const double iz = 1.0 / c.z();
      const Vec2 res = intr.project(c) - pixels[i];
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << intr.fx * iz, 0, -intr.fx * c.x() * iz * iz, 0, intr.fy * iz,
          -intr.fy * c.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dcam;  // [d/d(rot increment) | d/dt]
      dcam.block<3, 3>(0, 0) = -skew(c);
      dcam.block<3, 3>(0, 3) = Mat3::Identity();
      const Eigen::Matrix<double, 2, 6> j = dproj * dcam;
      jtj += j.transpose() * j;
      jtr += j.transpose() * res;
    }
    const Eigen::Matrix<double, 6, 1> delta =
        (jtj + 1e-9 * Eigen::Matrix<double, 6, 6>::Identity()).ldlt().solve(-jtr);
    const Mat3 dr = expSo3(delta.head<3>());
    pose.rotation = dr * pose.rotation;
    pose.translation = dr * pose.translation + delta.tail<3>();
    if (delta.norm() < 1e-12) break;
  }
  pose.rotation = nearestRotation(pose.rotation);
  return pose;
}

// RANSAC over EPnP minimal samples with reprojection-error inliers; the final
// pose is Gauss-Newton refined on the inlier set.
inline std::optional<RegistrationResult> registerEpnp(const std::vector<Vec3>& world,
                                                      const std::vector<Vec2>& pixels,
                                                      const CameraIntrinsics& intr,
                                                      const RansacOptions& opt,
                                                      int min_inliers = 12) {
  const int n = int(world.size());
  if (n < 4) return std::nullopt;
  SeededRng rng(opt.seed, "ransac_pnp");

  auto countInliers = [&](const Pose& pose) {
    std::vector<int> inliers;
    for (int i = 0; i < n; ++i) {
      const Vec3 c = pose.toCamera(world[i]);
      if (c.z() <= 0) continue;
      if ((intr.project(c) - pixels[i]).norm() < opt.threshold) inliers.push_back(i);
    }
    return inliers;
  };

  std::optional<Pose> best_pose;
  std::vector<int> best_inliers;
  int iters = opt.max_iters;
  for (int it = 0; it < iters; ++it) {
    const auto sample = geo_detail::sampleIndices(rng, n, 4);
    std::vector<Vec3> sw;
    std::vector<Vec2> sp;
    for (int i : sample) {
      sw.push_back(world[i]);
      sp.push_back(pixels[i]);
    }
    auto pose = solveEpnp(sw, sp, intr);
    if (!pose) continue;
    auto inliers = countInliers(*pose);
    if (inliers.size() > best_inliers.size()) {
      best_inliers = std::move(inliers);
      best_pose = pose;
      iters = std::min(iters, it + 1 + geo_detail::adaptiveIterations(int(best_inliers.size()), n,
                                                                      4, opt.confidence,
                                                                      opt.max_iters));
    }
  }
  if (!best_pose || int(best_inliers.size()) < min_inliers) return std::nullopt;

  // Re-solve EPnP on all inliers, refine, and keep whichever scores best.
  std::vector<Vec3> iw;
  std::vector<Vec2> ip;
  for (int i : best_inliers) {
    iw.push_back(world[i]);
    ip.push_back(pixels[i]);
  }
  Pose pose = *best_pose;
  if (auto all = solveEpnp(iw, ip, intr)) {
    if (countInliers(*all).size() >= best_inliers.size()) pose = *all;
  }
  pose = refinePoseGaussNewton(pose, iw, ip, intr);
  auto final_inliers = countInliers(pose);
  if (int(final_inliers.size()) < min_inliers) return std::nullopt;

  RegistrationResult out;
  out.pose = pose;
  double err = 0;
  for (int i : final_inliers) err += (intr.project(pose.toCamera(world[i])) - pixels[i]).norm();
  out.mean_reproj_error = err / double(final_inliers.size());
  out.inlier_indices = std::move(final_inliers);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view triangulation
// ---------------------------------------------------------------------------

struct TrackObservation {
  Pose pose;
  Vec2 pixel;
};

struct TriangulationResult {
  Vec3 position;
  std::vector<int> support;  // observation indices
  double mean_error = 0;
};

inline double triangulationAngle(const Pose& a, const Pose& b, const Vec3& point) {
  const Vec3 ra = (point - a.center()).normalized();
  const Vec3 rb = (point - b.center()).normalized();
  return std::acos(std::clamp(ra.dot(rb), -1.0, 1.0));
}

// RANSAC over observation pairs, multi-view Gauss-Newton refinement on the
// winning support set.
inline std::optional<TriangulationResult> triangulateTrack(
    const std::vector<TrackObservation>& obs, const CameraIntrinsics& intr,
    double threshold_px = 4.0, double min_angle_deg = 1.5) {
  const int n = int(obs.size());
  if (n < 2) return std::nullopt;
  std::vector<Vec2> norm(n);
  for (int i = 0; i < n; ++i) norm[i] = intr.normalize(obs[i].pixel);

  auto support = [&](const Vec3& x) {
    std::vector<int> s;
    for (int i = 0; i < n; ++i) {
      const Vec3 c = obs[i].pose.toCamera(x);
      if (c.z() <= 0) continue;
      if ((intr.project(c) - obs[i].pixel).norm() < threshold_px) s.push_back(i);
    }
    return s;
  };

  Vec3 best_x = Vec3::Zero();
  std::vector<int> best_support;
  double best_angle = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const Vec3 x = triangulateDlt(obs[i].pose, obs[j].pose, norm[i], norm[j]);
      if (!x.allFinite()) continue;
      const auto s = support(x);
      const double angle = triangulationAngle(obs[i].pose, obs[j].pose, x);
      if (s.size() > best_support.size() ||
          (s.size() == best_support.size() && angle > best_angle)) {
        best_support = s;
        best_x = x;
        best_angle = angle;
      }
    }
  }
  if (best_support.size() < 2) return std::nullopt;

  // Angle gate: the support set must contain one pair with enough parallax.
  double max_angle = 0;
  for (size_t a = 0; a < best_support.size(); ++a)
    for (size_t b = a + 1; b < best_support.size(); ++b)
      max_angle = std::max(max_angle, triangulationAngle(obs[best_support[a]].pose,
                                                         obs[best_support[b]].pose, best_x));
  if (max_angle < min_angle_deg * M_PI / 180.0) return std::nullopt;

  // Multi-view Gauss-Newton on the support set.
  Vec3 x = best_x;
  for (int iter = 0; iter < 20; ++iter) {
    Mat3 jtj = Mat3::Zero();
    Vec3 jtr = Vec3::Zero();
    for (int i : best_support) {
      const Vec3 c = obs[i].pose.toCamera(x);
      if (c.z() <= 1e-12) continue;
      const double iz = 1.0 / c.z();
      const Vec2 res = intr.project(c) - obs[i].pixel;
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << intr.fx * iz, 0, -intr.fx * c.x() * iz * iz, 0, intr.fy * iz,
          -intr.fy * c.y() * iz * iz;
      const Eigen::Matrix<double, 2, 3> j = dproj * obs[i].pose.rotation;
      jtj += j.transpose() * j;
      jtr += j.transpose() * res;
    }
    const Vec3 delta = (jtj + 1e-12 * Mat3::Identity()).ldlt().solve(-jtr);
    x += delta;
    if (delta.norm() < 1e-14) break;
  }
  auto final_support = support(x);
  if (final_support.size() < 2) return std::nullopt;

  TriangulationResult out;
  out.position = x;
  double err = 0;
  for (int i : final_support) err += (intr.project(obs[i].pose.toCamera(x)) - obs[i].pixel).norm();
  out.mean_error = err / double(final_support.size());
  out.support = std::move(final_support);
  return out;
}

// ---------------------------------------------------------------------------
// Initial pair selection
// ---------------------------------------------------------------------------

struct InitialPairCandidate {
  FrameId frame_a = -1, frame_b = -1;
  // Relative pose of b w.r.t. a (unit baseline) and the matched pixels.
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  std::vector<Vec2> pixels_a, pixels_b;
  bool rotation_degenerate = false;
};

struct InitialPairScore {
  int triangulated = 0;
  double median_angle_deg = 0;
};

inline InitialPairScore scoreInitialPair(const InitialPairCandidate& cand,
                                         const CameraIntrinsics& intr, double threshold_px = 4.0) {
  InitialPairScore s;
  const Pose first;
  const Pose second{cand.rotation, cand.translation};
  std::vector<double> angles;
  for (size_t i = 0; i < cand.pixels_a.size(); ++i) {
    const Vec2 na = intr.normalize(cand.pixels_a[i]);
    const Vec2 nb = intr.normalize(cand.pixels_b[i]);
    const Vec3 x = triangulateDlt(first, second, na, nb);
    if (!x.allFinite() || x.z() <= 0 || second.toCamera(x).z() <= 0) continue;
    if ((intr.project(x) - cand.pixels_a[i]).norm() > threshold_px) continue;
    if ((intr.project(second.toCamera(x)) - cand.pixels_b[i]).norm() > threshold_px) continue;
    angles.push_back(triangulationAngle(first, second, x) * 180.0 / M_PI);
  }
  s.triangulated = int(angles.size());
  if (!angles.empty()) {
    std::nth_element(angles.begin(), angles.begin() + angles.size() / 2, angles.end());
    s.median_angle_deg = angles[angles.size() / 2];
  }
  return s;
}

// Most triangulated points among pairs whose median triangulation angle falls
// in [60, 120] degrees; relaxed to [20, 160] when none qualify.
inline std::optional<std::pair<FrameId, FrameId>> selectInitialPair(
    const std::vector<InitialPairCandidate>& candidates, const CameraIntrinsics& intr,
    double threshold_px = 4.0) {
  struct Scored {
    const InitialPairCandidate* cand;
    InitialPairScore score;
  };
  std::vector<Scored> scored;
  for (const auto& c : candidates) {
    if (c.rotation_degenerate) continue;
    scored.push_back({&c, scoreInitialPair(c, intr, threshold_px)});
  }
  auto pick = [&](double lo, double hi) -> std::optional<std::pair<FrameId, FrameId>> {
    const Scored* best = nullptr;
    for (const auto& s : scored) {
      if (s.score.triangulated < 2) continue;
      if (s.score.median_angle_deg < lo || s.score.median_angle_deg > hi) continue;
      if (!best || s.score.triangulated > best->score.triangulated ||
          (s.score.triangulated == best->score.triangulated &&
           std::abs(s.score.median_angle_deg - 90.0) <
               std::abs(best->score.median_angle_deg - 90.0))) {
        best = &s;
      }
    }
    if (!best) return std::nullopt;
    return std::pair{best->cand->frame_a, best->cand->frame_b};
  };
  if (auto strict = pick(60.0, 120.0)) return strict;
  return pick(20.0, 160.0);
}

}  // namespace otf
