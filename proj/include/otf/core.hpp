#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace otf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

using FrameId = int64_t;
using PointId = int64_t;

struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;
  double radial_k1 = 0, radial_k2 = 0;

  void validate() const {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("intrinsics: focal lengths must be positive");
    if (cx <= 0 || cx >= width || cy <= 0 || cy >= height)
      throw std::invalid_argument("intrinsics: principal point outside image");
  }

  Mat3 K() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  Vec2 project(const Vec3& cam_point) const {
    return {fx * cam_point.x() / cam_point.z() + cx, fy * cam_point.y() / cam_point.z() + cy};
  }

  // Pixel -> normalized image coordinates (undistorted input assumed).
  Vec2 normalize(const Vec2& px) const { return {(px.x() - cx) / fx, (px.y() - cy) / fy}; }

  // Apply radial distortion to a normalized point and return pixels.
  Vec2 distortToPixels(const Vec2& norm) const {
    const double r2 = norm.squaredNorm();
    const double f = 1.0 + radial_k1 * r2 + radial_k2 * r2 * r2;
    return {fx * f * norm.x() + cx, fy * f * norm.y() + cy};
  }

  // Invert the radial model by fixed-point iteration (keypoint undistortion).
  Vec2 undistortPixel(const Vec2& px) const {
    if (radial_k1 == 0 && radial_k2 == 0) return px;
    const Vec2 distorted{(px.x() - cx) / fx, (px.y() - cy) / fy};
    Vec2 n = distorted;
    for (int it = 0; it < 20; ++it) {
      const double r2 = n.squaredNorm();
      const double f = 1.0 + radial_k1 * r2 + radial_k2 * r2 * r2;
      n = distorted / f;
    }
    return {fx * n.x() + cx, fy * n.y() + cy};
  }
};

// Rigid world->camera transform.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 toCamera(const Vec3& world) const { return rotation * world + translation; }
  Vec3 center() const { return -rotation.transpose() * translation; }

  Pose inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }

  // this ∘ other (apply other first).
  Pose compose(const Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  bool isValidRotation(double tol = 1e-9) const {
    return std::abs(rotation.determinant() - 1.0) < tol &&
           (rotation.transpose() * rotation - Mat3::Identity()).norm() < tol * 10;
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rodrigues exponential map.
inline Mat3 expSo3(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(w);
  const Vec3 axis = w / theta;
  const Mat3 k = skew(axis);
  return Mat3::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
}

inline Vec3 logSo3(const Mat3& r) {
  const double cos_theta = std::max(-1.0, std::min(1.0, (r.trace() - 1.0) / 2.0));
  const double theta = std::acos(cos_theta);
  if (theta < 1e-12) return {0.5 * (r(2, 1) - r(1, 2)), 0.5 * (r(0, 2) - r(2, 0)), 0.5 * (r(1, 0) - r(0, 1))};
  if (theta > M_PI - 1e-6) {
    // Near pi: recover the axis from R + I.
    Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (r + r.transpose()));
    Vec3 axis = es.eigenvectors().col(2);
    Vec3 candidate = theta * axis;
    if ((expSo3(candidate) - r).norm() > (expSo3(-candidate) - r).norm()) candidate = -candidate;
    return candidate;
  }
  const double s = theta / (2.0 * std::sin(theta));
  return {s * (r(2, 1) - r(1, 2)), s * (r(0, 2) - r(2, 0)), s * (r(1, 0) - r(0, 1))};
}

// Angle between two rotations, radians.
inline double rotationAngle(const Mat3& a, const Mat3& b) {
  return logSo3(a * b.transpose()).norm();
}

// Project nearest rotation (polar decomposition via SVD).
inline Mat3 nearestRotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Mat3 d = Mat3::Identity();
    d(2, 2) = -1;
    r = svd.matrixU() * d * svd.matrixV().transpose();
  }
  return r;
}

struct Keypoint {
  double x = 0, y = 0;
  double scale = 1.0;
  double orientation = 0.0;
  std::vector<float> descriptor;  // unit L2 norm
};

inline double descriptorDistanceSq(const std::vector<float>& a, const std::vector<float>& b) {
  // Descriptors of different length (e.g. the empty descriptor of a
  // densification-appended keypoint) can never match.
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double diff = double(a[i]) - b[i];
    d += diff * diff;
  }
  return d;
}

}  // namespace otf
