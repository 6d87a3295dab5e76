#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "otf/ba.hpp"
#include "otf/core.hpp"
#include "otf/descriptor.hpp"
#include "otf/features.hpp"
#include "otf/geometry.hpp"
#include "otf/image.hpp"
#include "otf/rng.hpp"
#include "otf/scene.hpp"

namespace otf {

enum class CameraPath { kRing, kArc, kRandomWalk };

struct SceneSpec {
  int num_cameras = 10;
  int num_points = 500;
  CameraPath path = CameraPath::kRing;
  bool planar = false;
  int num_facets = 8;          // general mode surface pieces
  double obs_noise_px = 0.0;   // Gaussian noise on ground-truth projections
  double ring_radius = 6.0;
  double scene_extent = 2.5;
  int width = 640, height = 480;
  double focal = 500.0;
  int min_visible = 20;
};

// A bounded planar facet with its own texture-friendly frame.
struct SurfaceFacet {
  Vec3 center = Vec3::Zero();
  Vec3 axis_u = Vec3::UnitX(), axis_v = Vec3::UnitY();
  Vec3 normal = Vec3::UnitZ();
  double extent_u = 1.0, extent_v = 1.0;
};

// Deterministic ground-truth scene: plane-set surface, procedural 3D texture,
// cameras on a configurable path. Renders are consistent with the geometry by
// construction.
class SyntheticScene {
 public:
  SceneSpec spec;
  uint64_t seed = 0;
  CameraIntrinsics intrinsics;
  std::vector<SurfaceFacet> facets;
  std::vector<Vec3> gt_points;
  std::vector<int> gt_point_facet;
  std::vector<Pose> gt_poses;

  static SyntheticScene generate(const SceneSpec& spec, uint64_t seed) {
    if (spec.num_cameras <= 0) throw std::invalid_argument("generate: zero cameras");
    if (spec.num_points <= 0) throw std::invalid_argument("generate: zero points");
    SyntheticScene s;
    s.spec = spec;
    s.seed = seed;
    s.intrinsics.fx = s.intrinsics.fy = spec.focal;
    s.intrinsics.cx = spec.width / 2.0;
    s.intrinsics.cy = spec.height / 2.0;
    s.intrinsics.width = spec.width;
    s.intrinsics.height = spec.height;

    SeededRng rng(seed, "scene-gen");

    // Surface.
    if (spec.planar) {
      SurfaceFacet f;
      f.center = Vec3::Zero();
      f.axis_u = Vec3::UnitX();
      f.axis_v = Vec3::UnitY();
      f.normal = Vec3::UnitZ();
      f.extent_u = f.extent_v = spec.scene_extent * 2.0;
      s.facets.push_back(f);
    } else {
      for (int i = 0; i < spec.num_facets; ++i) {
        SurfaceFacet f;
        f.center = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)) *
                   spec.scene_extent * 0.7;
        // Mildly tilted so every facet faces the ring from above.
        const Vec3 tilt(rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35), 1.0);
        f.normal = tilt.normalized();
        f.axis_u = f.normal.unitOrthogonal();
        f.axis_v = f.normal.cross(f.axis_u);
        f.extent_u = spec.scene_extent * rng.uniform(0.5, 1.0);
        f.extent_v = spec.scene_extent * rng.uniform(0.5, 1.0);
        s.facets.push_back(f);
      }
    }

    // Cameras look at the scene center from above the surface.
    for (int i = 0; i < spec.num_cameras; ++i) {
      double angle;
      switch (spec.path) {
        case CameraPath::kRing: angle = 2.0 * M_PI * i / spec.num_cameras; break;
        case CameraPath::kArc: angle = M_PI * i / std::max(1, spec.num_cameras - 1); break;
        case CameraPath::kRandomWalk:
        default: angle = 2.0 * M_PI * i / spec.num_cameras + rng.uniform(-0.1, 0.1); break;
      }
      Vec3 center(spec.ring_radius * std::cos(angle), spec.ring_radius * std::sin(angle),
                  spec.ring_radius * 0.9);
      if (spec.path == CameraPath::kRandomWalk)
        center += Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.2;
      const Vec3 target(0, 0, 0);
      const Vec3 forward = (target - center).normalized();
      Vec3 up(0, 0, 1);
      Vec3 right = forward.cross(up).normalized();
      up = right.cross(forward);
      Mat3 r;  // world -> camera: rows are camera axes
      r.row(0) = right.transpose();
      r.row(1) = -up.transpose();
      r.row(2) = forward.transpose();
      s.gt_poses.push_back({r, -r * center});
    }

    // Points sampled on facets; keep those visible from at least two cameras.
    int attempts = 0;
    while (int(s.gt_points.size()) < spec.num_points && attempts < spec.num_points * 50) {
      ++attempts;
      const int fi = rng.uniformInt(0, int(s.facets.size()) - 1);
      const SurfaceFacet& f = s.facets[fi];
      const Vec3 p = f.center + rng.uniform(-f.extent_u, f.extent_u) * f.axis_u +
                     rng.uniform(-f.extent_v, f.extent_v) * f.axis_v;
      int vis = 0;
      for (size_t c = 0; c < s.gt_poses.size() && vis < 2; ++c)
        if (s.isVisible(int(c), p)) ++vis;
      if (vis >= 2) {
        s.gt_points.push_back(p);
        s.gt_point_facet.push_back(fi);
      }
    }
    return s;
  }

  // First surface hit along the ray from `origin` through direction `dir`.
  std::optional<std::pair<Vec3, int>> raycast(const Vec3& origin, const Vec3& dir) const {
    double best_t = std::numeric_limits<double>::infinity();
    int best_f = -1;
    for (size_t i = 0; i < facets.size(); ++i) {
      const SurfaceFacet& f = facets[i];
      const double denom = dir.dot(f.normal);
      if (std::abs(denom) < 1e-12) continue;
      const double t = (f.center - origin).dot(f.normal) / denom;
      if (t <= 1e-6 || t >= best_t) continue;
      const Vec3 p = origin + t * dir;
      const Vec3 local = p - f.center;
      if (std::abs(local.dot(f.axis_u)) > f.extent_u || std::abs(local.dot(f.axis_v)) > f.extent_v)
        continue;
      best_t = t;
      best_f = int(i);
    }
    if (best_f < 0) return std::nullopt;
    return std::pair{origin + best_t * dir, best_f};
  }

  // Multi-octave 3D value noise plus a checker component, in [0, 255].
  double textureAt(const Vec3& p) const {
    double value = 0, amp = 0.55, freq = 2.0;
    for (int o = 0; o < 4; ++o) {
      value += amp * valueNoise(p * freq);
      amp *= 0.5;
      freq *= 2.1;
    }
    const int checker = (int(std::floor(p.x() * 2.5)) + int(std::floor(p.y() * 2.5)) +
                         int(std::floor(p.z() * 2.5))) & 1;
    value = 0.65 * value + 0.35 * (checker ? 0.85 : 0.15);
    return std::clamp(value, 0.0, 1.0) * 255.0;
  }

  bool isVisible(int cam, const Vec3& point, double margin = 8.0) const {
    const Pose& pose = gt_poses[cam];
    const Vec3 c = pose.toCamera(point);
    if (c.z() <= 0.1) return false;
    const Vec2 px = intrinsics.project(c);
    if (!(px.x() >= margin && px.y() >= margin && px.x() <= spec.width - 1 - margin &&
          px.y() <= spec.height - 1 - margin))
      return false;
    // Occlusion: the surface hit along this pixel's ray must be the point.
    const Vec3 origin = pose.center();
    const Vec3 dir = (point - origin).normalized();
    const auto hit = raycast(origin, dir);
    if (!hit) return false;
    return (hit->first - point).norm() < 1e-6 * std::max(1.0, point.norm()) + 1e-4;
  }

  Vec2 projectGt(int cam, int point) const {
    return intrinsics.project(gt_poses[cam].toCamera(gt_points[point]));
  }

  ImageU8 render(int cam) const {
    const Pose& pose = gt_poses[cam];
    const Vec3 origin = pose.center();
    const Mat3 r_wc = pose.rotation.transpose();  // camera -> world
    ImageU8 img(spec.width, spec.height, 110);
    // 2x2 supersampling keeps checker edges and the high noise octaves from
    // aliasing differently between nearby views.
    static constexpr double kSub[2] = {-0.25, 0.25};
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        double accum = 0;
        int hits = 0;
        for (double sy : kSub) {
          for (double sx : kSub) {
            const Vec3 dir_cam((x + sx - intrinsics.cx) / intrinsics.fx,
                               (y + sy - intrinsics.cy) / intrinsics.fy, 1.0);
            const Vec3 dir = (r_wc * dir_cam).normalized();
            const auto hit = raycast(origin, dir);
            if (hit) {
              accum += textureAt(hit->first);
              ++hits;
            }
          }
        }
        if (hits == 4) img.at(x, y) = uint8_t(std::lround(accum / 4.0));
      }
    }
    return img;
  }

 private:
  double valueNoise(const Vec3& p) const {
    const int xi = int(std::floor(p.x())), yi = int(std::floor(p.y())), zi = int(std::floor(p.z()));
    const double fx = p.x() - xi, fy = p.y() - yi, fz = p.z() - zi;
    auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double u = fade(fx), v = fade(fy), w = fade(fz);
    double corner[2][2][2];
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) corner[dx][dy][dz] = lattice(xi + dx, yi + dy, zi + dz);
    auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
    const double x00 = lerp(corner[0][0][0], corner[1][0][0], u);
    const double x10 = lerp(corner[0][1][0], corner[1][1][0], u);
    const double x01 = lerp(corner[0][0][1], corner[1][0][1], u);
    const double x11 = lerp(corner[0][1][1], corner[1][1][1], u);
    return lerp(lerp(x00, x10, v), lerp(x01, x11, v), w);
  }

  double lattice(int x, int y, int z) const {
    uint64_t h = seed * 0x9e3779b97f4a7c15ull;
    h ^= uint64_t(uint32_t(x)) * 0x85ebca6bull;
    h ^= uint64_t(uint32_t(y)) * 0xc2b2ae35ull;
    h ^= uint64_t(uint32_t(z)) * 0x27d4eb2full;
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return double(h & 0xffffffffull) / double(0xffffffffull);
  }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double mre = 0;               // pixels
  double mtl = 0;               // mean track length
  double rotation_discrepancy = 0;  // degrees, after similarity alignment
  double alignment_rmse = 0;    // camera-center residual after alignment
  int n_registered = 0;
};

// Similarity (Procrustes) alignment of estimated camera centers to ground
// truth, then per-frame rotation discrepancy. Gauge invariant.
inline EvalReport evaluate(const SceneGraph& result, const SyntheticScene& gt,
                           const CameraIntrinsics& intr) {
  std::vector<std::pair<int, const FrameRecord*>> matched;
  for (const auto& [id, fr] : result.frames()) {
    if (fr.state != FrameState::kRegistered) continue;
    if (id < 0 || id >= FrameId(gt.gt_poses.size())) continue;
    matched.emplace_back(int(id), &fr);
  }
  if (matched.size() < 3) throw std::runtime_error("evaluate: need >= 3 registered frames");

  MatX src(3, matched.size()), dst(3, matched.size());
  for (size_t i = 0; i < matched.size(); ++i) {
    src.col(i) = matched[i].second->pose.center();
    dst.col(i) = gt.gt_poses[matched[i].first].center();
  }
  const Eigen::Matrix4d t = Eigen::umeyama(src, dst, true);
  const Mat3 sr = t.block<3, 3>(0, 0);
  const double scale = std::cbrt(sr.determinant());
  const Mat3 r_align = sr / scale;  // est world -> gt world

  EvalReport rep;
  rep.n_registered = int(matched.size());
  double rot_sum = 0, center_sq = 0;
  for (size_t i = 0; i < matched.size(); ++i) {
    const Vec3 aligned = sr * src.col(i) + t.block<3, 1>(0, 3);
    center_sq += (aligned - dst.col(i)).squaredNorm();
    // World->camera rotation in the gt frame.
    const Mat3 r_est_gtworld = matched[i].second->pose.rotation * r_align.transpose();
    rot_sum += rotationAngle(r_est_gtworld, gt.gt_poses[matched[i].first].rotation);
  }
  rep.alignment_rmse = std::sqrt(center_sq / double(matched.size()));
  rep.rotation_discrepancy = rot_sum / double(matched.size()) * 180.0 / M_PI;
  rep.mre = result.meanReprojectionError(intr);
  rep.mtl = result.meanTrackLength();
  return rep;
}

// ---------------------------------------------------------------------------
// Stream material generation (images + sidecar descriptors/features)
// ---------------------------------------------------------------------------

struct StreamOptions {
  double keypoint_noise_px = 0.3;
  double descriptor_noise = 0.03;
  int distractor_keypoints = 0;       // extra random keypoints per frame
  double keypoint_dropout = 0.0;      // fraction of keypoints removed
  bool dropout_alternating = false;   // apply dropout only on odd frames
};

// Each 3D point gets a stable random unit descriptor; observations see it with
// small noise, which makes sidecar matching behave like a strong detector.
inline std::vector<std::vector<float>> pointDescriptors(const SyntheticScene& scene,
                                                        uint64_t seed) {
  SeededRng rng(seed, "point-desc");
  std::vector<std::vector<float>> out(scene.gt_points.size());
  for (auto& d : out) {
    d.resize(128);
    double norm = 0;
    for (auto& v : d) {
      v = float(rng.normal());
      norm += double(v) * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : d) v = float(v / norm);
  }
  return out;
}

struct FrameMaterial {
  ImageU8 image;
  std::vector<Keypoint> keypoints;
  std::vector<int> gt_point_of_keypoint;  // -1 for distractors
};

inline FrameMaterial makeFrameMaterial(const SyntheticScene& scene, int cam,
                                       const std::vector<std::vector<float>>& point_descs,
                                       const StreamOptions& opt, uint64_t seed) {
  FrameMaterial m;
  m.image = scene.render(cam);
  SeededRng rng(seed, "frame-material-" + std::to_string(cam));
  const bool dropout_active =
      opt.keypoint_dropout > 0 && (!opt.dropout_alternating || (cam % 2 == 1));
  for (size_t pi = 0; pi < scene.gt_points.size(); ++pi) {
    if (!scene.isVisible(cam, scene.gt_points[pi], 12.0)) continue;
    if (dropout_active && rng.uniform() < opt.keypoint_dropout) continue;
    const Vec2 px = scene.projectGt(cam, int(pi));
    Keypoint kp;
    kp.x = px.x() + opt.keypoint_noise_px * rng.normal();
    kp.y = px.y() + opt.keypoint_noise_px * rng.normal();
    kp.scale = 1.0;
    kp.orientation = 0.0;
    kp.descriptor = point_descs[pi];
    double norm = 0;
    for (auto& v : kp.descriptor) {
      v += float(opt.descriptor_noise * rng.normal());
      norm += double(v) * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : kp.descriptor) v = float(v / norm);
    m.keypoints.push_back(std::move(kp));
    m.gt_point_of_keypoint.push_back(int(pi));
  }
  for (int i = 0; i < opt.distractor_keypoints; ++i) {
    Keypoint kp;
    kp.x = rng.uniform(12.0, scene.spec.width - 12.0);
    kp.y = rng.uniform(12.0, scene.spec.height - 12.0);
    kp.scale = 1.0;
    kp.descriptor.resize(128);
    double norm = 0;
    for (auto& v : kp.descriptor) {
      v = float(rng.normal());
      norm += double(v) * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : kp.descriptor) v = float(v / norm);
    m.keypoints.push_back(std::move(kp));
    m.gt_point_of_keypoint.push_back(-1);
  }
  return m;
}

// Write a replayable stream directory: zero-padded PGMs plus .feat/.gdesc
// sidecars. Returns the image paths in stream order.
inline std::vector<std::string> writeStreamDirectory(const SyntheticScene& scene,
                                                     const std::string& dir,
                                                     const StreamOptions& opt, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto point_descs = pointDescriptors(scene, seed);
  std::vector<std::string> paths;
  for (int cam = 0; cam < scene.spec.num_cameras; ++cam) {
    char name[64];
    std::snprintf(name, sizeof(name), "frame_%05d.pgm", cam);
    const std::string path = dir + "/" + name;
    const FrameMaterial m = makeFrameMaterial(scene, cam, point_descs, opt, seed);
    writePgm(m.image, path);
    saveSidecarFeatures(path, m.keypoints);
    const auto gdesc = extractGlobalDescriptor(m.image);
    std::vector<double> gd(gdesc.begin(), gdesc.end());
    saveSidecarDescriptor(path, gd);
    paths.push_back(path);
  }
  return paths;
}

}  // namespace otf
