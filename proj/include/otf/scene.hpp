#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "otf/core.hpp"
#include "otf/image.hpp"

namespace otf {

enum class FrameState { kPending, kRegistered, kRejected };

struct FrameRecord {
  FrameId frame_id = -1;
  ImageU8 pixels;
  std::vector<Keypoint> keypoints;
  std::vector<float> global_descriptor;
  FrameState state = FrameState::kPending;
  Pose pose;  // meaningful iff state == kRegistered
  std::string name;
  int64_t rejected_at = -1;  // registered-frame count at rejection time
};

struct Observation {
  FrameId frame_id;
  int keypoint_index;
};

struct Point3D {
  Vec3 position = Vec3::Zero();
  std::vector<Observation> track;
  std::optional<uint8_t> color;
  double error = 0;  // last mean reprojection error, pixels
};

struct SceneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All reconstruction state. Single writer; readers see only committed
// registrations.
class SceneGraph {
 public:
  using MatchEdgeKey = std::pair<FrameId, FrameId>;

  FrameId addFrame(ImageU8 pixels, const CameraIntrinsics& intrinsics, std::string name = "") {
    if (pixels.empty()) throw SceneError("addFrame: empty raster");
    if (pixels.width() != intrinsics.width || pixels.height() != intrinsics.height)
      throw SceneError("addFrame: raster size does not match intrinsics");
    FrameRecord rec;
    rec.frame_id = next_frame_id_++;
    rec.pixels = std::move(pixels);
    rec.name = std::move(name);
    frames_.emplace(rec.frame_id, std::move(rec));
    return next_frame_id_ - 1;
  }

  FrameRecord& frame(FrameId id) {
    auto it = frames_.find(id);
    if (it == frames_.end()) throw SceneError("unknown frame " + std::to_string(id));
    return it->second;
  }
  const FrameRecord& frame(FrameId id) const {
    auto it = frames_.find(id);
    if (it == frames_.end()) throw SceneError("unknown frame " + std::to_string(id));
    return it->second;
  }
  bool hasFrame(FrameId id) const { return frames_.count(id) > 0; }

  const std::map<FrameId, FrameRecord>& frames() const { return frames_; }
  const std::map<PointId, Point3D>& points() const { return points_; }
  Point3D& point(PointId id) {
    auto it = points_.find(id);
    if (it == points_.end()) throw SceneError("unknown point " + std::to_string(id));
    return it->second;
  }

  size_t numRegistered() const { return registered_order_.size(); }
  const std::vector<FrameId>& registeredFrames() const { return registered_order_; }

  std::optional<PointId> observedPoint(FrameId f, int keypoint_index) const {
    auto it = observation_index_.find({f, keypoint_index});
    if (it == observation_index_.end()) return std::nullopt;
    return it->second;
  }

  void setMatchEdge(FrameId a, FrameId b, std::vector<std::pair<int, int>> pairs) {
    if (a == b) throw SceneError("match edge needs two distinct frames");
    if (a > b) {
      std::swap(a, b);
      for (auto& p : pairs) std::swap(p.first, p.second);
    }
    match_edges_[{a, b}] = std::move(pairs);
  }

  const std::map<MatchEdgeKey, std::vector<std::pair<int, int>>>& matchEdges() const {
    return match_edges_;
  }

  struct NewObservation {
    PointId point_id;
    int keypoint_index;
  };

  // Atomic registration commit: the frame flips to registered, new points are
  // inserted, and the observation index is extended, or nothing changes.
  void commitRegistration(FrameId id, const Pose& pose,
                          const std::vector<Point3D>& new_points,
                          const std::vector<NewObservation>& observations) {
    FrameRecord& rec = frame(id);
    if (rec.state == FrameState::kRegistered) throw SceneError("frame already registered");

    // Validate before mutating anything.
    std::set<int> seen_kps;
    for (const auto& obs : observations) {
      if (!points_.count(obs.point_id)) throw SceneError("observation references unknown point");
      if (obs.keypoint_index < 0 || obs.keypoint_index >= int(rec.keypoints.size()))
        throw SceneError("observation references invalid keypoint");
      if (!seen_kps.insert(obs.keypoint_index).second)
        throw SceneError("duplicate observation for keypoint " + std::to_string(obs.keypoint_index));
      if (observation_index_.count({id, obs.keypoint_index}))
        throw SceneError("keypoint already observes a point");
    }
    for (const auto& pt : new_points) {
      if (pt.track.size() < 2) throw SceneError("new point track shorter than 2");
      std::set<FrameId> track_frames;
      for (const auto& t : pt.track) {
        if (!track_frames.insert(t.frame_id).second)
          throw SceneError("frame appears twice in one track");
        const bool is_self = t.frame_id == id;
        if (!is_self) {
          const FrameRecord& fr = frame(t.frame_id);
          if (fr.state != FrameState::kRegistered)
            throw SceneError("track references unregistered frame");
        }
        const FrameRecord& fr = frame(t.frame_id);
        if (t.keypoint_index < 0 || t.keypoint_index >= int(fr.keypoints.size()))
          throw SceneError("track references invalid keypoint");
        if (observation_index_.count({t.frame_id, t.keypoint_index}))
          throw SceneError("track keypoint already observes a point");
        if (t.frame_id == id && !seen_kps.insert(t.keypoint_index).second)
          throw SceneError("duplicate observation for keypoint " + std::to_string(t.keypoint_index));
      }
    }

    // Commit.
    rec.state = FrameState::kRegistered;
    rec.pose = pose;
    registered_order_.push_back(id);
    for (const auto& obs : observations) {
      observation_index_[{id, obs.keypoint_index}] = obs.point_id;
      points_[obs.point_id].track.push_back({id, obs.keypoint_index});
    }
    for (const auto& pt : new_points) {
      const PointId pid = next_point_id_++;
      points_[pid] = pt;
      for (const auto& t : pt.track) observation_index_[{t.frame_id, t.keypoint_index}] = pid;
    }
  }

  void markRejected(FrameId id) {
    FrameRecord& rec = frame(id);
    if (rec.state == FrameState::kRegistered) throw SceneError("cannot reject a registered frame");
    rec.state = FrameState::kRejected;
    rec.rejected_at = int64_t(registered_order_.size());
  }

  // Points created outside commitRegistration (e.g. post-BA merges) are not
  // needed; triangulated tracks of an uncommitted frame go through commit.

  // Registered frames sharing >=1 point with `id`, sorted by shared count
  // descending, ties by lower frame id.
  std::vector<std::pair<FrameId, int>> covisibleFrames(FrameId id) const {
    const FrameRecord& rec = frame(id);
    if (rec.state != FrameState::kRegistered) throw SceneError("covisibleFrames: frame not registered");
    std::map<FrameId, int> counts;
    for (const auto& [key, pid] : observation_index_) {
      if (key.first != id) continue;
      const Point3D& pt = points_.at(pid);
      for (const auto& t : pt.track)
        if (t.frame_id != id) counts[t.frame_id]++;
    }
    std::vector<std::pair<FrameId, int>> out(counts.begin(), counts.end());
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    return out;
  }

  // Mutable access for BA commits (single writer).
  void updatePose(FrameId id, const Pose& pose) {
    FrameRecord& rec = frame(id);
    if (rec.state != FrameState::kRegistered) throw SceneError("updatePose: frame not registered");
    rec.pose = pose;
  }
  void updatePoint(PointId id, const Vec3& position, double error) {
    Point3D& pt = point(id);
    pt.position = position;
    pt.error = error;
  }

  void removePoint(PointId id) {
    auto it = points_.find(id);
    if (it == points_.end()) return;
    for (const auto& t : it->second.track) observation_index_.erase({t.frame_id, t.keypoint_index});
    points_.erase(it);
  }

  double meanReprojectionError(const CameraIntrinsics& intr) const {
    double sum = 0;
    size_t n = 0;
    for (const auto& [pid, pt] : points_) {
      for (const auto& t : pt.track) {
        const FrameRecord& fr = frame(t.frame_id);
        const Vec3 cam = fr.pose.toCamera(pt.position);
        if (cam.z() <= 0) continue;
        const Vec2 proj = intr.project(cam);
        const Keypoint& kp = fr.keypoints[t.keypoint_index];
        sum += (proj - Vec2(kp.x, kp.y)).norm();
        ++n;
      }
    }
    return n ? sum / double(n) : 0.0;
  }

  double meanTrackLength() const {
    if (points_.empty()) return 0;
    size_t total = 0;
    for (const auto& [pid, pt] : points_) total += pt.track.size();
    return double(total) / double(points_.size());
  }

  // Full-scan consistency check: every track entry round-trips through the
  // observation index and vice versa.
  bool checkBidirectionalConsistency() const {
    size_t track_entries = 0;
    for (const auto& [pid, pt] : points_) {
      for (const auto& t : pt.track) {
        auto it = observation_index_.find({t.frame_id, t.keypoint_index});
        if (it == observation_index_.end() || it->second != pid) return false;
        ++track_entries;
      }
    }
    return track_entries == observation_index_.size();
  }

  // --- exports ---

  void exportPly(const std::string& path) const {
    std::ostringstream body;
    for (const auto& [pid, pt] : points_) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %d\n", pt.position.x(), pt.position.y(),
                    pt.position.z(), int(pt.color.value_or(128)));
      body << buf;
    }
    std::ostringstream out;
    out << "ply\nformat ascii 1.0\nelement vertex " << points_.size()
        << "\nproperty float x\nproperty float y\nproperty float z\nproperty uchar gray\nend_header\n"
        << body.str();
    atomicWrite(path, out.str());
  }

  void exportPoses(const std::string& path) const {
    std::ostringstream out;
    for (const auto& [id, fr] : frames_) {
      if (fr.state != FrameState::kRegistered) continue;
      Eigen::Quaterniond q(fr.pose.rotation);
      if (q.w() < 0) q.coeffs() = -q.coeffs();
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%lld %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n",
                    (long long)id, q.w(), q.x(), q.y(), q.z(), fr.pose.translation.x(),
                    fr.pose.translation.y(), fr.pose.translation.z());
      out << buf;
    }
    atomicWrite(path, out.str());
  }

  void exportStatsCsv(const std::string& path, const CameraIntrinsics& intr) const {
    std::ostringstream out;
    out << "frame_id,n_points,mre,mtl\n";
    for (const auto& [id, fr] : frames_) {
      if (fr.state != FrameState::kRegistered) continue;
      size_t n_points = 0;
      double err_sum = 0;
      size_t err_n = 0;
      for (const auto& [key, pid] : observation_index_) {
        if (key.first != id) continue;
        ++n_points;
        const Point3D& pt = points_.at(pid);
        const Vec3 cam = fr.pose.toCamera(pt.position);
        if (cam.z() <= 0) continue;
        const Keypoint& kp = fr.keypoints[key.second];
        err_sum += (intr.project(cam) - Vec2(kp.x, kp.y)).norm();
        ++err_n;
      }
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%lld,%zu,%.6f,%.6f\n", (long long)id, n_points,
                    err_n ? err_sum / double(err_n) : 0.0, meanTrackLength());
      out << buf;
    }
    atomicWrite(path, out.str());
  }

  // Binary snapshot of poses, keypoint positions, points and tracks; rasters
  // and descriptors are omitted (a loaded snapshot supports export and
  // statistics, not further matching).
  void saveSnapshot(const std::string& path, const CameraIntrinsics& intr) const {
    std::ostringstream out(std::ios::binary);
    auto w = [&](const void* p, size_t n) { out.write(static_cast<const char*>(p), n); };
    auto w64 = [&](int64_t v) { w(&v, 8); };
    auto wd = [&](double v) { w(&v, 8); };
    auto w32 = [&](uint32_t v) { w(&v, 4); };
    out.write("OTFS", 4);
    w32(1);
    wd(intr.fx); wd(intr.fy); wd(intr.cx); wd(intr.cy);
    w32(uint32_t(intr.width)); w32(uint32_t(intr.height));
    wd(intr.radial_k1); wd(intr.radial_k2);
    w64(int64_t(frames_.size()));
    for (const auto& [id, fr] : frames_) {
      w64(id);
      const uint8_t state = uint8_t(fr.state);
      w(&state, 1);
      w64(fr.rejected_at);
      w32(uint32_t(fr.name.size()));
      w(fr.name.data(), fr.name.size());
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) wd(fr.pose.rotation(r, c));
      for (int r = 0; r < 3; ++r) wd(fr.pose.translation(r));
      w32(uint32_t(fr.keypoints.size()));
      for (const auto& kp : fr.keypoints) {
        wd(kp.x); wd(kp.y); wd(kp.scale); wd(kp.orientation);
      }
    }
    w64(int64_t(points_.size()));
    for (const auto& [pid, pt] : points_) {
      w64(pid);
      for (int r = 0; r < 3; ++r) wd(pt.position(r));
      const uint8_t has_color = pt.color ? 1 : 0;
      w(&has_color, 1);
      const uint8_t color = pt.color.value_or(0);
      w(&color, 1);
      wd(pt.error);
      w32(uint32_t(pt.track.size()));
      for (const auto& t : pt.track) {
        w64(t.frame_id);
        w32(uint32_t(t.keypoint_index));
      }
    }
    w64(int64_t(registered_order_.size()));
    for (FrameId f : registered_order_) w64(f);
    w64(next_frame_id_);
    w64(next_point_id_);
    atomicWrite(path, out.str());
  }

  static std::pair<SceneGraph, CameraIntrinsics> loadSnapshot(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SceneError("cannot open snapshot " + path);
    auto r = [&](void* p, size_t n) {
      in.read(static_cast<char*>(p), std::streamsize(n));
      if (!in) throw SceneError("truncated snapshot " + path);
    };
    auto r64 = [&]() { int64_t v; r(&v, 8); return v; };
    auto rd = [&]() { double v; r(&v, 8); return v; };
    auto r32 = [&]() { uint32_t v; r(&v, 4); return v; };
    char magic[4];
    r(magic, 4);
    if (std::string(magic, 4) != "OTFS") throw SceneError("bad snapshot magic");
    if (r32() != 1) throw SceneError("unsupported snapshot version");
    CameraIntrinsics intr;
    intr.fx = rd(); intr.fy = rd(); intr.cx = rd(); intr.cy = rd();
    intr.width = int(r32()); intr.height = int(r32());
    intr.radial_k1 = rd(); intr.radial_k2 = rd();
    SceneGraph scene;
    const int64_t n_frames = r64();
    for (int64_t i = 0; i < n_frames; ++i) {
      FrameRecord fr;
      fr.frame_id = r64();
      uint8_t state;
      r(&state, 1);
      fr.state = FrameState(state);
      fr.rejected_at = r64();
      fr.name.resize(r32());
      if (!fr.name.empty()) r(fr.name.data(), fr.name.size());
      for (int row = 0; row < 3; ++row)
        for (int c = 0; c < 3; ++c) fr.pose.rotation(row, c) = rd();
      for (int row = 0; row < 3; ++row) fr.pose.translation(row) = rd();
      fr.keypoints.resize(r32());
      for (auto& kp : fr.keypoints) {
        kp.x = rd(); kp.y = rd(); kp.scale = rd(); kp.orientation = rd();
      }
      scene.frames_.emplace(fr.frame_id, std::move(fr));
    }
    const int64_t n_points = r64();
    for (int64_t i = 0; i < n_points; ++i) {
      const PointId pid = r64();
      Point3D pt;
      for (int row = 0; row < 3; ++row) pt.position(row) = rd();
      uint8_t has_color, color;
      r(&has_color, 1);
      r(&color, 1);
      if (has_color) pt.color = color;
      pt.error = rd();
      pt.track.resize(r32());
      for (auto& t : pt.track) {
        t.frame_id = r64();
        t.keypoint_index = int(r32());
        scene.observation_index_[{t.frame_id, t.keypoint_index}] = pid;
      }
      scene.points_.emplace(pid, std::move(pt));
    }
    const int64_t n_reg = r64();
    for (int64_t i = 0; i < n_reg; ++i) scene.registered_order_.push_back(r64());
    scene.next_frame_id_ = r64();
    scene.next_point_id_ = r64();
    return {std::move(scene), intr};
  }

 private:
  static void atomicWrite(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw SceneError("cannot write " + tmp);
      out << content;
      if (!out) {
        std::filesystem::remove(tmp);
        throw SceneError("write failed for " + tmp);
      }
    }
    std::filesystem::rename(tmp, path);
  }

  std::map<FrameId, FrameRecord> frames_;
  std::map<PointId, Point3D> points_;
  std::map<MatchEdgeKey, std::vector<std::pair<int, int>>> match_edges_;
  std::map<std::pair<FrameId, int>, PointId> observation_index_;
  std::vector<FrameId> registered_order_;
  FrameId next_frame_id_ = 0;
  PointId next_point_id_ = 0;
};

}  // namespace otf
