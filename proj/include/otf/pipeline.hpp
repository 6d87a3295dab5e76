#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "otf/ba.hpp"
#include "otf/config.hpp"
#include "otf/core.hpp"
#include "otf/descriptor.hpp"
#include "otf/features.hpp"
#include "otf/geometry.hpp"
#include "otf/image.hpp"
#include "otf/lsm.hpp"
#include "otf/scene.hpp"
#include "otf/vocab_tree.hpp"

namespace otf {

// Bundle adjustment schedule: weighted local BA (default), local BA plus a
// global pass whenever the model grows by 10%, or global BA every frame.
enum class BaMode { kLocalWeighted, kCombined, kGlobal };

struct StageTimings {
  double fe_ms = 0, oim_ms = 0, gv_ms = 0, lsm_ms = 0, ir_ms = 0, tri_ms = 0, ba_ms = 0;
  double total_ms = 0;
};

struct FrameReport {
  FrameId frame_id = -1;
  std::string name;
  bool registered = false;
  bool awaiting_initialization = false;
  StageTimings timings;
  int n_points_total = 0;
  double mre = 0;
  std::string note;
};

// Line-delimited run log; one record per line, `key=value` metrics.
class RunLogger {
 public:
  void open(const std::string& path, const std::string& level) {
    out_.open(path, std::ios::app);
    verbose_ = (level == "debug");
  }
  void log(FrameId frame, const std::string& stage, const std::string& level,
           const std::string& message,
           const std::vector<std::pair<std::string, double>>& metrics = {}) {
    if (!out_.is_open()) return;
    if (level == "debug" && !verbose_) return;
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    out_ << std::chrono::duration_cast<std::chrono::milliseconds>(now).count() << " frame="
         << frame << " stage=" << stage << " level=" << level << " msg=\"" << message << "\"";
    for (const auto& [k, v] : metrics) out_ << " " << k << "=" << v;
    out_ << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
  bool verbose_ = false;
};

namespace pipeline_detail {

class StageClock {
 public:
  StageClock() : start_(std::chrono::steady_clock::now()) {}
  double lapMs() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - start_).count();
    start_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace pipeline_detail

// The per-image loop: feature extraction, retrieval, matching, verification,
// LSM refinement, registration, triangulation, local BA, commit.
class Pipeline {
 public:
  explicit Pipeline(const PipelineConfig& cfg) : cfg_(cfg) {
    intrinsics_.fx = cfg.cam_fx;
    intrinsics_.fy = cfg.cam_fy;
    intrinsics_.cx = cfg.cam_cx;
    intrinsics_.cy = cfg.cam_cy;
    intrinsics_.width = cfg.cam_width;
    intrinsics_.height = cfg.cam_height;
    intrinsics_.radial_k1 = cfg.cam_k1;
    intrinsics_.radial_k2 = cfg.cam_k2;
    intrinsics_.validate();
    if (!cfg.tree_path.empty()) tree_ = VocabTree::load(cfg.tree_path);
  }

  const SceneGraph& scene() const { return scene_; }
  SceneGraph& scene() { return scene_; }
  const CameraIntrinsics& intrinsics() const { return intrinsics_; }
  const VocabTree& tree() const { return tree_; }
  bool initialized() const { return initialized_; }
  const std::vector<FrameReport>& reports() const { return reports_; }
  RunLogger& logger() { return logger_; }

  void setTree(VocabTree tree) { tree_ = std::move(tree); }
  void setBaMode(BaMode mode) { ba_mode_ = mode; }

  FrameReport processImage(ImageU8 image, const std::string& name) {
    pipeline_detail::StageClock total_clock;
    FrameReport report;
    report.name = name;

    // (1) Local features + global descriptor.
    pipeline_detail::StageClock clock;
    std::vector<Keypoint> keypoints;
    std::vector<float> descriptor;
    try {
      if (cfg_.feature_provider == "sidecar")
        keypoints = loadSidecarFeatures(name);
      else
        keypoints = detectAndDescribe(image, cfg_.max_features);
      if (cfg_.descriptor_provider == "sidecar")
        descriptor = loadSidecarDescriptor(name, cfg_.descriptor_dim);
      else
        descriptor = extractGlobalDescriptor(image);
    } catch (const std::exception& e) {
      report.note = std::string("feature extraction failed: ") + e.what();
      logger_.log(-1, "FE", "warn", report.note);
      return report;
    }
    // Undistort once at detection; everything downstream is distortion-free.
    for (auto& kp : keypoints) {
      const Vec2 u = intrinsics_.undistortPixel({kp.x, kp.y});
      kp.x = u.x();
      kp.y = u.y();
    }
    const FrameId id = scene_.addFrame(std::move(image), intrinsics_, name);
    scene_.frame(id).keypoints = std::move(keypoints);
    scene_.frame(id).global_descriptor = descriptor;
    report.frame_id = id;
    report.timings.fe_ms = clock.lapMs();

    if (!initialized_) {
      report.awaiting_initialization = true;
      pending_.push_back(id);
      tryInitialize(report);
    } else {
      registerFrame(id, report, /*is_retry=*/false);
    }

    report.timings.total_ms = total_clock.lapMs();
    report.registered = scene_.frame(id).state == FrameState::kRegistered;
    report.n_points_total = int(scene_.points().size());
    report.mre = scene_.meanReprojectionError(intrinsics_);
    reports_.push_back(report);
    maybeRetryRejected();
    return report;
  }

  // Optional end-of-stream global refinement (evaluation parity only).
  void globalBaAtEnd() {
    if (scene_.numRegistered() < 3) return;
    BaProblem prob = assembleGlobalProblem();
    solveWeightedLocalBa(prob);
    commitProblem(prob);
  }

  void exportOutputs(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    scene_.exportPly(dir + "/cloud.ply");
    scene_.exportPoses(dir + "/poses.txt");
    scene_.exportStatsCsv(dir + "/stats.csv", intrinsics_);
  }

  void writeTimingsCsv(const std::string& path) const {
    std::ostringstream out;
    out << "frame_id,fe_ms,oim_ms,gv_ms,lsm_ms,ir_ms,tri_ms,ba_ms,total_ms,registered,"
           "n_points_total,mre\n";
    for (const auto& r : reports_) {
      char buf[320];
      std::snprintf(buf, sizeof(buf),
                    "%lld,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%d,%d,%.6f\n",
                    (long long)r.frame_id, r.timings.fe_ms, r.timings.oim_ms, r.timings.gv_ms,
                    r.timings.lsm_ms, r.timings.ir_ms, r.timings.tri_ms, r.timings.ba_ms,
                    r.timings.total_ms, r.registered ? 1 : 0, r.n_points_total, r.mre);
      out << buf;
    }
    std::ofstream f(path);
    f << out.str();
  }

 private:
  struct VerifiedPair {
    FrameId candidate;
    std::vector<std::pair<int, int>> matches;  // (new kp, candidate kp), model inliers
    TwoViewModel model;
  };

  // Candidate matching + two-view verification with GRIC.
  std::vector<VerifiedPair> matchAndVerify(FrameId id,
                                           const std::vector<std::pair<FrameId, double>>& cands,
                                           FrameReport& report) {
    pipeline_detail::StageClock clock;
    std::vector<VerifiedPair> verified;
    const FrameRecord& rec = scene_.frame(id);
    const auto deadline_exceeded = [&]() {
      return cfg_.frame_budget_ms > 0 &&
             report.timings.oim_ms + report.timings.gv_ms > cfg_.frame_budget_ms;
    };
    for (const auto& [cand_id, dist] : cands) {
      if (deadline_exceeded()) {
        logger_.log(id, "GV", "warn", "frame budget exceeded, skipping remaining candidates");
        break;
      }
      const FrameRecord& cand = scene_.frame(cand_id);
      const auto matches = matchDescriptors(rec.keypoints, cand.keypoints, cfg_.match_ratio);
      report.timings.oim_ms += clock.lapMs();
      if (int(matches.size()) < std::max(8, std::min(cfg_.nf_min_inliers, cfg_.nh_min_inliers))) {
        clock.lapMs();
        continue;
      }
      std::vector<Vec2> pa, pb;  // a = new frame, b = candidate
      for (const auto& [i, j] : matches) {
        pa.emplace_back(rec.keypoints[i].x, rec.keypoints[i].y);
        pb.emplace_back(cand.keypoints[j].x, cand.keypoints[j].y);
      }
      RansacOptions opt;
      opt.threshold = cfg_.ransac_threshold_px;
      opt.max_iters = cfg_.ransac_max_iters;
      opt.confidence = cfg_.ransac_confidence;
      opt.seed = cfg_.seed ^ (uint64_t(id) << 20) ^ uint64_t(cand_id);
      std::vector<TwoViewModel> models;
      if (auto f = estimateFundamental(pa, pb, opt, cfg_.nf_min_inliers)) models.push_back(*f);
      if (auto h = estimateHomography(pa, pb, opt, cfg_.nh_min_inliers)) models.push_back(*h);
      if (auto e = estimateEssential(pa, pb, intrinsics_, opt, cfg_.nf_min_inliers))
        models.push_back(*e);
      report.timings.gv_ms += clock.lapMs();
      if (models.empty()) continue;
      TwoViewModel best = gricSelect(std::move(models), pa, pb, intrinsics_, cfg_.gric_sigma);
      VerifiedPair vp;
      vp.candidate = cand_id;
      vp.model = best;
      for (int idx : best.inlier_indices) vp.matches.push_back(matches[idx]);
      verified.push_back(std::move(vp));
    }
    return verified;
  }

  // LSM refinement of the new frame's matched keypoint positions, re-gated by
  // the pair's epipolar/homography model.
  void refineWithLsm(FrameId id, std::vector<VerifiedPair>& verified, FrameReport& report) {
    pipeline_detail::StageClock clock;
    FrameRecord& rec = scene_.frame(id);
    std::map<int, std::pair<Vec2, int>> refined_accum;  // kp -> (sum, count)
    for (auto& vp : verified) {
      const FrameRecord& cand = scene_.frame(vp.candidate);
      std::vector<std::pair<Vec2, Vec2>> pairs;
      for (const auto& [i, j] : vp.matches)
        pairs.push_back({{cand.keypoints[j].x, cand.keypoints[j].y},
                         {rec.keypoints[i].x, rec.keypoints[i].y}});
      const auto res =
          refineMatches(cand.pixels, rec.pixels, pairs, cfg_.lsm_window, cfg_.lsm_rmse_reject);
      // Matches LSM cannot refine (typically wide-baseline pairs outside the
      // affine basin) keep their verified positions; only a refinement that
      // lands off the pair's model evicts the match.
      std::set<size_t> dropped;
      for (const auto& [pair_idx, refined] : res.refined) {
        const auto& [i, j] = vp.matches[pair_idx];
        // Epipolar re-gate against the pair's model.
        double residual;
        const Vec2 cand_pos(cand.keypoints[j].x, cand.keypoints[j].y);
        if (vp.model.kind == ModelKind::kHomography) {
          const Mat3 h_inv = vp.model.matrix.inverse();
          residual = symmetricTransferDistance(vp.model.matrix, h_inv, refined, cand_pos);
        } else if (vp.model.kind == ModelKind::kEssential) {
          const Mat3 k_inv = intrinsics_.K().inverse();
          const Mat3 pixel_f = k_inv.transpose() * vp.model.matrix * k_inv;
          residual = sampsonDistance(pixel_f, refined, cand_pos);
        } else {
          residual = sampsonDistance(vp.model.matrix, refined, cand_pos);
        }
        if (residual > cfg_.ransac_threshold_px) {
          dropped.insert(size_t(pair_idx));
          continue;
        }
        auto& acc = refined_accum[i];
        acc.first += refined;
        acc.second += 1;
      }
      std::vector<std::pair<int, int>> kept;
      for (size_t m = 0; m < vp.matches.size(); ++m)
        if (!dropped.count(m)) kept.push_back(vp.matches[m]);
      vp.matches = std::move(kept);
    }
    for (const auto& [kp_idx, acc] : refined_accum) {
      rec.keypoints[kp_idx].x = acc.first.x() / acc.second;
      rec.keypoints[kp_idx].y = acc.first.y() / acc.second;
    }
    report.timings.lsm_ms += clock.lapMs();
  }

  void registerFrame(FrameId id, FrameReport& report, bool is_retry) {
    pipeline_detail::StageClock clock;
    FrameRecord& rec = scene_.frame(id);

    // (2) Retrieval against registered frames.
    auto cands = tree_.retrieveTopN(rec.global_descriptor, cfg_.retrieval_top_n);
    report.timings.oim_ms += clock.lapMs();

    // (3)-(4) matching + verification, (5) LSM.
    auto verified = matchAndVerify(id, cands, report);
    refineWithLsm(id, verified, report);
    clock.lapMs();

    // (6) 2D-3D assembly through the observation index.
    std::map<int, std::map<PointId, int>> votes;  // new kp -> point votes
    for (const auto& vp : verified) {
      int n_observed = 0;
      for (const auto& [i, j] : vp.matches) {
        if (auto pid = scene_.observedPoint(vp.candidate, j)) {
          votes[i][*pid] += 1;
          ++n_observed;
        }
      }
      logger_.log(id, "IR", "debug", "pair votes",
                  {{"candidate", double(vp.candidate)},
                   {"n_matches", double(vp.matches.size())},
                   {"n_observed", double(n_observed)}});
    }
    std::map<int, PointId> kp_to_point;
    std::set<PointId> used_points;
    for (const auto& [kp, vote_map] : votes) {
      PointId best = -1;
      int best_votes = 0;
      for (const auto& [pid, v] : vote_map)
        if (v > best_votes) {
          best = pid;
          best_votes = v;
        }
      if (best >= 0 && !used_points.count(best)) {
        kp_to_point[kp] = best;
        used_points.insert(best);
      }
    }

    std::vector<Vec3> world;
    std::vector<Vec2> pixels;
    std::vector<int> kp_of_match;
    std::vector<PointId> point_of_match;
    for (const auto& [kp, pid] : kp_to_point) {
      world.push_back(scene_.points().at(pid).position);
      pixels.emplace_back(rec.keypoints[kp].x, rec.keypoints[kp].y);
      kp_of_match.push_back(kp);
      point_of_match.push_back(pid);
    }

    RansacOptions pnp_opt;
    pnp_opt.threshold = cfg_.pnp_threshold_px;
    pnp_opt.max_iters = cfg_.ransac_max_iters;
    pnp_opt.confidence = cfg_.ransac_confidence;
    pnp_opt.seed = cfg_.seed ^ (uint64_t(id) * 0x9e3779b9ull);

    logger_.log(id, "IR", "debug", "2d-3d assembly",
                {{"n_candidates", double(cands.size())},
                 {"n_verified_pairs", double(verified.size())},
                 {"n_2d3d", double(world.size())}});
    auto registration = registerEpnp(world, pixels, intrinsics_, pnp_opt, cfg_.min_pnp_inliers);

    // Densification: reproject unobserved points under the coarse pose and
    // LSM-refine; re-run registration on the union.
    std::vector<DensifiedMatch> densified;
    if (registration && cfg_.densify) {
      densified = densifyMatches(scene_, rec, registration->pose, intrinsics_, cfg_.lsm_window,
                                 cfg_.lsm_rmse_reject);
      for (const auto& d : densified) {
        if (used_points.count(d.point_id)) continue;
        world.push_back(scene_.points().at(d.point_id).position);
        pixels.push_back(d.position);
        kp_of_match.push_back(-1);  // no keypoint yet; appended at commit time
        point_of_match.push_back(d.point_id);
        used_points.insert(d.point_id);
      }
      if (!densified.empty())
        registration = registerEpnp(world, pixels, intrinsics_, pnp_opt, cfg_.min_pnp_inliers);
    }
    report.timings.ir_ms += clock.lapMs();

    if (!registration) {
      scene_.markRejected(id);
      if (!is_retry) rejected_.push_back(id);
      logger_.log(id, "IR", "warn", "registration failed");
      return;
    }

    // (7) Triangulate new tracks from 2D-2D matches not yet tied to points.
    std::set<int> kps_with_points;
    for (int inl : registration->inlier_indices)
      if (kp_of_match[inl] >= 0) kps_with_points.insert(kp_of_match[inl]);
    std::map<int, std::vector<std::pair<FrameId, int>>> track_builder;
    for (const auto& vp : verified) {
      for (const auto& [i, j] : vp.matches) {
        if (kps_with_points.count(i)) continue;
        if (scene_.observedPoint(vp.candidate, j)) continue;
        track_builder[i].emplace_back(vp.candidate, j);
      }
    }
    std::vector<Point3D> new_points;
    std::set<std::pair<FrameId, int>> used_partner_kps;
    pipeline_detail::StageClock tri_clock;
    for (const auto& [kp, partners] : track_builder) {
      std::vector<TrackObservation> obs;
      std::vector<std::pair<FrameId, int>> entries;
      obs.push_back({registration->pose, {rec.keypoints[kp].x, rec.keypoints[kp].y}});
      entries.emplace_back(id, kp);
      for (const auto& [fid, pkp] : partners) {
        if (used_partner_kps.count({fid, pkp})) continue;
        const FrameRecord& pf = scene_.frame(fid);
        obs.push_back({pf.pose, {pf.keypoints[pkp].x, pf.keypoints[pkp].y}});
        entries.emplace_back(fid, pkp);
      }
      if (obs.size() < 2) continue;
      const auto tri =
          triangulateTrack(obs, intrinsics_, cfg_.tri_threshold_px, cfg_.tri_min_angle_deg);
      if (!tri) continue;
      // The new frame's observation must be in the support set.
      if (std::find(tri->support.begin(), tri->support.end(), 0) == tri->support.end()) continue;
      if (tri->support.size() < 2) continue;
      Point3D pt;
      pt.position = tri->position;
      pt.error = tri->mean_error;
      pt.color = rec.pixels.inBounds(rec.keypoints[kp].x, rec.keypoints[kp].y)
                     ? std::optional<uint8_t>(uint8_t(
                           rec.pixels.sample(rec.keypoints[kp].x, rec.keypoints[kp].y)))
                     : std::nullopt;
      for (int s : tri->support) {
        pt.track.push_back({entries[s].first, entries[s].second});
        if (s > 0) used_partner_kps.insert(entries[s]);
      }
      new_points.push_back(std::move(pt));
    }
    report.timings.tri_ms += tri_clock.lapMs();

    // (9) Commit registration atomically.
    std::vector<SceneGraph::NewObservation> observations;
    for (int inl : registration->inlier_indices) {
      int kp = kp_of_match[inl];
      if (kp < 0) {
        // Densified match: append a keypoint for the refined position.
        Keypoint nk;
        nk.x = pixels[inl].x();
        nk.y = pixels[inl].y();
        nk.scale = 1.0;
        kp = int(rec.keypoints.size());
        rec.keypoints.push_back(nk);
      }
      observations.push_back({point_of_match[inl], kp});
    }
    try {
      scene_.commitRegistration(id, registration->pose, new_points, observations);
    } catch (const SceneError& e) {
      scene_.markRejected(id);
      if (!is_retry) rejected_.push_back(id);
      logger_.log(id, "IR", "warn", std::string("commit failed: ") + e.what());
      return;
    }
    for (const auto& vp : verified) scene_.setMatchEdge(id, vp.candidate, vp.matches);
    tree_.insertFrame(id, rec.global_descriptor);

    // (8) Bundle adjustment per the active schedule.
    pipeline_detail::StageClock ba_clock;
    if (ba_mode_ == BaMode::kGlobal) {
      BaProblem prob = assembleGlobalProblem();
      solveWeightedLocalBa(prob);
      commitProblem(prob);
    } else {
      LocalBaConfig ba_cfg;
      ba_cfg.top_n = cfg_.ba_top_n;
      ba_cfg.depth_l = cfg_.ba_tree_depth;
      ba_cfg.k = cfg_.ba_weight_k;
      ba_cfg.huber_width = cfg_.huber_width_px;
      const auto ba_stats = runLocalBa(scene_, tree_, id, intrinsics_, ba_cfg);
      logger_.log(id, "BA", "info", "local BA",
                  {{"ba_ms", ba_stats.wall_ms},
                   {"iters", double(ba_stats.iterations)},
                   {"mre_before", ba_stats.mre_before},
                   {"mre_after", ba_stats.mre_after},
                   {"n_var_cams", double(ba_stats.n_var_cams)},
                   {"n_fixed_cams", double(ba_stats.n_fixed_cams)},
                   {"n_points", double(ba_stats.n_points)}});
      if (ba_mode_ == BaMode::kCombined &&
          double(scene_.points().size()) >= 1.1 * double(last_global_points_)) {
        BaProblem prob = assembleGlobalProblem();
        solveWeightedLocalBa(prob);
        commitProblem(prob);
        last_global_points_ = int64_t(scene_.points().size());
      }
    }
    report.timings.ba_ms += ba_clock.lapMs();
  }

  void tryInitialize(FrameReport& report) {
    if (pending_.size() < 2) return;
    pipeline_detail::StageClock clock;
    const FrameId newest = pending_.back();
    const FrameRecord& rec = scene_.frame(newest);
    // Match the newest buffered frame against all earlier buffered frames.
    for (FrameId other : pending_) {
      if (other == newest) continue;
      const FrameRecord& cand = scene_.frame(other);
      const auto matches = matchDescriptors(rec.keypoints, cand.keypoints, cfg_.match_ratio);
      if (int(matches.size()) < cfg_.nf_min_inliers) continue;
      std::vector<Vec2> pa, pb;
      for (const auto& [i, j] : matches) {
        pa.emplace_back(rec.keypoints[i].x, rec.keypoints[i].y);
        pb.emplace_back(cand.keypoints[j].x, cand.keypoints[j].y);
      }
      RansacOptions opt;
      opt.threshold = cfg_.ransac_threshold_px;
      opt.max_iters = cfg_.ransac_max_iters;
      opt.confidence = cfg_.ransac_confidence;
      opt.seed = cfg_.seed ^ (uint64_t(newest) << 20) ^ uint64_t(other);
      auto e = estimateEssential(pa, pb, intrinsics_, opt, cfg_.nf_min_inliers);
      if (!e) continue;
      InitialPairCandidate c;
      // Older frame becomes A (reference), newest becomes B.
      c.frame_a = other;
      c.frame_b = newest;
      c.rotation_degenerate = e->rotation_degenerate;
      std::vector<std::pair<int, int>> inlier_kps;  // (kp in a, kp in b)
      for (int idx : e->inlier_indices) {
        c.pixels_a.push_back(pb[idx]);
        c.pixels_b.push_back(pa[idx]);
        inlier_kps.emplace_back(matches[idx].second, matches[idx].first);
      }
      // estimateEssential maps a->b with its (R, t); here a = newest,
      // b = older, so invert to get newest w.r.t. older.
      const Pose rel{e->rotation, e->translation};
      const Pose inv = rel.inverse();
      c.rotation = inv.rotation;
      c.translation = inv.translation.normalized();
      init_candidates_[{c.frame_a, c.frame_b}] = {c, std::move(inlier_kps)};
    }
    report.timings.gv_ms += clock.lapMs();

    std::vector<InitialPairCandidate> cands;
    for (const auto& [key, val] : init_candidates_) cands.push_back(val.first);
    const auto chosen = selectInitialPair(cands, intrinsics_, cfg_.ransac_threshold_px);
    if (!chosen) {
      if (int(pending_.size()) > cfg_.init_buffer_max)
        logger_.log(newest, "INIT", "warn", "initial pair still not found; buffering continues");
      return;
    }
    bootstrap(init_candidates_.at(*chosen).first, init_candidates_.at(*chosen).second, report);
  }

  void bootstrap(const InitialPairCandidate& cand,
                 const std::vector<std::pair<int, int>>& inlier_kps, FrameReport& report) {
    pipeline_detail::StageClock clock;
    const FrameId a = cand.frame_a, b = cand.frame_b;
    const Pose pose_a;  // identity, gauge anchor
    const Pose pose_b{cand.rotation, cand.translation};

    // Triangulate the verified correspondences; `inlier_kps` runs parallel to
    // cand.pixels_* with (keypoint in a, keypoint in b).
    std::vector<Point3D> points_b;
    const FrameRecord& fa = scene_.frame(a);
    std::set<int> used_a, used_b;
    for (size_t i = 0; i < cand.pixels_a.size(); ++i) {
      const Vec2 na = intrinsics_.normalize(cand.pixels_a[i]);
      const Vec2 nb = intrinsics_.normalize(cand.pixels_b[i]);
      const Vec3 x = triangulateDlt(pose_a, pose_b, na, nb);
      if (!x.allFinite() || x.z() <= 0 || pose_b.toCamera(x).z() <= 0) continue;
      if ((intrinsics_.project(x) - cand.pixels_a[i]).norm() > cfg_.tri_threshold_px) continue;
      if ((intrinsics_.project(pose_b.toCamera(x)) - cand.pixels_b[i]).norm() >
          cfg_.tri_threshold_px)
        continue;
      if (triangulationAngle(pose_a, pose_b, x) < cfg_.tri_min_angle_deg * M_PI / 180.0) continue;
      const auto [ka, kb] = inlier_kps[i];
      if (!used_a.insert(ka).second || !used_b.insert(kb).second) continue;
      Point3D pt;
      pt.position = x;
      pt.track.push_back({a, ka});
      pt.track.push_back({b, kb});
      pt.color = fa.pixels.inBounds(fa.keypoints[ka].x, fa.keypoints[ka].y)
                     ? std::optional<uint8_t>(
                           uint8_t(fa.pixels.sample(fa.keypoints[ka].x, fa.keypoints[ka].y)))
                     : std::nullopt;
      points_b.push_back(std::move(pt));
    }
    if (int(points_b.size()) < cfg_.nf_min_inliers) {
      logger_.log(b, "INIT", "warn", "bootstrap triangulation too sparse; keep buffering");
      return;
    }

    scene_.commitRegistration(a, pose_a, {}, {});
    scene_.commitRegistration(b, pose_b, points_b, {});
    report.timings.tri_ms += clock.lapMs();

    // Two-view BA: first camera frozen, baseline scale pinned.
    pipeline_detail::StageClock ba_clock;
    BaProblem prob;
    prob.intrinsics = intrinsics_;
    prob.huber_width = cfg_.huber_width_px;
    prob.cameras.push_back({a, pose_a, 1.0, true});
    prob.cameras.push_back({b, pose_b, 1.0, false});
    for (const auto& [pid, pt] : scene_.points()) {
      const int pt_idx = int(prob.points.size());
      prob.points.push_back({pid, pt.position});
      for (const auto& t : pt.track) {
        const FrameRecord& fr = scene_.frame(t.frame_id);
        const Keypoint& kp = fr.keypoints[t.keypoint_index];
        prob.observations.push_back({t.frame_id == a ? 0 : 1, pt_idx, Vec2(kp.x, kp.y)});
      }
    }
    prob.fix_scale = true;
    solveWeightedLocalBa(prob);
    commitProblem(prob);
    report.timings.ba_ms += ba_clock.lapMs();

    // Bootstrap the retrieval tree if none was supplied: train on everything
    // seen so far.
    if (!tree_.trained()) {
      std::vector<std::vector<float>> descs;
      for (const auto& [fid, fr] : scene_.frames()) descs.push_back(fr.global_descriptor);
      while (int(descs.size()) < 2 * cfg_.tree_branching) descs.push_back(descs.back());
      tree_ = VocabTree::train(descs, cfg_.tree_branching, cfg_.tree_depth, cfg_.seed);
    }
    tree_.insertFrame(a, scene_.frame(a).global_descriptor);
    tree_.insertFrame(b, scene_.frame(b).global_descriptor);
    initialized_ = true;
    init_candidates_.clear();
    logger_.log(b, "INIT", "info", "scene initialized",
                {{"pair_a", double(a)}, {"pair_b", double(b)},
                 {"points", double(scene_.points().size())}});

    // Replay remaining buffered frames through the registered path.
    std::vector<FrameId> remaining;
    for (FrameId f : pending_)
      if (f != a && f != b) remaining.push_back(f);
    pending_.clear();
    for (FrameId f : remaining) {
      FrameReport sub;
      sub.frame_id = f;
      registerFrame(f, sub, /*is_retry=*/false);
    }
  }

  void maybeRetryRejected() {
    if (!initialized_) return;
    std::vector<FrameId> still_rejected;
    for (FrameId f : rejected_) {
      const FrameRecord& fr = scene_.frame(f);
      if (fr.state != FrameState::kRejected) continue;
      if (int64_t(scene_.numRegistered()) - fr.rejected_at >= cfg_.retry_after_frames) {
        FrameReport sub;
        sub.frame_id = f;
        registerFrame(f, sub, /*is_retry=*/true);
        logger_.log(f, "IR", "info",
                    scene_.frame(f).state == FrameState::kRegistered ? "retry succeeded"
                                                                     : "retry failed");
      } else {
        still_rejected.push_back(f);
      }
    }
    rejected_ = std::move(still_rejected);
  }

  BaProblem assembleGlobalProblem() {
    BaProblem prob;
    prob.intrinsics = intrinsics_;
    prob.huber_width = cfg_.huber_width_px;
    std::map<FrameId, int> cam_index;
    bool first = true;
    for (FrameId f : scene_.registeredFrames()) {
      cam_index[f] = int(prob.cameras.size());
      prob.cameras.push_back({f, scene_.frame(f).pose, 1.0, first});
      first = false;
    }
    for (const auto& [pid, pt] : scene_.points()) {
      const int pt_idx = int(prob.points.size());
      prob.points.push_back({pid, pt.position});
      for (const auto& t : pt.track) {
        const Keypoint& kp = scene_.frame(t.frame_id).keypoints[t.keypoint_index];
        prob.observations.push_back({cam_index.at(t.frame_id), pt_idx, Vec2(kp.x, kp.y)});
      }
    }
    prob.fix_scale = true;
    return prob;
  }

  void commitProblem(const BaProblem& prob) {
    for (const auto& c : prob.cameras)
      if (!c.fixed) scene_.updatePose(c.id, c.pose);
    for (const auto& pt : prob.points)
      scene_.updatePoint(pt.id, pt.position, scene_.points().at(pt.id).error);
  }

  PipelineConfig cfg_;
  CameraIntrinsics intrinsics_;
  SceneGraph scene_;
  VocabTree tree_;
  RunLogger logger_;
  BaMode ba_mode_ = BaMode::kLocalWeighted;
  int64_t last_global_points_ = 1;
  bool initialized_ = false;
  std::vector<FrameId> pending_;
  std::vector<FrameId> rejected_;
  std::map<std::pair<FrameId, FrameId>,
           std::pair<InitialPairCandidate, std::vector<std::pair<int, int>>>>
      init_candidates_;
  std::vector<FrameReport> reports_;
};

}  // namespace otf
