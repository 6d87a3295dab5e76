#include <gtest/gtest.h>

#include <cmath>

#include "otf/geometry.hpp"
#include "otf/rng.hpp"

namespace otf {
namespace {

CameraIntrinsics testIntrinsics() {
  CameraIntrinsics intr;
  intr.fx = 600;
  intr.fy = 600;
  intr.cx = 320;
  intr.cy = 240;
  intr.width = 640;
  intr.height = 480;
  return intr;
}

// World -> camera pose for a camera at `position` looking at `target`.
Pose lookAt(const Vec3& position, const Vec3& target) {
  const Vec3 z = (target - position).normalized();
  Vec3 up(0, 1, 0);
  if (std::abs(up.dot(z)) > 0.99) up = Vec3(1, 0, 0);
  const Vec3 x = up.cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.row(0) = x;
  r.row(1) = y;
  r.row(2) = z;
  return {r, -r * position};
}

struct TwoViewScene {
  Pose pose_a, pose_b;
  std::vector<Vec3> points;
  std::vector<Vec2> pix_a, pix_b;
  Mat3 relative_rotation;  // b w.r.t. a
  Vec3 relative_translation;
};

// General (non-planar) scene; cameras on a circle of radius 6 around the
// cloud, separated by `angle_deg`. With planar=true the points lie on z=0.
TwoViewScene makeTwoView(SeededRng& rng, int n, double angle_deg, bool planar,
                         double noise_px = 0) {
  const CameraIntrinsics intr = testIntrinsics();
  TwoViewScene s;
  const double half = angle_deg * M_PI / 360.0;
  const Vec3 pa(6.0 * std::sin(-half), 0.4, -6.0 * std::cos(-half));
  const Vec3 pb(6.0 * std::sin(half), -0.3, -6.0 * std::cos(half));
  s.pose_a = lookAt(pa, Vec3::Zero());
  s.pose_b = lookAt(pb, Vec3::Zero());
  s.relative_rotation = s.pose_b.rotation * s.pose_a.rotation.transpose();
  s.relative_translation =
      s.pose_b.translation - s.relative_rotation * s.pose_a.translation;
  while (int(s.points.size()) < n) {
    const Vec3 p(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                 planar ? 0.0 : rng.uniform(-1.5, 1.5));
    const Vec3 ca = s.pose_a.toCamera(p), cb = s.pose_b.toCamera(p);
    if (ca.z() <= 0.5 || cb.z() <= 0.5) continue;
    Vec2 qa = intr.project(ca), qb = intr.project(cb);
    if (qa.x() < 5 || qa.y() < 5 || qa.x() > 634 || qa.y() > 474) continue;
    if (qb.x() < 5 || qb.y() < 5 || qb.x() > 634 || qb.y() > 474) continue;
    if (noise_px > 0) {
      qa += Vec2(noise_px * rng.normal(), noise_px * rng.normal());
      qb += Vec2(noise_px * rng.normal(), noise_px * rng.normal());
    }
    s.points.push_back(p);
    s.pix_a.push_back(qa);
    s.pix_b.push_back(qb);
  }
  return s;
}

// Replace the last `k` matches in b with random mismatching positions.
void injectOutliers(SeededRng& rng, TwoViewScene& s, int k) {
  for (int i = int(s.pix_b.size()) - k; i < int(s.pix_b.size()); ++i)
    s.pix_b[i] = Vec2(rng.uniform(20, 620), rng.uniform(20, 460));
}

TEST(Fundamental, NoiseFreeSampsonBelow1em6) {
  SeededRng rng(1, "geom");
  const auto s = makeTwoView(rng, 60, 25, false);
  RansacOptions opt;
  opt.seed = 5;
  const auto f = estimateFundamental(s.pix_a, s.pix_b, opt);
  ASSERT_TRUE(f.has_value());
  EXPECT_EQ(f->inlier_indices.size(), 60u);
  for (size_t i = 0; i < s.pix_a.size(); ++i)
    EXPECT_LT(sampsonDistance(f->matrix, s.pix_a[i], s.pix_b[i]), 1e-6);
}

TEST(Fundamental, OutliersExcludedFromInlierSet) {
  SeededRng rng(2, "geom");
  auto s = makeTwoView(rng, 100, 25, false);
  injectOutliers(rng, s, 30);
  RansacOptions opt;
  opt.seed = 9;
  opt.threshold = 2.0;
  const auto f = estimateFundamental(s.pix_a, s.pix_b, opt);
  ASSERT_TRUE(f.has_value());
  int planted = 0;
  for (int i : f->inlier_indices)
    if (i >= 70) ++planted;
  EXPECT_LE(planted, 1);
  EXPECT_GE(f->inlier_indices.size(), 68u);
}

TEST(Essential, NoiseFreePoseWithin1em6) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(3, "geom");
  const auto s = makeTwoView(rng, 60, 30, false);
  RansacOptions opt;
  opt.seed = 11;
  const auto e = estimateEssential(s.pix_a, s.pix_b, intr, opt);
  ASSERT_TRUE(e.has_value());
  EXPECT_FALSE(e->rotation_degenerate);
  EXPECT_LT(rotationAngle(e->rotation, s.relative_rotation), 1e-6);
  const Vec3 t_gt = s.relative_translation.normalized();
  EXPECT_LT((e->translation.normalized() - t_gt).norm(), 1e-6);
}

TEST(Essential, ThirtyPercentOutliersWithinTenthDegree) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(4, "geom");
  auto s = makeTwoView(rng, 100, 30, false);
  injectOutliers(rng, s, 30);
  RansacOptions opt;
  opt.seed = 13;
  opt.threshold = 2.0;
  const auto e = estimateEssential(s.pix_a, s.pix_b, intr, opt);
  ASSERT_TRUE(e.has_value());
  EXPECT_LT(rotationAngle(e->rotation, s.relative_rotation),
            0.1 * M_PI / 180.0);
  EXPECT_LT((e->translation.normalized() - s.relative_translation.normalized()).norm(), 0.005);
}

TEST(Essential, PureRotationFlaggedOrRejected) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(5, "geom");
  const Pose pose_a = lookAt(Vec3(0, 0, -6), Vec3::Zero());
  const Mat3 r_rel = expSo3(Vec3(0.02, 0.22, 0.01));
  const Pose pose_b{r_rel * pose_a.rotation, r_rel * pose_a.translation};
  std::vector<Vec2> pa, pb;
  while (int(pa.size()) < 60) {
    const Vec3 p(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    const Vec3 ca = pose_a.toCamera(p), cb = pose_b.toCamera(p);
    if (ca.z() <= 0.5 || cb.z() <= 0.5) continue;
    const Vec2 qa = intr.project(ca), qb = intr.project(cb);
    if (qa.x() < 5 || qa.y() < 5 || qa.x() > 634 || qa.y() > 474) continue;
    if (qb.x() < 5 || qb.y() < 5 || qb.x() > 634 || qb.y() > 474) continue;
    pa.push_back(qa);
    pb.push_back(qb);
  }
  const auto e = estimateEssential(pa, pb, intr, RansacOptions{});
  if (e) EXPECT_TRUE(e->rotation_degenerate);
}

TEST(Homography, PlanarNoiseFreeMapsExactly) {
  SeededRng rng(6, "geom");
  const auto s = makeTwoView(rng, 50, 30, true);
  RansacOptions opt;
  opt.seed = 17;
  const auto h = estimateHomography(s.pix_a, s.pix_b, opt);
  ASSERT_TRUE(h.has_value());
  EXPECT_EQ(h->inlier_indices.size(), 50u);
  for (size_t i = 0; i < s.pix_a.size(); ++i) {
    const Vec3 m = h->matrix * Vec3(s.pix_a[i].x(), s.pix_a[i].y(), 1.0);
    EXPECT_LT((m.head<2>() / m.z() - s.pix_b[i]).norm(), 1e-6);
  }
}

TEST(Homography, FarFewerInliersThanFOnGeneralWideBaseline) {
  SeededRng rng(7, "geom");
  const auto s = makeTwoView(rng, 120, 45, false);
  RansacOptions opt;
  opt.seed = 19;
  opt.threshold = 2.0;
  const auto f = estimateFundamental(s.pix_a, s.pix_b, opt);
  const auto h = estimateHomography(s.pix_a, s.pix_b, opt, 4);
  ASSERT_TRUE(f.has_value());
  EXPECT_EQ(f->inlier_indices.size(), 120u);
  if (h) EXPECT_LT(h->inlier_indices.size(), 60u);
}

// Acceptance-grade GRIC check: 100 seeded trials per scene class with 0.5 px
// observation noise.
TEST(Gric, SelectsHomographyOnPlanarScenes) {
  const CameraIntrinsics intr = testIntrinsics();
  int correct = 0;
  for (int t = 0; t < 100; ++t) {
    SeededRng rng(100 + t, "gric-planar");
    const auto s = makeTwoView(rng, 80, 30, true, 0.5);
    RansacOptions opt;
    opt.seed = 23 + t;
    opt.threshold = 3.0;
    std::vector<TwoViewModel> models;
    if (auto f = estimateFundamental(s.pix_a, s.pix_b, opt)) models.push_back(*f);
    if (auto h = estimateHomography(s.pix_a, s.pix_b, opt)) models.push_back(*h);
    if (auto e = estimateEssential(s.pix_a, s.pix_b, intr, opt)) models.push_back(*e);
    ASSERT_FALSE(models.empty());
    if (gricSelect(models, s.pix_a, s.pix_b, intr).kind == ModelKind::kHomography) ++correct;
  }
  EXPECT_GE(correct, 95);
}

TEST(Gric, SelectsEpipolarModelOnGeneralScenes) {
  const CameraIntrinsics intr = testIntrinsics();
  int correct = 0;
  for (int t = 0; t < 100; ++t) {
    SeededRng rng(300 + t, "gric-general");
    const auto s = makeTwoView(rng, 80, 30, false, 0.5);
    RansacOptions opt;
    opt.seed = 41 + t;
    opt.threshold = 3.0;
    std::vector<TwoViewModel> models;
    if (auto f = estimateFundamental(s.pix_a, s.pix_b, opt)) models.push_back(*f);
    if (auto h = estimateHomography(s.pix_a, s.pix_b, opt, 4)) models.push_back(*h);
    if (auto e = estimateEssential(s.pix_a, s.pix_b, intr, opt)) models.push_back(*e);
    ASSERT_FALSE(models.empty());
    if (gricSelect(models, s.pix_a, s.pix_b, intr).kind != ModelKind::kHomography) ++correct;
  }
  EXPECT_GE(correct, 95);
}

TEST(Epnp, NoiseFreeExactPose) {
  const CameraIntrinsics intr = testIntrinsics();
  for (int t = 0; t < 10; ++t) {
    SeededRng rng(500 + t, "epnp");
    const Pose gt = lookAt(Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), -6.0),
                           Vec3(rng.uniform(-0.3, 0.3), 0, 0));
    std::vector<Vec3> world;
    std::vector<Vec2> pixels;
    while (int(world.size()) < 30) {
      const Vec3 p(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
      const Vec3 c = gt.toCamera(p);
      if (c.z() <= 0.5) continue;
      const Vec2 q = intr.project(c);
      if (q.x() < 5 || q.y() < 5 || q.x() > 634 || q.y() > 474) continue;
      world.push_back(p);
      pixels.push_back(q);
    }
    const auto pose = solveEpnp(world, pixels, intr);
    ASSERT_TRUE(pose.has_value()) << "trial " << t;
    const Pose refined = refinePoseGaussNewton(*pose, world, pixels, intr);
    EXPECT_LT(rotationAngle(refined.rotation, gt.rotation), 1e-6) << "trial " << t;
    EXPECT_LT((refined.translation - gt.translation).norm() / gt.translation.norm(), 1e-6)
        << "trial " << t;
  }
}

TEST(Epnp, RansacRegistrationWithThirtyPercentOutliers) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(600, "epnp-ransac");
  const Pose gt = lookAt(Vec3(1.0, -0.5, -6.0), Vec3::Zero());
  std::vector<Vec3> world;
  std::vector<Vec2> pixels;
  while (int(world.size()) < 100) {
    const Vec3 p(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    const Vec3 c = gt.toCamera(p);
    if (c.z() <= 0.5) continue;
    const Vec2 q = intr.project(c);
    if (q.x() < 5 || q.y() < 5 || q.x() > 634 || q.y() > 474) continue;
    world.push_back(p);
    pixels.push_back(q);
  }
  for (int i = 70; i < 100; ++i) pixels[i] = Vec2(rng.uniform(20, 620), rng.uniform(20, 460));
  RansacOptions opt;
  opt.seed = 31;
  opt.threshold = 2.0;
  const auto reg = registerEpnp(world, pixels, intr, opt);
  ASSERT_TRUE(reg.has_value());
  EXPECT_LT(rotationAngle(reg->pose.rotation, gt.rotation), 0.1 * M_PI / 180.0);
  EXPECT_LT((reg->pose.translation - gt.translation).norm() / gt.translation.norm(), 0.005);
  int planted = 0;
  for (int i : reg->inlier_indices)
    if (i >= 70) ++planted;
  EXPECT_LE(planted, 1);
}

TEST(Triangulation, DltExactOnTwoViews) {
  const CameraIntrinsics intr = testIntrinsics();
  const Pose a = lookAt(Vec3(-2, 0, -6), Vec3::Zero());
  const Pose b = lookAt(Vec3(2, 0.5, -6), Vec3::Zero());
  const Vec3 p(0.4, -0.2, 0.7);
  const Vec2 na = intr.normalize(intr.project(a.toCamera(p)));
  const Vec2 nb = intr.normalize(intr.project(b.toCamera(p)));
  EXPECT_LT((triangulateDlt(a, b, na, nb) - p).norm(), 1e-9);
}

TEST(Triangulation, AngleOracleSymmetricRig) {
  // Cameras at +-45 degrees from a point directly between them: 90 degrees.
  const Pose a = lookAt(Vec3(-3, 0, -3), Vec3::Zero());
  const Pose b = lookAt(Vec3(3, 0, -3), Vec3::Zero());
  EXPECT_NEAR(triangulationAngle(a, b, Vec3::Zero()), M_PI / 2, 1e-12);
}

TEST(Triangulation, TrackOutlierExcludedFromSupport) {
  const CameraIntrinsics intr = testIntrinsics();
  const Vec3 p(0.3, 0.1, -0.2);
  std::vector<TrackObservation> obs;
  for (int i = 0; i < 6; ++i) {
    const double ang = (i - 2.5) * 12.0 * M_PI / 180.0;
    const Pose pose = lookAt(Vec3(6 * std::sin(ang), 0.2 * i, -6 * std::cos(ang)), Vec3::Zero());
    obs.push_back({pose, intr.project(pose.toCamera(p))});
  }
  obs[2].pixel += Vec2(35, -20);
  const auto r = triangulateTrack(obs, intr, 2.0);
  ASSERT_TRUE(r.has_value());
  EXPECT_LT((r->position - p).norm(), 1e-6);
  EXPECT_EQ(r->support.size(), 5u);
  for (int i : r->support) EXPECT_NE(i, 2);
}

TEST(Triangulation, InsufficientParallaxRejected) {
  const CameraIntrinsics intr = testIntrinsics();
  const Vec3 p(0.2, 0.0, 0.1);
  std::vector<TrackObservation> obs;
  for (int i = 0; i < 3; ++i) {
    const Pose pose = lookAt(Vec3(0.0005 * i, 0, -6), Vec3::Zero());
    obs.push_back({pose, intr.project(pose.toCamera(p))});
  }
  EXPECT_FALSE(triangulateTrack(obs, intr, 2.0, 1.5).has_value());
}

// Candidate whose cameras subtend `angle_deg` at the cloud, with `n` matches.
InitialPairCandidate makePairCandidate(SeededRng& rng, double angle_deg, int n, FrameId fa,
                                       FrameId fb) {
  const CameraIntrinsics intr = testIntrinsics();
  const double half = angle_deg * M_PI / 360.0;
  const Pose pose_a = lookAt(Vec3(8.0 * std::sin(-half), 0, -8.0 * std::cos(-half)), Vec3::Zero());
  const Pose pose_b = lookAt(Vec3(8.0 * std::sin(half), 0, -8.0 * std::cos(half)), Vec3::Zero());
  InitialPairCandidate cand;
  cand.frame_a = fa;
  cand.frame_b = fb;
  cand.rotation = pose_b.rotation * pose_a.rotation.transpose();
  cand.translation = (pose_b.translation - cand.rotation * pose_a.translation).normalized();
  while (int(cand.pixels_a.size()) < n) {
    // Small cloud so every triangulation angle stays close to angle_deg.
    const Vec3 p(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4));
    const Vec3 ca = pose_a.toCamera(p), cb = pose_b.toCamera(p);
    if (ca.z() <= 0.5 || cb.z() <= 0.5) continue;
    const Vec2 qa = intr.project(ca), qb = intr.project(cb);
    if (qa.x() < 5 || qa.y() < 5 || qa.x() > 634 || qa.y() > 474) continue;
    if (qb.x() < 5 || qb.y() < 5 || qb.x() > 634 || qb.y() > 474) continue;
    cand.pixels_a.push_back(qa);
    cand.pixels_b.push_back(qb);
  }
  return cand;
}

TEST(InitialPair, MostTriangulatedInsideStrictAngleWindow) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(700, "initpair");
  std::vector<InitialPairCandidate> cands;
  cands.push_back(makePairCandidate(rng, 5, 90, 0, 1));    // too narrow
  cands.push_back(makePairCandidate(rng, 75, 80, 0, 2));   // in window, most points
  cands.push_back(makePairCandidate(rng, 100, 50, 0, 3));  // in window, fewer
  cands.push_back(makePairCandidate(rng, 170, 90, 0, 4));  // too wide
  const auto pick = selectInitialPair(cands, intr);
  ASSERT_TRUE(pick.has_value());
  EXPECT_EQ(pick->second, 2);
}

TEST(InitialPair, TieBrokenByClosenessToNinety) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(701, "initpair");
  std::vector<InitialPairCandidate> cands;
  cands.push_back(makePairCandidate(rng, 70, 60, 0, 1));
  cands.push_back(makePairCandidate(rng, 95, 60, 0, 2));
  const auto pick = selectInitialPair(cands, intr);
  ASSERT_TRUE(pick.has_value());
  EXPECT_EQ(pick->second, 2);
}

TEST(InitialPair, RelaxedWindowUsedWhenStrictEmpty) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(702, "initpair");
  std::vector<InitialPairCandidate> cands;
  cands.push_back(makePairCandidate(rng, 8, 80, 0, 1));   // below even relaxed
  cands.push_back(makePairCandidate(rng, 30, 60, 0, 2));  // relaxed only
  const auto pick = selectInitialPair(cands, intr);
  ASSERT_TRUE(pick.has_value());
  EXPECT_EQ(pick->second, 2);
}

TEST(InitialPair, DegenerateRotationCandidatesSkipped) {
  const CameraIntrinsics intr = testIntrinsics();
  SeededRng rng(703, "initpair");
  std::vector<InitialPairCandidate> cands;
  auto good = makePairCandidate(rng, 90, 80, 0, 1);
  good.rotation_degenerate = true;
  cands.push_back(good);
  cands.push_back(makePairCandidate(rng, 65, 40, 0, 2));
  const auto pick = selectInitialPair(cands, intr);
  ASSERT_TRUE(pick.has_value());
  EXPECT_EQ(pick->second, 2);
}

}  // namespace
}  // namespace otf
