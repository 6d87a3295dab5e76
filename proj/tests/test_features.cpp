#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "otf/descriptor.hpp"
#include "otf/features.hpp"
#include "otf/rng.hpp"
#include "otf/synthbench.hpp"

namespace otf {
namespace {

// Smooth high-texture pattern; identical content under integer crops.
ImageU8 texturedPattern(int w, int h, int offset_x = 0, int offset_y = 0) {
  ImageU8 img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = x + offset_x, gy = y + offset_y;
      double v = 127 + 55 * std::sin(gx * 0.31) * std::cos(gy * 0.23) +
                 40 * std::sin(gx * 0.083 + gy * 0.127) + 28 * std::cos(gx * 0.53 - gy * 0.41) +
                 35 * std::sin(gx * gy * 7.3e-4) + 20 * std::cos(gx * gx * 3.1e-4 - gy * 0.05);
      img.at(x, y) = uint8_t(std::clamp(v, 0.0, 255.0));
    }
  }
  return img;
}

ImageU8 checkerboard(int w, int h, int cell) {
  ImageU8 img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = (((x / cell) + (y / cell)) & 1) ? 220 : 35;
  return img;
}

TEST(Features, RejectsTinyImages) {
  EXPECT_THROW(detectAndDescribe(ImageU8(32, 32, 0), 100), FeatureError);
}

TEST(Features, FlatImageYieldsNoKeypoints) {
  EXPECT_TRUE(detectAndDescribe(ImageU8(128, 128, 77), 100).empty());
}

TEST(Features, MaxFeaturesCapRespected) {
  const auto kps = detectAndDescribe(texturedPattern(256, 256), 50);
  EXPECT_LE(kps.size(), 50u);
  EXPECT_GE(kps.size(), 30u);
}

TEST(Features, CheckerboardCornersWithinOnePixel) {
  const int cell = 16;
  const auto img = checkerboard(192, 192, cell);
  const auto kps = detectAndDescribe(img, 500);
  ASSERT_GE(kps.size(), 20u);
  // Ground truth: interior cell junctions; pixel centers put the junction at
  // (k*cell - 0.5).
  int covered = 0, interior = 0;
  for (int jy = 1; jy * cell < 192 - 8; ++jy) {
    for (int jx = 1; jx * cell < 192 - 8; ++jx) {
      const double gx = jx * cell - 0.5, gy = jy * cell - 0.5;
      if (gx < 10 || gy < 10 || gx > 181 || gy > 181) continue;
      ++interior;
      for (const auto& kp : kps) {
        if (std::hypot(kp.x - gx, kp.y - gy) <= 1.0) {
          ++covered;
          break;
        }
      }
    }
  }
  ASSERT_GT(interior, 0);
  EXPECT_GE(double(covered) / interior, 0.9) << covered << "/" << interior;
}

TEST(Features, DescriptorsAreUnitNorm) {
  const auto kps = detectAndDescribe(texturedPattern(256, 256), 100);
  ASSERT_FALSE(kps.empty());
  for (const auto& kp : kps) {
    double norm = 0;
    for (float v : kp.descriptor) norm += double(v) * v;
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-5);
  }
}

TEST(Features, TranslatedPairMatchesRecoverOffset) {
  const int dx = 17, dy = 9;
  const auto big = texturedPattern(320, 320);
  const auto a = texturedPattern(256, 256, 0, 0);
  const auto b = texturedPattern(256, 256, dx, dy);
  const auto kps_a = detectAndDescribe(a, 300);
  const auto kps_b = detectAndDescribe(b, 300);
  const auto matches = matchDescriptors(kps_a, kps_b, 0.8);
  ASSERT_GE(matches.size(), 30u);
  int correct = 0;
  for (const auto& [i, j] : matches) {
    const double ex = kps_a[i].x - dx, ey = kps_a[i].y - dy;
    if (std::hypot(kps_b[j].x - ex, kps_b[j].y - ey) < 1.5) ++correct;
  }
  EXPECT_GE(double(correct) / double(matches.size()), 0.9);
}

TEST(Features, MatchingIsMutualAndOneToOne) {
  const auto a = texturedPattern(256, 256, 0, 0);
  const auto b = texturedPattern(256, 256, 5, 3);
  const auto kps_a = detectAndDescribe(a, 200);
  const auto kps_b = detectAndDescribe(b, 200);
  const auto matches = matchDescriptors(kps_a, kps_b, 0.8);
  std::set<int> left, right;
  for (const auto& [i, j] : matches) {
    EXPECT_TRUE(left.insert(i).second);
    EXPECT_TRUE(right.insert(j).second);
  }
}

TEST(Features, SidecarRoundTrip) {
  const auto kps = detectAndDescribe(texturedPattern(128, 128), 50);
  ASSERT_FALSE(kps.empty());
  const std::string img_path =
      (std::filesystem::temp_directory_path() / "otf_feat_rt.pgm").string();
  saveSidecarFeatures(img_path, kps);
  const auto back = loadSidecarFeatures(img_path);
  ASSERT_EQ(back.size(), kps.size());
  for (size_t i = 0; i < kps.size(); ++i) {
    EXPECT_NEAR(back[i].x, kps[i].x, 1e-5);
    EXPECT_NEAR(back[i].y, kps[i].y, 1e-5);
    ASSERT_EQ(back[i].descriptor.size(), kps[i].descriptor.size());
    for (size_t k = 0; k < kps[i].descriptor.size(); ++k)
      EXPECT_EQ(back[i].descriptor[k], kps[i].descriptor[k]);
  }
  std::filesystem::remove(img_path + ".feat");
}

TEST(Features, MissingSidecarThrows) {
  EXPECT_THROW(loadSidecarFeatures("/no/such/image.pgm"), std::runtime_error);
}

TEST(GlobalDescriptor, UniformRasterGivesUniformVector) {
  const auto d = extractGlobalDescriptor(ImageU8(64, 64, 200));
  ASSERT_EQ(d.size(), 256u);
  for (float v : d) EXPECT_NEAR(v, 1.0f / 16.0f, 1e-6);
}

TEST(GlobalDescriptor, UnitNorm) {
  const auto d = extractGlobalDescriptor(texturedPattern(160, 120));
  double norm = 0;
  for (float v : d) norm += double(v) * v;
  EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6);
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0;
  for (size_t i = 0; i < a.size(); ++i) dot += double(a[i]) * b[i];
  return dot;
}

TEST(GlobalDescriptor, NearbyViewsMoreSimilarThanDifferentScene) {
  SceneSpec spec;
  spec.num_cameras = 12;
  spec.num_points = 50;
  const auto scene_a = SyntheticScene::generate(spec, 21);
  const auto scene_b = SyntheticScene::generate(spec, 99);
  const auto d0 = extractGlobalDescriptor(scene_a.render(0));
  const auto d1 = extractGlobalDescriptor(scene_a.render(1));
  const auto dx = extractGlobalDescriptor(scene_b.render(6));
  EXPECT_GT(cosine(d0, d1), cosine(d0, dx));
}

TEST(GlobalDescriptor, SidecarRoundTrip) {
  const auto d = extractGlobalDescriptor(texturedPattern(96, 96));
  const std::string img_path =
      (std::filesystem::temp_directory_path() / "otf_gdesc_rt.pgm").string();
  std::vector<double> gd(d.begin(), d.end());
  saveSidecarDescriptor(img_path, gd);
  const auto back = loadSidecarDescriptor(img_path, 256);
  ASSERT_EQ(back.size(), d.size());
  for (size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(back[i], d[i], 1e-7);
  EXPECT_THROW(loadSidecarDescriptor(img_path, 128), std::runtime_error);
  std::filesystem::remove(img_path + ".gdesc");
}

}  // namespace
}  // namespace otf
