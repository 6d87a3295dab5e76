#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "otf/core.hpp"
#include "otf/image.hpp"

namespace otf {

struct FeatureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TwoViewModel;  // geometry.hpp

struct MatchPair {
  FrameId frame_a = -1, frame_b = -1;  // a < b
  std::vector<std::pair<int, int>> pairs;
  bool verified = false;
  std::shared_ptr<TwoViewModel> model;
};

namespace detail {

struct FloatImage {
  int w = 0, h = 0;
  std::vector<float> v;
  float at(int x, int y) const { return v[size_t(y) * w + x]; }
  float& at(int x, int y) { return v[size_t(y) * w + x]; }

  double sample(double x, double y) const {
    int x0 = int(x), y0 = int(y);
    x0 = std::clamp(x0, 0, w - 2);
    y0 = std::clamp(y0, 0, h - 2);
    const double fx = x - x0, fy = y - y0;
    return (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
           fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
  }
};

inline FloatImage toFloat(const ImageU8& img) {
  FloatImage f{img.width(), img.height(), {}};
  f.v.resize(size_t(f.w) * f.h);
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) f.at(x, y) = float(img.at(x, y));
  return f;
}

inline FloatImage halfSize(const FloatImage& in) {
  FloatImage out{in.w / 2, in.h / 2, {}};
  out.v.resize(size_t(out.w) * out.h);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.at(x, y) = 0.25f * (in.at(2 * x, 2 * y) + in.at(2 * x + 1, 2 * y) +
                              in.at(2 * x, 2 * y + 1) + in.at(2 * x + 1, 2 * y + 1));
  return out;
}

// Separable box blur, radius 1; three passes approximate a Gaussian.
inline void boxBlur3(FloatImage& img) {
  FloatImage tmp = img;
  for (int y = 0; y < img.h; ++y)
    for (int x = 1; x < img.w - 1; ++x)
      tmp.at(x, y) = (img.at(x - 1, y) + img.at(x, y) + img.at(x + 1, y)) / 3.0f;
  for (int y = 1; y < img.h - 1; ++y)
    for (int x = 0; x < img.w; ++x)
      img.at(x, y) = (tmp.at(x, y - 1) + tmp.at(x, y) + tmp.at(x, y + 1)) / 3.0f;
}

struct RawCorner {
  double x, y, response;
  int octave;
};

inline void harrisOctave(const FloatImage& img, int octave, std::vector<RawCorner>& out) {
  const int w = img.w, h = img.h;
  if (w < 8 || h < 8) return;
  FloatImage ixx{w, h, std::vector<float>(size_t(w) * h, 0)};
  FloatImage iyy = ixx, ixy = ixx;
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const float gx = 0.5f * (img.at(x + 1, y) - img.at(x - 1, y));
      const float gy = 0.5f * (img.at(x, y + 1) - img.at(x, y - 1));
      ixx.at(x, y) = gx * gx;
      iyy.at(x, y) = gy * gy;
      ixy.at(x, y) = gx * gy;
    }
  }
  for (FloatImage* m : {&ixx, &iyy, &ixy}) {
    boxBlur3(*m);
    boxBlur3(*m);
    boxBlur3(*m);
  }
  FloatImage resp{w, h, std::vector<float>(size_t(w) * h, 0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float a = ixx.at(x, y), b = iyy.at(x, y), c = ixy.at(x, y);
      resp.at(x, y) = a * b - c * c - 0.04f * (a + b) * (a + b);
    }
  const int margin = 8;
  for (int y = margin; y < h - margin; ++y) {
    for (int x = margin; x < w - margin; ++x) {
      const float r = resp.at(x, y);
      if (r <= 1e-3f) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (resp.at(x + dx, y + dy) > r ||
              (resp.at(x + dx, y + dy) == r && (dy < 0 || (dy == 0 && dx < 0)))) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      // Subpixel peak by 1D quadratic fits.
      const double dxn = resp.at(x - 1, y), dxp = resp.at(x + 1, y);
      const double dyn = resp.at(x, y - 1), dyp = resp.at(x, y + 1);
      double sx = 0, sy = 0;
      const double denx = dxn - 2.0 * r + dxp, deny = dyn - 2.0 * r + dyp;
      if (std::abs(denx) > 1e-12) sx = std::clamp(0.5 * (dxn - dxp) / denx, -0.5, 0.5);
      if (std::abs(deny) > 1e-12) sy = std::clamp(0.5 * (dyn - dyp) / deny, -0.5, 0.5);
      const double scale_factor = double(1 << octave);
      out.push_back({(x + sx) * scale_factor, (y + sy) * scale_factor, double(r), octave});
    }
  }
}

inline double patchOrientation(const FloatImage& img, double x, double y, double step) {
  double hist[36] = {0};
  for (int j = -8; j < 8; ++j) {
    for (int i = -8; i < 8; ++i) {
      const double px = x + (i + 0.5) * step, py = y + (j + 0.5) * step;
      if (px < 1 || py < 1 || px > img.w - 2 || py > img.h - 2) continue;
      const double gx = 0.5 * (img.sample(px + 1, py) - img.sample(px - 1, py));
      const double gy = 0.5 * (img.sample(px, py + 1) - img.sample(px, py - 1));
      const double mag = std::sqrt(gx * gx + gy * gy);
      if (mag < 1e-9) continue;
      double ang = std::atan2(gy, gx);
      if (ang < 0) ang += 2 * M_PI;
      int bin = int(ang / (2 * M_PI) * 36) % 36;
      hist[bin] += mag;
    }
  }
  int best = 0;
  for (int b = 1; b < 36; ++b)
    if (hist[b] > hist[best]) best = b;
  return (best + 0.5) * 2 * M_PI / 36;
}

// 4x4 cells x 8 orientation bins over a rotated, scale-normalized 16x16 patch.
inline std::vector<float> patchDescriptor(const FloatImage& img, double x, double y, double step,
                                          double orientation) {
  const double ca = std::cos(orientation), sa = std::sin(orientation);
  double desc[128] = {0};
  for (int j = -8; j < 8; ++j) {
    for (int i = -8; i < 8; ++i) {
      const double u = (i + 0.5) * step, v = (j + 0.5) * step;
      const double px = x + ca * u - sa * v;
      const double py = y + sa * u + ca * v;
      if (px < 1 || py < 1 || px > img.w - 2 || py > img.h - 2) continue;
      double gx = 0.5 * (img.sample(px + 1, py) - img.sample(px - 1, py));
      double gy = 0.5 * (img.sample(px, py + 1) - img.sample(px, py - 1));
      // Rotate gradient into the keypoint frame.
      const double rgx = ca * gx + sa * gy;
      const double rgy = -sa * gx + ca * gy;
      const double mag = std::sqrt(rgx * rgx + rgy * rgy);
      if (mag < 1e-12) continue;
      double ang = std::atan2(rgy, rgx);
      if (ang < 0) ang += 2 * M_PI;
      const int cell = ((j + 8) / 4) * 4 + (i + 8) / 4;
      const int bin = int(ang / (2 * M_PI) * 8) % 8;
      desc[cell * 8 + bin] += mag;
    }
  }
  double norm = 0;
  for (double d : desc) norm += d * d;
  norm = std::sqrt(norm);
  if (norm < 1e-12) return std::vector<float>(128, 0.0f);
  for (auto& d : desc) d = std::min(d / norm, 0.2);
  norm = 0;
  for (double d : desc) norm += d * d;
  norm = std::sqrt(norm);
  std::vector<float> out(128);
  for (int i = 0; i < 128; ++i) out[i] = float(desc[i] / norm);
  return out;
}

}  // namespace detail

// Multi-scale Harris corners with gradient-histogram descriptors.
inline std::vector<Keypoint> detectAndDescribe(const ImageU8& img, int max_features = 2000) {
  if (img.width() < 64 || img.height() < 64)
    throw FeatureError("detectAndDescribe: raster below 64x64 minimum");
  std::vector<detail::FloatImage> pyramid;
  pyramid.push_back(detail::toFloat(img));
  for (int o = 1; o < 3; ++o) pyramid.push_back(detail::halfSize(pyramid.back()));

  std::vector<detail::RawCorner> corners;
  for (int o = 0; o < int(pyramid.size()); ++o) detail::harrisOctave(pyramid[o], o, corners);

  std::sort(corners.begin(), corners.end(), [](const auto& a, const auto& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (int(corners.size()) > max_features) corners.resize(max_features);

  std::vector<Keypoint> out;
  out.reserve(corners.size());
  const detail::FloatImage& base = pyramid[0];
  for (const auto& c : corners) {
    const double scale = double(1 << c.octave);
    Keypoint kp;
    kp.x = c.x;
    kp.y = c.y;
    kp.scale = scale;
    kp.orientation = detail::patchOrientation(base, c.x, c.y, scale);
    kp.descriptor = detail::patchDescriptor(base, c.x, c.y, scale, kp.orientation);
    double n = 0;
    for (float d : kp.descriptor) n += double(d) * d;
    if (n < 0.5) continue;  // flat patch, descriptor carries no signal
    out.push_back(std::move(kp));
  }
  return out;
}

// Mutual nearest neighbors passing the Lowe ratio test in both directions.
inline std::vector<std::pair<int, int>> matchDescriptors(const std::vector<Keypoint>& a,
                                                         const std::vector<Keypoint>& b,
                                                         double ratio = 0.8) {
  if (a.empty() || b.empty()) return {};
  auto bestTwo = [](const std::vector<Keypoint>& from, const std::vector<Keypoint>& to,
                    std::vector<int>& best_idx, std::vector<double>& best_d,
                    std::vector<double>& second_d) {
    best_idx.assign(from.size(), -1);
    best_d.assign(from.size(), std::numeric_limits<double>::infinity());
    second_d.assign(from.size(), std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < from.size(); ++i) {
      for (size_t j = 0; j < to.size(); ++j) {
        const double d = descriptorDistanceSq(from[i].descriptor, to[j].descriptor);
        if (d < best_d[i]) {
          second_d[i] = best_d[i];
          best_d[i] = d;
          best_idx[i] = int(j);
        } else if (d < second_d[i]) {
          second_d[i] = d;
        }
      }
    }
  };
  std::vector<int> ab_idx, ba_idx;
  std::vector<double> ab_d, ab_s, ba_d, ba_s;
  bestTwo(a, b, ab_idx, ab_d, ab_s);
  bestTwo(b, a, ba_idx, ba_d, ba_s);
  const double r2 = ratio * ratio;
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i < a.size(); ++i) {
    const int j = ab_idx[i];
    if (j < 0 || ba_idx[j] != int(i)) continue;
    if (!(ab_d[i] < r2 * ab_s[i])) continue;
    if (!(ba_d[j] < r2 * ba_s[j])) continue;
    out.emplace_back(int(i), j);
  }
  return out;
}

// Sidecar feature files: count u32, then per keypoint x,y,scale,orientation
// as f32 followed by 128 descriptor f32s.
inline std::vector<Keypoint> loadSidecarFeatures(const std::string& image_path) {
  const std::string path = image_path + ".feat";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureError("feature file unavailable: " + path);
  uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::vector<Keypoint> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    float rec[4];
    in.read(reinterpret_cast<char*>(rec), sizeof(rec));
    Keypoint kp;
    kp.x = rec[0];
    kp.y = rec[1];
    kp.scale = rec[2];
    kp.orientation = rec[3];
    kp.descriptor.resize(128);
    in.read(reinterpret_cast<char*>(kp.descriptor.data()), 128 * sizeof(float));
    out.push_back(std::move(kp));
  }
  if (!in) throw FeatureError("truncated feature file: " + path);
  return out;
}

inline void saveSidecarFeatures(const std::string& image_path, const std::vector<Keypoint>& kps) {
  std::ofstream out(image_path + ".feat", std::ios::binary);
  if (!out) throw FeatureError("cannot write " + image_path + ".feat");
  const uint32_t count = uint32_t(kps.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& kp : kps) {
    const float rec[4] = {float(kp.x), float(kp.y), float(kp.scale), float(kp.orientation)};
    out.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    out.write(reinterpret_cast<const char*>(kp.descriptor.data()), 128 * sizeof(float));
  }
}

}  // namespace otf
