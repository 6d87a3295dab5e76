#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "otf/image.hpp"

namespace otf {

struct DescriptorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Baseline global descriptor: 16x16 mean-pooled intensities, L2-normalized.
// Deliberately simple; the learned extractor it stands in for is supplied via
// sidecar files when available.
inline std::vector<float> extractGlobalDescriptor(const ImageU8& img) {
  if (img.empty()) throw DescriptorError("extractGlobalDescriptor: empty raster");
  constexpr int kGrid = 16;
  std::vector<double> pooled(kGrid * kGrid, 0.0);
  std::vector<int64_t> counts(kGrid * kGrid, 0);
  for (int y = 0; y < img.height(); ++y) {
    const int gy = std::min(kGrid - 1, y * kGrid / img.height());
    for (int x = 0; x < img.width(); ++x) {
      const int gx = std::min(kGrid - 1, x * kGrid / img.width());
      pooled[gy * kGrid + gx] += img.at(x, y);
      counts[gy * kGrid + gx] += 1;
    }
  }
  double norm_sq = 0;
  for (int i = 0; i < kGrid * kGrid; ++i) {
    pooled[i] = counts[i] ? pooled[i] / double(counts[i]) : 0.0;
    norm_sq += pooled[i] * pooled[i];
  }
  const double inv = norm_sq > 0 ? 1.0 / std::sqrt(norm_sq) : 0.0;
  std::vector<float> out(kGrid * kGrid);
  for (int i = 0; i < kGrid * kGrid; ++i) out[i] = float(pooled[i] * inv);
  return out;
}

// Sidecar provider: `<image>.gdesc` holds D little-endian f64 values.
inline std::vector<float> loadSidecarDescriptor(const std::string& image_path, int expected_dim) {
  const std::string path = image_path + ".gdesc";
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DescriptorError("descriptor unavailable: " + path);
  const auto bytes = in.tellg();
  if (bytes != std::streamoff(sizeof(double)) * expected_dim)
    throw DescriptorError("descriptor dimension mismatch in " + path + ": expected " +
                          std::to_string(expected_dim) + " values");
  in.seekg(0);
  std::vector<double> raw(expected_dim);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(sizeof(double) * expected_dim));
  if (!in) throw DescriptorError("truncated descriptor file: " + path);
  std::vector<float> out(expected_dim);
  double norm_sq = 0;
  for (int i = 0; i < expected_dim; ++i) norm_sq += raw[i] * raw[i];
  const double inv = norm_sq > 0 ? 1.0 / std::sqrt(norm_sq) : 0.0;
  for (int i = 0; i < expected_dim; ++i) out[i] = float(raw[i] * inv);
  return out;
}

inline void saveSidecarDescriptor(const std::string& image_path, const std::vector<double>& values) {
  std::ofstream out(image_path + ".gdesc", std::ios::binary);
  if (!out) throw DescriptorError("cannot write " + image_path + ".gdesc");
  out.write(reinterpret_cast<const char*>(values.data()),
            std::streamsize(sizeof(double) * values.size()));
}

}  // namespace otf
