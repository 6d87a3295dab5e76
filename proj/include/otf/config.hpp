#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace otf {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every tunable of the pipeline. Defaults mirror the documented running
// parameters (tree 5x5, top-30 retrieval, 15x15 LSM window, top-8 BA
// neighbors, k=2).
struct PipelineConfig {
  // Retrieval / vocabulary tree.
  int descriptor_dim = 256;
  int tree_branching = 5;
  int tree_depth = 5;
  int retrieval_top_n = 30;

  // Local features.
  int max_features = 2000;
  double match_ratio = 0.8;

  // LSM.
  int lsm_window = 15;
  int lsm_max_iters = 20;
  double lsm_rmse_reject = 20.0;
  bool densify = true;

  // Two-view geometry and registration.
  double ransac_threshold_px = 4.0;
  int nf_min_inliers = 15;
  int nh_min_inliers = 15;
  int min_pnp_inliers = 12;
  double pnp_threshold_px = 4.0;
  double gric_sigma = 1.0;
  int ransac_max_iters = 2000;
  double ransac_confidence = 0.99;
  double tri_threshold_px = 4.0;
  double tri_min_angle_deg = 1.5;

  // Bundle adjustment.
  int ba_top_n = 8;
  int ba_tree_depth = 4;
  double ba_weight_k = 2.0;
  double huber_width_px = 2.0;
  bool global_ba_at_end = false;

  // Pipeline behavior.
  int init_buffer_max = 10;
  int retry_after_frames = 20;
  double frame_budget_ms = 0.0;  // 0 disables the per-frame candidate budget

  // Camera (single shared intrinsics per run).
  double cam_fx = 500.0, cam_fy = 500.0;
  double cam_cx = 320.0, cam_cy = 240.0;
  int cam_width = 640, cam_height = 480;
  double cam_k1 = 0.0, cam_k2 = 0.0;

  // Run setup.
  uint64_t seed = 0;
  std::string descriptor_provider = "builtin";  // builtin | sidecar
  std::string feature_provider = "builtin";     // builtin | sidecar
  std::string source;                           // dir:PATH | tcp:HOST:PORT
  std::string out_dir = "out";
  std::string tree_path;
  std::string log_level = "info";
};

namespace detail {

struct ConfigField {
  enum Kind { kInt, kDouble, kBool, kString, kU64 } kind;
  void* ptr;
  double lo = 0, hi = 0;  // numeric range (inclusive); unused for strings/bools
  bool odd_only = false;
};

inline std::map<std::string, ConfigField> configFields(PipelineConfig& c) {
  using F = ConfigField;
  return {
      {"descriptor_dim", {F::kInt, &c.descriptor_dim, 4, 4096}},
      {"tree_branching", {F::kInt, &c.tree_branching, 2, 64}},
      {"tree_depth", {F::kInt, &c.tree_depth, 1, 12}},
      {"retrieval_top_n", {F::kInt, &c.retrieval_top_n, 1, 1000}},
      {"max_features", {F::kInt, &c.max_features, 8, 100000}},
      {"match_ratio", {F::kDouble, &c.match_ratio, 0.1, 1.0}},
      {"lsm_window", {F::kInt, &c.lsm_window, 5, 63, true}},
      {"lsm_max_iters", {F::kInt, &c.lsm_max_iters, 1, 200}},
      {"lsm_rmse_reject", {F::kDouble, &c.lsm_rmse_reject, 0.1, 255.0}},
      {"densify", {F::kBool, &c.densify}},
      {"ransac_threshold_px", {F::kDouble, &c.ransac_threshold_px, 0.01, 100.0}},
      {"nf_min_inliers", {F::kInt, &c.nf_min_inliers, 8, 10000}},
      {"nh_min_inliers", {F::kInt, &c.nh_min_inliers, 4, 10000}},
      {"min_pnp_inliers", {F::kInt, &c.min_pnp_inliers, 4, 10000}},
      {"pnp_threshold_px", {F::kDouble, &c.pnp_threshold_px, 0.01, 100.0}},
      {"gric_sigma", {F::kDouble, &c.gric_sigma, 0.01, 100.0}},
      {"ransac_max_iters", {F::kInt, &c.ransac_max_iters, 1, 1000000}},
      {"ransac_confidence", {F::kDouble, &c.ransac_confidence, 0.5, 0.999999}},
      {"tri_threshold_px", {F::kDouble, &c.tri_threshold_px, 0.01, 100.0}},
      {"tri_min_angle_deg", {F::kDouble, &c.tri_min_angle_deg, 0.0, 90.0}},
      {"ba_top_n", {F::kInt, &c.ba_top_n, 1, 1000}},
      {"ba_tree_depth", {F::kInt, &c.ba_tree_depth, 1, 16}},
      {"ba_weight_k", {F::kDouble, &c.ba_weight_k, 1.000001, 1000.0}},
      {"huber_width_px", {F::kDouble, &c.huber_width_px, 0.01, 100.0}},
      {"global_ba_at_end", {F::kBool, &c.global_ba_at_end}},
      {"init_buffer_max", {F::kInt, &c.init_buffer_max, 2, 1000}},
      {"retry_after_frames", {F::kInt, &c.retry_after_frames, 1, 100000}},
      {"frame_budget_ms", {F::kDouble, &c.frame_budget_ms, 0.0, 1e9}},
      {"cam_fx", {F::kDouble, &c.cam_fx, 1e-6, 1e9}},
      {"cam_fy", {F::kDouble, &c.cam_fy, 1e-6, 1e9}},
      {"cam_cx", {F::kDouble, &c.cam_cx, 0.0, 1e9}},
      {"cam_cy", {F::kDouble, &c.cam_cy, 0.0, 1e9}},
      {"cam_width", {F::kInt, &c.cam_width, 1, 100000}},
      {"cam_height", {F::kInt, &c.cam_height, 1, 100000}},
      {"cam_k1", {F::kDouble, &c.cam_k1, -10.0, 10.0}},
      {"cam_k2", {F::kDouble, &c.cam_k2, -10.0, 10.0}},
      {"seed", {F::kU64, &c.seed}},
      {"descriptor_provider", {F::kString, &c.descriptor_provider}},
      {"feature_provider", {F::kString, &c.feature_provider}},
      {"source", {F::kString, &c.source}},
      {"out_dir", {F::kString, &c.out_dir}},
      {"tree_path", {F::kString, &c.tree_path}},
      {"log_level", {F::kString, &c.log_level}},
  };
}

inline void setField(const std::string& key, const ConfigField& f, const std::string& value) {
  try {
    switch (f.kind) {
      case ConfigField::kInt: {
        const long v = std::stol(value);
        if (v < f.lo || v > f.hi)
          throw ConfigError(key + " = " + value + " out of range [" + std::to_string(long(f.lo)) +
                            ", " + std::to_string(long(f.hi)) + "]");
        if (f.odd_only && v % 2 == 0) throw ConfigError(key + " must be odd, got " + value);
        *static_cast<int*>(f.ptr) = int(v);
        break;
      }
      case ConfigField::kDouble: {
        const double v = std::stod(value);
        if (v < f.lo || v > f.hi)
          throw ConfigError(key + " = " + value + " out of range [" + std::to_string(f.lo) + ", " +
                            std::to_string(f.hi) + "]");
        *static_cast<double*>(f.ptr) = v;
        break;
      }
      case ConfigField::kBool: {
        if (value == "true" || value == "1")
          *static_cast<bool*>(f.ptr) = true;
        else if (value == "false" || value == "0")
          *static_cast<bool*>(f.ptr) = false;
        else
          throw ConfigError(key + " must be true/false, got " + value);
        break;
      }
      case ConfigField::kU64:
        *static_cast<uint64_t*>(f.ptr) = std::stoull(value);
        break;
      case ConfigField::kString:
        *static_cast<std::string*>(f.ptr) = value;
        break;
    }
  } catch (const std::invalid_argument&) {
    throw ConfigError("cannot parse value for " + key + ": " + value);
  } catch (const std::out_of_range&) {
    throw ConfigError("value out of range for " + key + ": " + value);
  }
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void validateConfig(const PipelineConfig& c) {
  if (c.descriptor_provider != "builtin" && c.descriptor_provider != "sidecar")
    throw ConfigError("descriptor_provider must be builtin or sidecar");
  if (c.feature_provider != "builtin" && c.feature_provider != "sidecar")
    throw ConfigError("feature_provider must be builtin or sidecar");
  if (c.cam_cx <= 0 || c.cam_cx >= c.cam_width || c.cam_cy <= 0 || c.cam_cy >= c.cam_height)
    throw ConfigError("principal point must lie inside the image");
}

// Parse `key = value` lines; '#' starts a comment; unknown keys are hard
// errors. `overrides` (from CLI --key value flags) take precedence.
inline PipelineConfig loadConfig(const std::string& path,
                                 const std::map<std::string, std::string>& overrides = {}) {
  PipelineConfig cfg;
  auto fields = detail::configFields(cfg);
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      auto it = fields.find(key);
      if (it == fields.end())
        throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      detail::setField(key, it->second, value);
    }
  }
  for (const auto& [key, value] : overrides) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown override key '" + key + "'");
    detail::setField(key, it->second, value);
  }
  validateConfig(cfg);
  return cfg;
}

inline std::string serializeConfig(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  auto fields = detail::configFields(copy);
  std::ostringstream out;
  out.precision(17);
  for (const auto& [key, f] : fields) {
    out << key << " = ";
    switch (f.kind) {
      case detail::ConfigField::kInt: out << *static_cast<int*>(f.ptr); break;
      case detail::ConfigField::kDouble: out << *static_cast<double*>(f.ptr); break;
      case detail::ConfigField::kBool: out << (*static_cast<bool*>(f.ptr) ? "true" : "false"); break;
      case detail::ConfigField::kU64: out << *static_cast<uint64_t*>(f.ptr); break;
      case detail::ConfigField::kString: out << *static_cast<std::string*>(f.ptr); break;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace otf
