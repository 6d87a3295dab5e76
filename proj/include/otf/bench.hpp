#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "otf/pipeline.hpp"
#include "otf/synthbench.hpp"
#include "otf/vocab_tree.hpp"

namespace otf {

// ---------------------------------------------------------------------------
// Streaming a synthetic scene through the pipeline
// ---------------------------------------------------------------------------

struct StreamRunResult {
  std::vector<FrameReport> reports;
  EvalReport eval;
  double total_ms = 0;
};

inline PipelineConfig benchConfig(const SyntheticScene& scene, uint64_t seed) {
  PipelineConfig cfg;
  cfg.cam_fx = scene.intrinsics.fx;
  cfg.cam_fy = scene.intrinsics.fy;
  cfg.cam_cx = scene.intrinsics.cx;
  cfg.cam_cy = scene.intrinsics.cy;
  cfg.cam_width = scene.intrinsics.width;
  cfg.cam_height = scene.intrinsics.height;
  cfg.feature_provider = "sidecar";
  cfg.descriptor_provider = "builtin";
  cfg.seed = seed;
  return cfg;
}

// Trains a retrieval tree on the stream's global descriptors so every mode
// starts from the same vocabulary.
inline VocabTree trainStreamTree(const std::vector<std::string>& paths,
                                 const PipelineConfig& cfg) {
  std::vector<std::vector<float>> descs;
  for (const auto& p : paths) descs.push_back(loadSidecarDescriptor(p, cfg.descriptor_dim));
  return VocabTree::train(descs, cfg.tree_branching, cfg.tree_depth, cfg.seed);
}

inline StreamRunResult runStream(const SyntheticScene& scene,
                                 const std::vector<std::string>& paths,
                                 const PipelineConfig& cfg, BaMode mode) {
  const auto t0 = std::chrono::steady_clock::now();
  Pipeline pipe(cfg);
  pipe.setTree(trainStreamTree(paths, cfg));
  pipe.setBaMode(mode);
  for (const auto& p : paths) pipe.processImage(readImage(p), p);
  StreamRunResult out;
  out.reports = pipe.reports();
  out.total_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  out.eval = evaluate(pipe.scene(), scene, pipe.intrinsics());
  return out;
}

// ---------------------------------------------------------------------------
// BA-mode comparison
// ---------------------------------------------------------------------------

struct BaModeSummary {
  std::string mode;
  double amre = 0;  // mean of per-frame mean reprojection errors
  double mfre = 0;  // final mean reprojection error
  double mtl = 0;
  double rotation_discrepancy = 0;
  int registered = 0;
  double total_ms = 0;
  std::vector<double> per_frame_ba_ms;
  std::vector<double> per_frame_mre;
};

inline BaModeSummary summarizeRun(const std::string& mode, const StreamRunResult& run) {
  BaModeSummary s;
  s.mode = mode;
  double mre_sum = 0;
  int mre_n = 0;
  for (const auto& r : run.reports) {
    s.per_frame_ba_ms.push_back(r.timings.ba_ms);
    s.per_frame_mre.push_back(r.mre);
    if (r.registered && r.mre > 0) {
      mre_sum += r.mre;
      ++mre_n;
    }
    if (r.registered) ++s.registered;
  }
  s.amre = mre_n ? mre_sum / mre_n : 0;
  s.mfre = run.eval.mre;
  s.mtl = run.eval.mtl;
  s.rotation_discrepancy = run.eval.rotation_discrepancy;
  s.total_ms = run.total_ms;
  return s;
}

inline std::vector<BaModeSummary> benchBaModes(const SyntheticScene& scene,
                                               const std::vector<std::string>& paths,
                                               uint64_t seed) {
  const PipelineConfig cfg = benchConfig(scene, seed);
  std::vector<BaModeSummary> out;
  out.push_back(summarizeRun("local_weighted", runStream(scene, paths, cfg, BaMode::kLocalWeighted)));
  out.push_back(summarizeRun("combined", runStream(scene, paths, cfg, BaMode::kCombined)));
  out.push_back(summarizeRun("global", runStream(scene, paths, cfg, BaMode::kGlobal)));
  return out;
}

inline void writeBaModesCsv(const std::vector<BaModeSummary>& summaries, const std::string& path) {
  std::ofstream out(path);
  out << "mode,frame_index,ba_ms,mre\n";
  for (const auto& s : summaries)
    for (size_t i = 0; i < s.per_frame_ba_ms.size(); ++i) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%s,%zu,%.3f,%.6f\n", s.mode.c_str(), i,
                    s.per_frame_ba_ms[i], s.per_frame_mre[i]);
      out << buf;
    }
}

inline void writeEvalReportCsv(const std::vector<BaModeSummary>& summaries,
                               const std::string& path) {
  std::ofstream out(path);
  out << "mode,amre,mfre,mtl,rotation_discrepancy_deg,registered,total_ms\n";
  for (const auto& s : summaries) {
    char buf[240];
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.3f,%.6f,%d,%.1f\n", s.mode.c_str(), s.amre,
                  s.mfre, s.mtl, s.rotation_discrepancy, s.registered, s.total_ms);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Retrieval scaling: tree vs brute force as the index grows
// ---------------------------------------------------------------------------

struct RetrievalScalingRow {
  int n_indexed = 0;
  double tree_us = 0;   // mean per-query microseconds
  double brute_us = 0;
  double recall_at_30 = 0;  // tree results vs brute-force oracle
};

// Clustered descriptors: `n_clusters` random centers, Gaussian spread.
inline std::vector<std::vector<float>> makeClusteredDescriptors(int n, int dim, int n_clusters,
                                                                double spread, uint64_t seed) {
  SeededRng rng(seed, "clustered-desc");
  std::vector<std::vector<float>> centers(n_clusters, std::vector<float>(dim));
  for (auto& c : centers)
    for (auto& v : c) v = float(rng.uniform(0.0, 1.0));
  std::vector<std::vector<float>> out(n, std::vector<float>(dim));
  for (int i = 0; i < n; ++i) {
    const auto& c = centers[i % n_clusters];
    for (int d = 0; d < dim; ++d) out[i][d] = c[d] + float(spread * rng.normal());
  }
  return out;
}

inline std::vector<FrameId> bruteForceTopN(const std::vector<std::vector<float>>& indexed,
                                           const std::vector<float>& query, int n) {
  std::vector<std::pair<double, FrameId>> ranked;
  for (size_t i = 0; i < indexed.size(); ++i) {
    double d = 0;
    for (size_t k = 0; k < query.size(); ++k) {
      const double diff = double(indexed[i][k]) - query[k];
      d += diff * diff;
    }
    ranked.emplace_back(d, FrameId(i));
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<FrameId> out;
  for (int i = 0; i < std::min<int>(n, int(ranked.size())); ++i) out.push_back(ranked[i].second);
  return out;
}

inline std::vector<RetrievalScalingRow> benchRetrievalScaling(
    int max_indexed = 1000, int dim = 64, int n_queries = 50, uint64_t seed = 7) {
  // Index set and queries are drawn from the same planted clusters.
  auto descs = makeClusteredDescriptors(max_indexed + n_queries, dim, 10, 0.03, seed);
  const std::vector<std::vector<float>> queries(descs.end() - n_queries, descs.end());
  descs.resize(max_indexed);
  VocabTree tree = VocabTree::train(descs, 5, 5, seed);

  std::vector<RetrievalScalingRow> rows;
  int inserted = 0;
  std::vector<std::vector<float>> indexed;
  for (int target = 100; target <= max_indexed; target += 100) {
    for (; inserted < target; ++inserted) {
      tree.insertFrame(FrameId(inserted), descs[inserted]);
      indexed.push_back(descs[inserted]);
    }
    RetrievalScalingRow row;
    row.n_indexed = target;
    double matched = 0, total = 0;
    auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<std::pair<FrameId, double>>> tree_results;
    for (const auto& q : queries) tree_results.push_back(tree.retrieveTopN(q, 30));
    row.tree_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0)
                      .count() /
                  n_queries;
    t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<FrameId>> brute_results;
    for (const auto& q : queries) brute_results.push_back(bruteForceTopN(indexed, q, 30));
    row.brute_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0)
                       .count() /
                   n_queries;
    for (int qi = 0; qi < n_queries; ++qi) {
      std::set<FrameId> oracle(brute_results[qi].begin(), brute_results[qi].end());
      for (const auto& [id, d] : tree_results[qi]) matched += oracle.count(id);
      total += double(oracle.size());
    }
    row.recall_at_30 = total > 0 ? matched / total : 0;
    rows.push_back(row);
  }
  return rows;
}

inline void writeRetrievalScalingCsv(const std::vector<RetrievalScalingRow>& rows,
                                     const std::string& path) {
  std::ofstream out(path);
  out << "n_indexed,tree_us,brute_us,recall_at_30\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d,%.2f,%.2f,%.4f\n", r.n_indexed, r.tree_us, r.brute_us,
                  r.recall_at_30);
    out << buf;
  }
}

}  // namespace otf
