// Command-line front end: train-tree, run, bench, export.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "otf/bench.hpp"
#include "otf/config.hpp"
#include "otf/image.hpp"
#include "otf/ingest.hpp"
#include "otf/pipeline.hpp"
#include "otf/synthbench.hpp"
#include "otf/vocab_tree.hpp"

namespace {

int cmdTrainTree(const std::string& images_dir, const std::string& out_path,
                 const std::string& descriptor_provider, int branching, int depth, int dim,
                 uint64_t seed) {
  otf::DirectoryWatcher watcher(images_dir);
  const auto paths = watcher.poll();
  if (paths.size() < 2) {
    std::cerr << "train-tree: need at least 2 images in " << images_dir << "\n";
    return 1;
  }
  std::vector<std::vector<float>> descs;
  for (const auto& p : paths) {
    if (descriptor_provider == "sidecar") {
      descs.push_back(otf::loadSidecarDescriptor(p, dim));
    } else {
      descs.push_back(otf::extractGlobalDescriptor(otf::readImage(p)));
    }
  }
  otf::VocabTree tree = otf::VocabTree::train(descs, branching, depth, seed);
  tree.save(out_path);
  std::cout << "trained on " << descs.size() << " descriptors, " << tree.nodes().size()
            << " nodes -> " << out_path << "\n";
  return 0;
}

int cmdRun(const otf::PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  otf::Pipeline pipe(cfg);
  pipe.logger().open(cfg.out_dir + "/run.log", cfg.log_level);

  auto handle = [&](const std::string& name, otf::ImageU8 img) {
    const auto report = pipe.processImage(std::move(img), name);
    std::cout << "frame " << report.frame_id << " (" << name << "): "
              << (report.registered ? "registered"
                                    : report.awaiting_initialization ? "awaiting initialization"
                                                                     : "rejected")
              << ", points=" << report.n_points_total << ", mre=" << report.mre << ", "
              << report.timings.total_ms << " ms\n";
  };

  if (cfg.source.rfind("dir:", 0) == 0) {
    otf::DirectoryWatcher watcher(cfg.source.substr(4));
    watcher.run([&](const std::string& path) {
      try {
        handle(path, otf::readImage(path));
      } catch (const std::exception& e) {
        std::cerr << "skipping " << path << ": " << e.what() << "\n";
      }
    });
  } else if (cfg.source.rfind("tcp:", 0) == 0) {
    const std::string rest = cfg.source.substr(4);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) {
      std::cerr << "run: tcp source must be tcp:HOST:PORT\n";
      return 1;
    }
    const uint16_t port = uint16_t(std::stoi(rest.substr(colon + 1)));
    otf::serveFrames(port, [&](const std::string& name, std::vector<uint8_t> payload) {
      try {
        handle(name, otf::decodeImage(payload, name));
      } catch (const std::exception& e) {
        std::cerr << "skipping " << name << ": " << e.what() << "\n";
      }
    });
  } else {
    std::cerr << "run: --source must be dir:PATH or tcp:HOST:PORT\n";
    return 1;
  }

  if (cfg.global_ba_at_end) pipe.globalBaAtEnd();
  pipe.exportOutputs(cfg.out_dir);
  pipe.writeTimingsCsv(cfg.out_dir + "/timings.csv");
  pipe.scene().saveSnapshot(cfg.out_dir + "/scene.bin", pipe.intrinsics());
  std::cout << "registered " << pipe.scene().numRegistered() << " frames, "
            << pipe.scene().points().size() << " points -> " << cfg.out_dir << "\n";
  return 0;
}

int cmdBench(const std::string& out_dir, int cameras, int points, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  otf::SceneSpec spec;
  spec.num_cameras = cameras;
  spec.num_points = points;
  const auto scene = otf::SyntheticScene::generate(spec, seed);
  const std::string stream_dir = out_dir + "/stream";
  otf::StreamOptions stream_opt;
  const auto paths = otf::writeStreamDirectory(scene, stream_dir, stream_opt, seed);
  std::cout << "stream: " << paths.size() << " frames in " << stream_dir << "\n";

  const auto summaries = otf::benchBaModes(scene, paths, seed);
  otf::writeBaModesCsv(summaries, out_dir + "/ba_modes.csv");
  otf::writeEvalReportCsv(summaries, out_dir + "/eval_report.csv");
  for (const auto& s : summaries)
    std::cout << s.mode << ": amre=" << s.amre << " mfre=" << s.mfre << " mtl=" << s.mtl
              << " rot_disc=" << s.rotation_discrepancy << " deg, registered=" << s.registered
              << "/" << cameras << ", " << s.total_ms << " ms\n";

  const auto scaling = otf::benchRetrievalScaling();
  otf::writeRetrievalScalingCsv(scaling, out_dir + "/retrieval_scaling.csv");
  std::cout << "retrieval scaling: " << scaling.front().tree_us << " us/query at "
            << scaling.front().n_indexed << " indexed, " << scaling.back().tree_us
            << " us/query at " << scaling.back().n_indexed << " indexed\n";
  return 0;
}

int cmdExport(const std::string& snapshot, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto [scene, intr] = otf::SceneGraph::loadSnapshot(snapshot);
  scene.exportPly(out_dir + "/cloud.ply");
  scene.exportPoses(out_dir + "/poses.txt");
  scene.exportStatsCsv(out_dir + "/stats.csv", intr);
  std::cout << "exported " << scene.points().size() << " points, " << scene.numRegistered()
            << " poses -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"On-the-fly incremental structure from motion"};
  app.require_subcommand(1);

  // train-tree
  auto* train = app.add_subcommand("train-tree", "Train a vocabulary tree from an image directory");
  std::string train_images, train_out = "tree.bin", train_desc = "builtin";
  int train_branching = 5, train_depth = 5, train_dim = 256;
  uint64_t train_seed = 0;
  train->add_option("--images", train_images, "Directory of PNG/PGM images")->required();
  train->add_option("--out", train_out, "Output tree path");
  train->add_option("--descriptor", train_desc, "builtin|sidecar");
  train->add_option("--branching", train_branching);
  train->add_option("--depth", train_depth);
  train->add_option("--dim", train_dim, "Descriptor dimension (sidecar only)");
  train->add_option("--seed", train_seed);

  // run
  auto* run = app.add_subcommand("run", "Process an image stream");
  std::string run_config, run_source, run_out, run_desc, run_feat, run_tree, run_log;
  uint64_t run_seed = 0;
  bool run_global_ba = false;
  run->add_option("--config", run_config, "Config file (key = value lines)");
  run->add_option("--source", run_source, "dir:PATH or tcp:HOST:PORT");
  run->add_option("--out", run_out, "Output directory");
  run->add_option("--seed", run_seed);
  run->add_option("--descriptor", run_desc, "builtin|sidecar");
  run->add_option("--features", run_feat, "builtin|sidecar");
  run->add_option("--tree", run_tree, "Pretrained vocabulary tree");
  run->add_option("--log-level", run_log, "info|debug");
  run->add_flag("--global-ba-at-end", run_global_ba, "Global BA after the stream ends");

  // bench
  auto* bench = app.add_subcommand("bench", "Synthetic benchmarks (BA modes, retrieval scaling)");
  std::string bench_out = "bench_out";
  int bench_cameras = 40, bench_points = 500;
  uint64_t bench_seed = 7;
  bench->add_option("--out", bench_out, "Output directory");
  bench->add_option("--cameras", bench_cameras);
  bench->add_option("--points", bench_points);
  bench->add_option("--seed", bench_seed);

  // export
  auto* exp = app.add_subcommand("export", "Re-export artifacts from a run snapshot");
  std::string exp_snapshot, exp_out = "export_out";
  exp->add_option("--snapshot", exp_snapshot, "scene.bin from a previous run")->required();
  exp->add_option("--out", exp_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmdTrainTree(train_images, train_out, train_desc, train_branching, train_depth,
                          train_dim, train_seed);
    if (run->parsed()) {
      std::map<std::string, std::string> overrides;
      if (run->count("--source")) overrides["source"] = run_source;
      if (run->count("--out")) overrides["out_dir"] = run_out;
      if (run->count("--seed")) overrides["seed"] = std::to_string(run_seed);
      if (run->count("--descriptor")) overrides["descriptor_provider"] = run_desc;
      if (run->count("--features")) overrides["feature_provider"] = run_feat;
      if (run->count("--tree")) overrides["tree_path"] = run_tree;
      if (run->count("--log-level")) overrides["log_level"] = run_log;
      if (run_global_ba) overrides["global_ba_at_end"] = "true";
      otf::PipelineConfig cfg = otf::loadConfig(run_config, overrides);
      if (cfg.source.empty()) {
        std::cerr << "run: --source (or source= in the config) is required\n";
        return 1;
      }
      return cmdRun(cfg);
    }
    if (bench->parsed()) return cmdBench(bench_out, bench_cameras, bench_points, bench_seed);
    if (exp->parsed()) return cmdExport(exp_snapshot, exp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
