#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "otf/config.hpp"

namespace otf {
namespace {

std::string writeTemp(const std::string& content) {
  static int counter = 0;
  const std::string path =
      (std::filesystem::temp_directory_path() / ("otf_cfg_" + std::to_string(counter++) + ".cfg"))
          .string();
  std::ofstream out(path);
  out << content;
  return path;
}

TEST(Config, EmptyFileYieldsDocumentedDefaults) {
  const std::string path = writeTemp("");
  const PipelineConfig cfg = loadConfig(path);
  EXPECT_EQ(cfg.retrieval_top_n, 30);
  EXPECT_EQ(cfg.lsm_window, 15);
  EXPECT_EQ(cfg.ba_top_n, 8);
  EXPECT_EQ(cfg.ba_weight_k, 2.0);
  EXPECT_EQ(cfg.tree_branching, 5);
  EXPECT_EQ(cfg.tree_depth, 5);
  EXPECT_EQ(cfg.ba_tree_depth, 4);
  EXPECT_EQ(cfg.max_features, 2000);
  EXPECT_EQ(cfg.match_ratio, 0.8);
  EXPECT_EQ(cfg.huber_width_px, 2.0);
  std::filesystem::remove(path);
}

TEST(Config, NoPathYieldsDefaults) {
  const PipelineConfig cfg = loadConfig("");
  EXPECT_EQ(cfg.retrieval_top_n, 30);
}

TEST(Config, ParsesValuesAndComments) {
  const std::string path = writeTemp(
      "# comment line\n"
      "retrieval_top_n = 12  # trailing comment\n"
      "\n"
      "match_ratio=0.7\n"
      "densify = false\n"
      "out_dir = /tmp/somewhere\n");
  const PipelineConfig cfg = loadConfig(path);
  EXPECT_EQ(cfg.retrieval_top_n, 12);
  EXPECT_EQ(cfg.match_ratio, 0.7);
  EXPECT_FALSE(cfg.densify);
  EXPECT_EQ(cfg.out_dir, "/tmp/somewhere");
  std::filesystem::remove(path);
}

TEST(Config, UnknownKeyIsHardError) {
  const std::string path = writeTemp("retreival_top_n = 12\n");
  try {
    loadConfig(path);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("retreival_top_n"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(":1"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Config, OutOfRangeNamesKeyAndRange) {
  const std::string path = writeTemp("match_ratio = 7.0\n");
  try {
    loadConfig(path);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("match_ratio"), std::string::npos);
    EXPECT_NE(msg.find("range"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Config, EvenLsmWindowRejected) {
  const std::string path = writeTemp("lsm_window = 14\n");
  EXPECT_THROW(loadConfig(path), ConfigError);
  std::filesystem::remove(path);
}

TEST(Config, OverridesBeatFileValues) {
  const std::string path = writeTemp("ba_weight_k = 4\n");
  const PipelineConfig cfg = loadConfig(path, {{"ba_weight_k", "3"}});
  EXPECT_EQ(cfg.ba_weight_k, 3.0);
  std::filesystem::remove(path);
}

TEST(Config, UnknownOverrideRejected) {
  EXPECT_THROW(loadConfig("", {{"nope", "1"}}), ConfigError);
}

TEST(Config, ProviderValidation) {
  EXPECT_THROW(loadConfig("", {{"feature_provider", "magic"}}), ConfigError);
  EXPECT_NO_THROW(loadConfig("", {{"feature_provider", "sidecar"}}));
}

TEST(Config, SerializeRoundTrip) {
  PipelineConfig cfg = loadConfig("", {{"retrieval_top_n", "17"},
                                       {"match_ratio", "0.75"},
                                       {"seed", "12345678901234"},
                                       {"out_dir", "abc"}});
  const std::string path = writeTemp(serializeConfig(cfg));
  const PipelineConfig back = loadConfig(path);
  EXPECT_EQ(back.retrieval_top_n, 17);
  EXPECT_EQ(back.match_ratio, 0.75);
  EXPECT_EQ(back.seed, 12345678901234ull);
  EXPECT_EQ(back.out_dir, "abc");
  EXPECT_EQ(serializeConfig(back), serializeConfig(cfg));
  std::filesystem::remove(path);
}

TEST(Config, MissingFileErrors) { EXPECT_THROW(loadConfig("/no/such/file.cfg"), ConfigError); }

}  // namespace
}  // namespace otf
