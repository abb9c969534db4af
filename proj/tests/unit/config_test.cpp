#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "pearl/config.hpp"
#include "pearl/error.hpp"

using namespace pearl;

TEST(RunConfig, ScheduleDefaults) {
  const RunConfig c;
  EXPECT_EQ(c.epochs, 10u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.spa.depth, 2u);
  EXPECT_EQ(c.spa.prompt_length, 4u);
  EXPECT_EQ(c.spa.pool_size, 20u);
  EXPECT_EQ(c.backbone.d, 32u);
  EXPECT_EQ(c.stream.num_sessions, 5u);
  EXPECT_EQ(c.stream.classes_per_session, 4u);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.epochs = 3;
  c.alpha_mode = AlphaMode::kFixed;
  c.fixed_alpha = 0.6;
  c.nka.gamma = 0.8;
  c.reseed(42);
  const nlohmann::json j = c;
  const RunConfig back = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(RunConfig, ReseedChangesComponentSeeds) {
  RunConfig a, b;
  b.reseed(2);
  EXPECT_NE(a.backbone.seed, b.backbone.seed);
  EXPECT_NE(a.stream.seed, b.stream.seed);
  RunConfig c;
  c.reseed(2);
  EXPECT_EQ(nlohmann::json(b), nlohmann::json(c));
}

TEST(RunConfig, DepthMustMatchPrefixedBlocks) {
  RunConfig c;
  c.spa.depth = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfig, BadAlphaModeIsConfigError) {
  const auto j = nlohmann::json::parse(R"({"alpha_mode": "sometimes"})");
  EXPECT_THROW(j.get<RunConfig>(), ConfigError);
}

TEST(RunConfig, LoadFromFile) {
  const auto p = std::filesystem::temp_directory_path() / "pearl_cfg.json";
  std::ofstream(p) << R"({"epochs": 4, "seed": 9, "nka": {"alpha0": 0.7}})";
  const RunConfig c = load_run_config(p);
  RunConfig ref;
  ref.reseed(9);
  EXPECT_EQ(c.epochs, 4u);
  EXPECT_EQ(c.nka.alpha0, 0.7);
  EXPECT_EQ(c.backbone.seed, ref.backbone.seed);
  std::filesystem::remove(p);
  EXPECT_THROW(load_run_config(p), ConfigError);
}
