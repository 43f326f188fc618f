#include "kinediff/config.h"
#include "kinediff/errors.h"

#include <gtest/gtest.h>

namespace kinediff {
namespace {

TEST(Config, DefaultsFromEmptyObject) {
  const ExperimentConfig c = parse_config("{}");
  EXPECT_EQ(c.window.receptive_field, 27u);
  EXPECT_EQ(c.denoiser.frames, 27u);
  EXPECT_EQ(c.denoiser.joints, 17u);
  EXPECT_EQ(c.denoiser.channels, 64u);
  EXPECT_EQ(c.diffusion.T, 1000);
  EXPECT_EQ(c.loss.w_pos, 1.0);
  EXPECT_EQ(c.loss.w_temp, 0.0);
  EXPECT_EQ(c.optimizer.steps, 2000u);
}

TEST(Config, NestedValuesAndRoundtrip) {
  const ExperimentConfig c = parse_config(R"({
    "window": {"receptive_field": 9, "sample_type": "seq2frame", "tds": 2},
    "denoiser": {"channels": 32, "depth": 3, "heads": 2, "input_mode": "joint"},
    "khst": {"enabled": false, "alpha_sharing": "head"},
    "diffusion": {"H": 5, "W": 10, "scale_length": 3.0},
    "loss": {"w_vel": 0.5},
    "seeds": {"init": 7, "train": 8, "sample": 9}
  })");
  EXPECT_EQ(c.window.sample_type, SampleType::Seq2Frame);
  EXPECT_EQ(c.denoiser.frames, 9u);
  EXPECT_EQ(c.denoiser.input_mode, InputMode::Joint);
  EXPECT_FALSE(c.denoiser.use_khst);
  EXPECT_EQ(c.denoiser.alpha_sharing, AlphaSharing::Head);
  EXPECT_EQ(c.diffusion.hypotheses, 5u);
  EXPECT_EQ(c.diffusion.steps, 10u);
  EXPECT_EQ(c.seeds.sample, 9u);
  const ExperimentConfig again = parse_config(dump_config(c));
  EXPECT_EQ(dump_config(again), dump_config(c));
}

TEST(Config, CustomSkeleton) {
  const ExperimentConfig c = parse_config(
      R"({"skeleton": {"preset": "custom", "parents": [-1, 0, 1, 1], "hierarchy": [0, 1, 2, 2]}})");
  EXPECT_EQ(c.denoiser.joints, 4u);
  EXPECT_EQ(c.skeleton.build().hierarchy(), (std::vector<int>{0, 1, 2, 2}));
  EXPECT_THROW(parse_config(R"({"skeleton": {"parents": [-1, 0]}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"skeleton": {"preset": "custom", "parents": [0, 0]}})"), ConfigError);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("{"), ConfigError);
  EXPECT_THROW(parse_config(R"({"optimiser": {}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"denoiser": {"chanels": 8}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"denoiser": {"channels": "many"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"denoiser": {"channels": 30, "heads": 4}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"diffusion": {"W": 2000}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"diffusion": {"H": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"loss": {"w_pos": -1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"loss": {"joint_weights": [1, 2]}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"optimizer": {"lr": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"window": {"sample_type": "frames"}})"), ConfigError);
  try {
    parse_config(R"({"optimizer": {"batchsize": 4}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("optimizer.batchsize"), std::string::npos) << e.what();
  }
}

TEST(Config, MissingFile) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

} // namespace
} // namespace kinediff
