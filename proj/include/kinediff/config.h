#pragma once

#include "kinediff/data.h"
#include "kinediff/denoiser.h"
#include "kinediff/losses.h"
#include "kinediff/skeleton.h"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace kinediff {

struct SkeletonSpec {
  std::string preset = "h36m17"; // or "custom" with parents below
  std::vector<int> parents;
  std::vector<std::string> joint_names;
  std::optional<std::vector<int>> hierarchy;

  Skeleton build() const;
};

struct DiffusionSettings {
  int T = 1000;
  double cosine_s = 0.008;
  std::size_t hypotheses = 1; // H
  std::size_t steps = 1;      // W
  // Signal scales applied to clean quantities before noising.
  double scale_length = 2.0;
  double scale_dir = 1.0;
  double scale_joint = 2.0;
};

struct OptimizerSettings {
  double lr = 2e-3;
  double lr_decay = 0.999; // multiplied in after every step
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0; // global norm; 0 disables
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 1;
};

struct Seeds {
  std::uint64_t init = 0;   // parameter initialization
  std::uint64_t train = 0;  // shuffling, timesteps, noise
  std::uint64_t sample = 0; // inference noise
};

struct ExperimentConfig {
  SkeletonSpec skeleton;
  WindowSpec window;
  DenoiserConfig denoiser; // frames and joints are filled from window/skeleton
  DiffusionSettings diffusion;
  LossWeights loss;
  OptimizerSettings optimizer;
  Seeds seeds;

  /// Throws ConfigError naming the first offending key.
  void validate() const;
};

/// Parses the nested JSON form; unknown keys are rejected.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& config);

} // namespace kinediff
