#pragma once

#include "kinediff/checkpoint.h"
#include "kinediff/config.h"
#include "kinediff/data.h"
#include "kinediff/denoiser.h"
#include "kinediff/diffusion.h"
#include "kinediff/metrics.h"
#include "kinediff/rng.h"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace kinediff {

/// Everything needed to run the denoiser: config, skeleton, schedule, weights.
struct Model {
  ExperimentConfig config;
  Skeleton skeleton;
  DiffusionSchedule schedule;
  Denoiser denoiser;

  explicit Model(const ExperimentConfig& config);
};

/// First and second moment estimates, one buffer per parameter.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct TrainState {
  Model model;
  AdamState adam;
  std::size_t step = 0;

  explicit TrainState(const ExperimentConfig& config);
};

/// x2d [B, N, J, 2] normalized 2D input; gt3d [B, N, J, 3] root-relative.
struct Batch {
  Tensor x2d;
  Tensor gt3d;
  std::size_t id = 0;
};

struct StepLosses {
  std::size_t step = 0;
  double total = 0.0;
  double pos = 0.0;
  double dis = 0.0;
  double temp = 0.0;
  double vel = 0.0;
  double lr = 0.0;
};

/// Noises the batch's clean quantities at per-sample timesteps drawn from rng
/// and runs the denoiser. Returns the clean estimate [B, N, J, 3].
Tensor noised_forward(const Model& model, const Batch& batch, Rng& rng, std::vector<int>* timesteps = nullptr);

/// One optimizer step: noise, denoise, loss, backward, Adam.
StepLosses train_step(TrainState& state, const Batch& batch, Rng& rng);

/// One model window cut from a clip.
struct WindowSample {
  std::vector<double> x2d;  // N x J x 2
  std::vector<double> gt3d; // N x J x 3, root-relative
};

/// Cuts every clip of `split` into model windows.
std::vector<WindowSample> training_windows(const Dataset& data, const ExperimentConfig& config, const std::string& split = "train");

Batch make_batch(const std::vector<WindowSample>& windows, std::span<const std::size_t> indices, std::size_t frames, std::size_t joints, std::size_t id);

/// Window indices of the batch used at `step`: epochs are fixed permutations
/// drawn from the training seed, so resumed runs see the same order.
std::vector<std::size_t> batch_indices(const ExperimentConfig& config, std::size_t window_count, std::size_t step);

struct TrainOptions {
  std::function<void(const StepLosses&)> on_step;
  std::filesystem::path checkpoint_dir; // empty: no periodic checkpoints
};

/// Runs steps state.step .. optimizer.steps - 1.
std::vector<StepLosses> train(TrainState& state, const std::vector<WindowSample>& windows, const TrainOptions& options = {});

std::vector<NamedTensor> checkpoint_tensors(const TrainState& state);
void restore_checkpoint(TrainState& state, const std::vector<NamedTensor>& tensors);
void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const ExperimentConfig& config, const std::filesystem::path& path);
/// Parameters only; throws ConfigError when the stored scales disagree with config.
Model load_model(const ExperimentConfig& config, const std::filesystem::path& path);

/// Any function mapping fused inputs and timesteps to clean poses; lets tests
/// swap in an oracle.
using DenoiseFn = std::function<Tensor(const Tensor& fused, std::span<const int> timesteps)>;

struct InferOptions {
  std::size_t hypotheses = 1;
  std::size_t steps = 1;
  std::uint64_t seed = 0; // hypothesis h draws from Rng(seed + h)
};

/// Camera-space placement of one window, used for reprojection aggregation.
struct ProjectionContext {
  Camera camera;
  std::vector<Vec3> root; // per frame
};

struct InferResult {
  HypothesisSet set;             // placed at the predicted root
  std::vector<BoneDecomp> bones; // final (length, direction) per hypothesis
  PoseSeq3D p_agg;               // root-relative
  PoseSeq3D j_agg;               // root-relative
  bool mean_fallback = false;
};

struct InferSetup {
  const Skeleton* skeleton = nullptr;
  const DiffusionSchedule* schedule = nullptr;
  DiffusionSettings diffusion;
  InputMode input_mode = InputMode::Disentangled;
};

InferResult infer_with(
    const DenoiseFn& denoise,
    const InferSetup& setup,
    const PoseSeq2D& x2d,
    const InferOptions& options,
    const ProjectionContext* projection = nullptr);

InferResult infer(const Model& model, const PoseSeq2D& x2d, const InferOptions& options, const ProjectionContext* projection = nullptr);

struct MetricRecord {
  std::string split;
  std::string sequence;
  std::string metric;
  double value = 0.0;
  std::string unit;
  std::string protocol;
};

struct Report {
  std::string split;
  std::size_t hypotheses = 1;
  std::size_t steps = 1;
  std::uint64_t seed = 0;
  bool mean_fallback = false;
  std::vector<MetricRecord> records;

  /// Throws ContractError when absent.
  double value(const std::string& sequence, const std::string& metric) const;
  bool has(const std::string& sequence, const std::string& metric) const;
  std::string to_json() const;
  std::string to_text() const;
};

Report parse_report(const std::string& json_text);

struct EvalOptions {
  std::size_t hypotheses = 1;
  std::size_t steps = 1;
  std::uint64_t seed = 0;
  std::string split = "test";
};

/// Predicts one window; the default runs infer() on the model.
using WindowPredictor = std::function<InferResult(const Clip& clip, const Window& window, const PoseSeq2D& x2d, const InferOptions& options, const ProjectionContext* projection)>;

Report evaluate_with(
    const WindowPredictor& predict,
    const Skeleton& skeleton,
    const WindowSpec& window_spec,
    const Dataset& data,
    const EvalOptions& options);

Report evaluate(const Model& model, const Dataset& data, const EvalOptions& options);

} // namespace kinediff
