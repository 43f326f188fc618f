#pragma once

#include "kinediff/checkpoint.h"
#include "kinediff/rng.h"
#include "kinediff/skeleton.h"
#include "kinediff/tensor.h"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kinediff {

/// What the noisy diffusion state looks like when fed to the network.
enum class InputMode {
  Disentangled, // [x2d | bone length | bone direction] per joint, 6 channels
  Joint,        // [x2d | joint position] per joint, 5 channels
};

/// What the regression head predicts.
enum class OutputMode {
  Pose,  // joint positions directly
  Bones, // per-joint bone length and direction, assembled by forward kinematics
};

/// Whether the four hierarchy mixing coefficients are shared across heads.
enum class AlphaSharing { Block, Head };

struct DenoiserConfig {
  std::size_t channels = 64;
  std::size_t depth = 2; // number of KHST + KHTT pairs
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t frames = 27;
  std::size_t joints = 17;
  InputMode input_mode = InputMode::Disentangled;
  OutputMode output_mode = OutputMode::Pose;
  bool use_hie = true;
  bool use_khst = true;
  AlphaSharing alpha_sharing = AlphaSharing::Block;

  void validate() const;
  std::size_t input_channels() const {
    return input_mode == InputMode::Disentangled ? 6 : 5;
  }
};

std::string to_string(InputMode mode);
std::string to_string(OutputMode mode);
std::string to_string(AlphaSharing sharing);
InputMode parse_input_mode(const std::string& s);
OutputMode parse_output_mode(const std::string& s);
AlphaSharing parse_alpha_sharing(const std::string& s);

/// Concatenates [x2d | length | direction] per joint, assigning each bone to
/// its child joint; the root's bone slots are zero.
///   x2d: [..., N, J, 2], lengths: [..., N, J-1], dirs: [..., N, J-1, 3]
///   returns [..., N, J, 6]
Tensor fuse_inputs(const Skeleton& skeleton, const Tensor& x2d, const Tensor& lengths, const Tensor& dirs);

/// Concatenates [x2d | joint position] per joint: returns [..., N, J, 5].
Tensor fuse_joint_inputs(const Tensor& x2d, const Tensor& joints);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Stacks the four adjacency masks as a constant [4, J*J] tensor.
Tensor adjacency_stack(const AdjacencyBank& bank);

/// sum_k alpha_k A_k for alphas [4] (-> [J, J]) or [heads, 4] (-> [heads, J, J]).
Tensor hierarchy_bias(const Tensor& alphas, const Tensor& adjacency, std::size_t joints);

/// Multi-head scaled dot-product attention over the second-to-last axis of
/// x [..., L, C]. `post_softmax_bias`, when given, is added to the softmax
/// output before weighting V and must broadcast against [..., heads, L, L].
/// `attention`, when given, receives the final attention maps.
Tensor multi_head_attention(
    const Tensor& x,
    const AttentionWeights& w,
    std::size_t heads,
    const Tensor* post_softmax_bias = nullptr,
    Tensor* attention = nullptr);

/// Spatial attention over joints of h [..., J, C] with the refined map
/// A = softmax(QK^T / sqrt(d)) + sum_k alpha_k A_k.
Tensor khst_attention(
    const Tensor& h,
    const Tensor& adjacency,
    const Tensor& alphas,
    const AttentionWeights& w,
    std::size_t heads,
    Tensor* attention = nullptr);

/// Frame-to-frame attention of h [..., N, C], independently per leading index.
Tensor khtt_attention(const Tensor& h, const AttentionWeights& w, std::size_t heads, Tensor* attention = nullptr);

/// Sinusoidal embedding of integer timesteps: [B, dim].
Tensor timestep_embedding(std::span<const int> timesteps, std::size_t dim);

/// Kinematic-hierarchy-aware spatio-temporal denoiser with its regression
/// head. Maps fused inputs [B, N, J, Cin] and per-sample timesteps to a clean
/// pose estimate [B, N, J, 3].
class Denoiser {
 public:
  Denoiser(DenoiserConfig config, Skeleton skeleton, std::uint64_t seed);

  Tensor forward(const Tensor& fused, std::span<const int> timesteps) const;

  const DenoiserConfig& config() const {
    return config_;
  }
  const Skeleton& skeleton() const {
    return skeleton_;
  }
  const AdjacencyBank& adjacency() const {
    return bank_;
  }

  /// All trainable tensors in a fixed order.
  std::vector<NamedTensor>& parameters() {
    return params_;
  }
  const std::vector<NamedTensor>& parameters() const {
    return params_;
  }
  Tensor& parameter(const std::string& name);

  /// Overwrites parameter values from a checkpoint (shapes must match).
  void load_parameters(const std::vector<NamedTensor>& tensors);

 private:
  struct BlockWeights {
    Tensor ln1_g, ln1_b;
    AttentionWeights attn;
    Tensor ln2_g, ln2_b;
    Tensor fc1_w, fc1_b, fc2_w, fc2_b;
    Tensor alpha; // only for KHST blocks; empty otherwise
    bool has_alpha = false;
  };

  Tensor add_param(const std::string& name, Shape shape, std::vector<double> values);
  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor add_linear(const std::string& name, std::size_t in, std::size_t out, Tensor& bias, Rng& rng);
  BlockWeights make_block(const std::string& prefix, bool khst, Rng& rng);
  Tensor run_block(const Tensor& x, const BlockWeights& b, bool spatial) const;
  Tensor assemble_bones(const Tensor& head_out) const;

  DenoiserConfig config_;
  Skeleton skeleton_;
  AdjacencyBank bank_;
  Tensor adjacency_;
  std::vector<NamedTensor> params_;

  Tensor embed_w_, embed_b_;
  Tensor joint_embed_, hie_, temporal_embed_;
  Tensor time_w_, time_b_;
  std::vector<BlockWeights> blocks_; // [spatial, temporal, (khst, khtt) x depth]
  Tensor head_ln_g_, head_ln_b_, head_w_, head_b_;
};

} // namespace kinediff
