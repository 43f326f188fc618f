#include "kinediff/denoiser.h"

#include "kinediff/errors.h"

#include <cmath>

namespace kinediff {

namespace {

// FNV-1a, used to give every parameter its own initialization stream so a
// parameter's initial values do not depend on which other parameters exist.
std::uint64_t name_stream(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::size_t leading(const Shape& s, std::size_t keep) {
  std::size_t p = 1;
  for (std::size_t i = 0; i + keep < s.size(); ++i) {
    p *= s[i];
  }
  return p;
}

} // namespace

void DenoiserConfig::validate() const {
  if (channels == 0 || heads == 0 || channels % heads != 0) {
    throw ConfigError("denoiser.channels must be a positive multiple of denoiser.heads");
  }
  if (channels % 2 != 0) {
    throw ConfigError("denoiser.channels must be even for the timestep embedding");
  }
  if (depth < 1) {
    throw ConfigError("denoiser.depth must be >= 1");
  }
  if (mlp_ratio < 1) {
    throw ConfigError("denoiser.mlp_ratio must be >= 1");
  }
  if (frames < 1 || joints < 2) {
    throw ConfigError("denoiser needs at least one frame and two joints");
  }
}

std::string to_string(InputMode mode) {
  return mode == InputMode::Disentangled ? "disentangled" : "joint";
}
std::string to_string(OutputMode mode) {
  return mode == OutputMode::Pose ? "pose" : "bones";
}
std::string to_string(AlphaSharing sharing) {
  return sharing == AlphaSharing::Block ? "block" : "head";
}

InputMode parse_input_mode(const std::string& s) {
  if (s == "disentangled") {
    return InputMode::Disentangled;
  }
  if (s == "joint") {
    return InputMode::Joint;
  }
  throw ConfigError("unknown input mode '" + s + "' (expected disentangled|joint)");
}

OutputMode parse_output_mode(const std::string& s) {
  if (s == "pose") {
    return OutputMode::Pose;
  }
  if (s == "bones") {
    return OutputMode::Bones;
  }
  throw ConfigError("unknown output mode '" + s + "' (expected pose|bones)");
}

AlphaSharing parse_alpha_sharing(const std::string& s) {
  if (s == "block") {
    return AlphaSharing::Block;
  }
  if (s == "head") {
    return AlphaSharing::Head;
  }
  throw ConfigError("unknown alpha sharing '" + s + "' (expected block|head)");
}

// ---------------------------------------------------------------------------
// Input fusion

Tensor fuse_inputs(const Skeleton& skeleton, const Tensor& x2d, const Tensor& lengths, const Tensor& dirs) {
  const std::size_t j = skeleton.joint_count();
  const std::size_t b = skeleton.bone_count();
  const Shape& sx = x2d.shape();
  if (sx.size() < 2 || sx.back() != 2 || sx[sx.size() - 2] != j) {
    throw ContractError("fuse_inputs: x2d must be [..., J, 2] with J = " + std::to_string(j));
  }
  Shape lead(sx.begin(), sx.end() - 2);
  Shape expect_l = lead;
  expect_l.push_back(b);
  Shape expect_d = expect_l;
  expect_d.push_back(3);
  if (lengths.shape() != expect_l || dirs.shape() != expect_d) {
    throw ContractError(
        "fuse_inputs: lengths " + shape_to_string(lengths.shape()) + " / dirs " + shape_to_string(dirs.shape()) +
        " do not match x2d " + shape_to_string(sx));
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(j);
  out_shape.push_back(6);
  std::vector<double> out(rows * j * 6, 0.0);
  const auto xv = x2d.values();
  const auto lv = lengths.values();
  const auto dv = dirs.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < j; ++q) {
      double* o = out.data() + (r * j + q) * 6;
      o[0] = xv[(r * j + q) * 2];
      o[1] = xv[(r * j + q) * 2 + 1];
      const int bone = skeleton.bone_of_joint(q);
      if (bone >= 0) {
        const auto bi = static_cast<std::size_t>(bone);
        o[2] = lv[r * b + bi];
        for (int k = 0; k < 3; ++k) {
          o[3 + k] = dv[(r * b + bi) * 3 + static_cast<std::size_t>(k)];
        }
      }
    }
  }
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor fuse_joint_inputs(const Tensor& x2d, const Tensor& joints) {
  const Shape& sx = x2d.shape();
  if (sx.size() < 2 || sx.back() != 2) {
    throw ContractError("fuse_joint_inputs: x2d must be [..., J, 2]");
  }
  Shape expect = sx;
  expect.back() = 3;
  if (joints.shape() != expect) {
    throw ContractError("fuse_joint_inputs: joints " + shape_to_string(joints.shape()) + " do not match x2d");
  }
  const std::size_t rows = x2d.numel() / 2;
  Shape out_shape = sx;
  out_shape.back() = 5;
  std::vector<double> out(rows * 5);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r * 5] = x2d.values()[r * 2];
    out[r * 5 + 1] = x2d.values()[r * 2 + 1];
    for (std::size_t k = 0; k < 3; ++k) {
      out[r * 5 + 2 + k] = joints.values()[r * 3 + k];
    }
  }
  return Tensor(std::move(out_shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Attention

Tensor adjacency_stack(const AdjacencyBank& bank) {
  const std::size_t jj = bank.joints * bank.joints;
  std::vector<double> v;
  v.reserve(4 * jj);
  for (const auto& m : bank.masks) {
    v.insert(v.end(), m.begin(), m.end());
  }
  return Tensor(Shape{4, jj}, std::move(v));
}

Tensor hierarchy_bias(const Tensor& alphas, const Tensor& adjacency, std::size_t joints) {
  if (alphas.shape() == Shape{4}) {
    return reshape(matmul(reshape(alphas, {1, 4}), adjacency), {joints, joints});
  }
  if (alphas.rank() == 2 && alphas.dim(1) == 4) {
    return reshape(matmul(alphas, adjacency), {alphas.dim(0), joints, joints});
  }
  throw DimensionError("hierarchy mixing coefficients must be [4] or [heads, 4], got " + shape_to_string(alphas.shape()));
}

Tensor multi_head_attention(
    const Tensor& x,
    const AttentionWeights& w,
    std::size_t heads,
    const Tensor* post_softmax_bias,
    Tensor* attention) {
  const Shape& s = x.shape();
  if (s.size() < 2) {
    throw DimensionError("attention input must be [..., L, C]");
  }
  const std::size_t l = s[s.size() - 2];
  const std::size_t c = s.back();
  if (heads == 0 || c % heads != 0) {
    throw DimensionError("attention channels not divisible by heads");
  }
  const std::size_t dh = c / heads;
  const std::size_t p = leading(s, 2);
  auto split = [&](const Tensor& t) { return permute(reshape(t, {p, l, heads, dh}), {0, 2, 1, 3}); };
  const Tensor q = split(linear(x, w.wq, w.bq));
  const Tensor k = split(linear(x, w.wk, w.bk));
  const Tensor v = split(linear(x, w.wv, w.bv));
  Tensor scores = matmul(q, transpose(k, 2, 3)) * (1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor a = softmax(scores, 3);
  if (post_softmax_bias) {
    a = a + *post_softmax_bias;
  }
  if (attention) {
    *attention = a;
  }
  const Tensor mixed = reshape(permute(matmul(a, v), {0, 2, 1, 3}), s);
  return linear(mixed, w.wo, w.bo);
}

Tensor khst_attention(
    const Tensor& h,
    const Tensor& adjacency,
    const Tensor& alphas,
    const AttentionWeights& w,
    std::size_t heads,
    Tensor* attention) {
  const std::size_t j = h.shape()[h.rank() - 2];
  if (adjacency.shape() != Shape{4, j * j}) {
    throw DimensionError("adjacency stack does not match joint count " + std::to_string(j));
  }
  const Tensor bias = hierarchy_bias(alphas, adjacency, j);
  return multi_head_attention(h, w, heads, &bias, attention);
}

Tensor khtt_attention(const Tensor& h, const AttentionWeights& w, std::size_t heads, Tensor* attention) {
  return multi_head_attention(h, w, heads, nullptr, attention);
}

Tensor timestep_embedding(std::span<const int> timesteps, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(timesteps.size() * dim, 0.0);
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(timesteps[b]) * freq;
      out[b * dim + k] = std::sin(arg);
      out[b * dim + half + k] = std::cos(arg);
    }
  }
  return Tensor(Shape{timesteps.size(), dim}, std::move(out));
}

// ---------------------------------------------------------------------------
// Denoiser

Tensor Denoiser::add_param(const std::string& name, Shape shape, std::vector<double> values) {
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  params_.push_back({name, t});
  return t;
}

Tensor Denoiser::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  Rng local = rng.fork(name_stream(name));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    x = stddev * local.normal();
  }
  return add_param(name, std::move(shape), std::move(v));
}

Tensor Denoiser::add_linear(const std::string& name, std::size_t in, std::size_t out, Tensor& bias, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  Tensor weight = add_normal(name + ".weight", {in, out}, stddev, rng);
  bias = add_param(name + ".bias", {out}, std::vector<double>(out, 0.0));
  return weight;
}

Denoiser::BlockWeights Denoiser::make_block(const std::string& prefix, bool khst, Rng& rng) {
  const std::size_t c = config_.channels;
  const std::size_t hidden = c * config_.mlp_ratio;
  BlockWeights b;
  b.ln1_g = add_param(prefix + ".ln1.gamma", {c}, std::vector<double>(c, 1.0));
  b.ln1_b = add_param(prefix + ".ln1.beta", {c}, std::vector<double>(c, 0.0));
  b.attn.wq = add_linear(prefix + ".attn.q", c, c, b.attn.bq, rng);
  // Softmax ignores a per-query shift, so a key bias never receives gradient.
  b.attn.wk = add_normal(prefix + ".attn.k.weight", {c, c}, std::sqrt(1.0 / static_cast<double>(c)), rng);
  b.attn.bk = Tensor(Shape{c}, std::vector<double>(c, 0.0));
  b.attn.wv = add_linear(prefix + ".attn.v", c, c, b.attn.bv, rng);
  b.attn.wo = add_linear(prefix + ".attn.out", c, c, b.attn.bo, rng);
  if (khst) {
    const Shape alpha_shape =
        config_.alpha_sharing == AlphaSharing::Block ? Shape{4} : Shape{config_.heads, 4};
    b.alpha = add_param(prefix + ".alpha", alpha_shape, std::vector<double>(shape_numel(alpha_shape), 0.0));
    b.has_alpha = true;
  }
  b.ln2_g = add_param(prefix + ".ln2.gamma", {c}, std::vector<double>(c, 1.0));
  b.ln2_b = add_param(prefix + ".ln2.beta", {c}, std::vector<double>(c, 0.0));
  b.fc1_w = add_linear(prefix + ".mlp.fc1", c, hidden, b.fc1_b, rng);
  b.fc2_w = add_linear(prefix + ".mlp.fc2", hidden, c, b.fc2_b, rng);
  return b;
}

Denoiser::Denoiser(DenoiserConfig config, Skeleton skeleton, std::uint64_t seed)
    : config_(config), skeleton_(std::move(skeleton)) {
  config_.validate();
  if (config_.joints != skeleton_.joint_count()) {
    throw ConfigError(
        "denoiser configured for " + std::to_string(config_.joints) + " joints but skeleton has " +
        std::to_string(skeleton_.joint_count()));
  }
  bank_ = graph_distance_banks(skeleton_);
  adjacency_ = adjacency_stack(bank_);

  Rng rng(seed);
  const std::size_t c = config_.channels;
  embed_w_ = add_linear("embed", config_.input_channels(), c, embed_b_, rng);
  joint_embed_ = add_normal("joint_embed", {config_.joints, c}, 0.02, rng);
  if (config_.use_hie) {
    hie_ = add_normal("hie", {static_cast<std::size_t>(kHierarchyLevels), c}, 0.02, rng);
  }
  temporal_embed_ = add_normal("temporal_embed", {config_.frames, c}, 0.02, rng);
  time_w_ = add_linear("time", c, c, time_b_, rng);

  blocks_.push_back(make_block("stem.spatial", false, rng));
  blocks_.push_back(make_block("stem.temporal", false, rng));
  for (std::size_t d = 0; d < config_.depth; ++d) {
    const std::string prefix = "loop" + std::to_string(d);
    blocks_.push_back(make_block(prefix + ".khst", config_.use_khst, rng));
    blocks_.push_back(make_block(prefix + ".khtt", false, rng));
  }

  head_ln_g_ = add_param("head.ln.gamma", {c}, std::vector<double>(c, 1.0));
  head_ln_b_ = add_param("head.ln.beta", {c}, std::vector<double>(c, 0.0));
  const std::size_t out = config_.output_mode == OutputMode::Pose ? 3 : 4;
  // A small output layer starts predictions near the origin instead of metres away.
  head_w_ = add_normal("head.out.weight", {c, out}, 0.1 * std::sqrt(2.0 / static_cast<double>(c + out)), rng);
  head_b_ = add_param("head.out.bias", {out}, std::vector<double>(out, 0.0));
}

Tensor& Denoiser::parameter(const std::string& name) {
  for (auto& nt : params_) {
    if (nt.name == name) {
      return nt.tensor;
    }
  }
  throw ContractError("denoiser has no parameter named '" + name + "'");
}

void Denoiser::load_parameters(const std::vector<NamedTensor>& tensors) {
  for (auto& nt : params_) {
    const Tensor& src = find_tensor(tensors, nt.name);
    if (src.shape() != nt.tensor.shape()) {
      throw DataError(
          "checkpoint tensor '" + nt.name + "' has shape " + shape_to_string(src.shape()) + ", model expects " +
          shape_to_string(nt.tensor.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), nt.tensor.mutable_values().begin());
  }
}

Tensor Denoiser::run_block(const Tensor& x, const BlockWeights& b, bool spatial) const {
  // Spatial blocks attend over joints of [B, N, J, C]; temporal blocks over
  // frames, viewed as [B, J, N, C].
  const Tensor seq = spatial ? x : permute(x, {0, 2, 1, 3});
  const Tensor normed = layer_norm(seq, b.ln1_g, b.ln1_b);
  Tensor attended;
  if (spatial && b.has_alpha) {
    attended = khst_attention(normed, adjacency_, b.alpha, b.attn, config_.heads);
  } else if (spatial) {
    attended = multi_head_attention(normed, b.attn, config_.heads);
  } else {
    attended = khtt_attention(normed, b.attn, config_.heads);
  }
  Tensor h = seq + attended;
  const Tensor hidden = gelu(linear(layer_norm(h, b.ln2_g, b.ln2_b), b.fc1_w, b.fc1_b));
  h = h + linear(hidden, b.fc2_w, b.fc2_b);
  return spatial ? h : permute(h, {0, 2, 1, 3});
}

Tensor Denoiser::assemble_bones(const Tensor& head_out) const {
  // head_out [B, N, J, 4]: per non-root joint, the length and (unnormalized)
  // direction of the bone ending there. The root sits at the origin.
  const Shape& s = head_out.shape();
  const std::size_t j = config_.joints;
  const Tensor lengths = gather(head_out, 3, {0});
  const Tensor raw_dirs = gather(head_out, 3, {1, 2, 3});
  const Tensor norms = reshape(norm_last(raw_dirs), {s[0], s[1], j, 1});
  const Tensor dirs = raw_dirs / (norms + 1e-8);
  std::vector<Tensor> joints(j);
  joints[skeleton_.root()] = Tensor(Shape{s[0], s[1], 1, 3}, 0.0);
  for (std::size_t q : skeleton_.topological_order()) {
    const int parent = skeleton_.parents()[q];
    if (parent < 0) {
      continue;
    }
    const Tensor l = gather(lengths, 2, {q});
    const Tensor d = gather(dirs, 2, {q});
    joints[q] = joints[static_cast<std::size_t>(parent)] + l * d;
  }
  return concat(joints, 2);
}

Tensor Denoiser::forward(const Tensor& fused, std::span<const int> timesteps) const {
  const Shape& s = fused.shape();
  if (s.size() != 4 || s[1] != config_.frames || s[2] != config_.joints || s[3] != config_.input_channels()) {
    throw ContractError(
        "denoiser input must be [B, " + std::to_string(config_.frames) + ", " + std::to_string(config_.joints) + ", " +
        std::to_string(config_.input_channels()) + "], got " + shape_to_string(s));
  }
  if (timesteps.size() != s[0]) {
    throw ContractError("denoiser needs one timestep per batch element");
  }
  const std::size_t batch = s[0];
  const std::size_t c = config_.channels;

  Tensor spatial_pos = joint_embed_;
  if (config_.use_hie) {
    std::vector<std::size_t> levels;
    for (int level : skeleton_.hierarchy()) {
      levels.push_back(static_cast<std::size_t>(level));
    }
    spatial_pos = spatial_pos + gather(hie_, 0, levels);
  }
  const Tensor pos = reshape(temporal_embed_, {config_.frames, 1, c}) + spatial_pos;
  const Tensor temb =
      reshape(linear(timestep_embedding(timesteps, c), time_w_, time_b_), {batch, 1, 1, c});

  Tensor x;
  try {
    x = linear(fused, embed_w_, embed_b_) + pos + temb;
  } catch (const NumericError& e) {
    throw NumericError(std::string("denoiser embedding: ") + e.what());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    try {
      x = run_block(x, blocks_[i], i % 2 == 0);
    } catch (const NumericError& e) {
      throw NumericError("denoiser block " + std::to_string(i) + ": " + e.what());
    }
  }
  const Tensor head = linear(layer_norm(x, head_ln_g_, head_ln_b_), head_w_, head_b_);
  return config_.output_mode == OutputMode::Pose ? head : assemble_bones(head);
}

} // namespace kinediff
