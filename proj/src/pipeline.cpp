#include "kinediff/pipeline.h"

#include "kinediff/disentangle.h"
#include "kinediff/errors.h"
#include "kinediff/losses.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

namespace kinediff {

using json = nlohmann::json;

Model::Model(const ExperimentConfig& cfg)
    : config(cfg),
      skeleton(cfg.skeleton.build()),
      schedule(cosine_schedule(cfg.diffusion.T, cfg.diffusion.cosine_s)),
      denoiser(cfg.denoiser, skeleton, cfg.seeds.init) {
  config.validate();
}

TrainState::TrainState(const ExperimentConfig& config) : model(config) {
  for (const auto& p : model.denoiser.parameters()) {
    adam.m.emplace_back(p.tensor.numel(), 0.0);
    adam.v.emplace_back(p.tensor.numel(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps with one timestep per leading index.
Tensor noise_per_sample(const DiffusionSchedule& sch, const Tensor& x0, const std::vector<int>& ts, double scale, Rng& rng) {
  const std::size_t batch = ts.size();
  const std::size_t per = x0.numel() / batch;
  std::vector<double> out(x0.numel());
  const auto xv = x0.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const double ab = sch.at(ts[b]);
    const double a = std::sqrt(ab);
    const double s = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < per; ++i) {
      out[b * per + i] = a * scale * xv[b * per + i] + s * rng.normal();
    }
  }
  return Tensor(x0.shape(), std::move(out));
}

} // namespace

Tensor noised_forward(const Model& model, const Batch& batch, Rng& rng, std::vector<int>* timesteps) {
  const auto& gs = batch.gt3d.shape();
  if (gs.size() != 4 || gs[3] != 3 || batch.x2d.shape() != Shape{gs[0], gs[1], gs[2], 2}) {
    throw ContractError("batch must hold x2d [B, N, J, 2] and gt3d [B, N, J, 3], got " + shape_to_string(batch.x2d.shape()) + " and " + shape_to_string(gs));
  }
  const std::size_t b = gs[0];
  std::vector<int> ts(b);
  for (auto& t : ts) {
    t = static_cast<int>(rng.uniform_int(1, static_cast<std::uint64_t>(model.schedule.T)));
  }
  const auto& d = model.config.diffusion;
  Tensor fused;
  if (model.config.denoiser.input_mode == InputMode::Disentangled) {
    BoneTensors clean;
    {
      NoGradGuard no_grad;
      clean = decompose_tensor(model.skeleton, batch.gt3d.detach());
    }
    // Lengths and directions get independent noise draws.
    const Tensor noisy_l = noise_per_sample(model.schedule, clean.lengths, ts, d.scale_length, rng);
    const Tensor noisy_d = noise_per_sample(model.schedule, clean.dirs, ts, d.scale_dir, rng);
    fused = fuse_inputs(model.skeleton, batch.x2d, noisy_l, noisy_d);
  } else {
    const Tensor noisy = noise_per_sample(model.schedule, batch.gt3d.detach(), ts, d.scale_joint, rng);
    fused = fuse_joint_inputs(batch.x2d, noisy);
  }
  if (timesteps) {
    *timesteps = ts;
  }
  return model.denoiser.forward(fused, ts);
}

StepLosses train_step(TrainState& state, const Batch& batch, Rng& rng) {
  Model& model = state.model;
  const auto& opt = model.config.optimizer;
  auto& params = model.denoiser.parameters();
  std::vector<int> ts;
  LossBreakdown losses;
  auto describe = [&] {
    std::ostringstream os;
    os << "step " << state.step << ", batch " << batch.id << ", t = [";
    for (std::size_t i = 0; i < ts.size(); ++i) {
      os << (i ? ", " : "") << ts[i];
    }
    os << "]";
    return os.str();
  };
  try {
    const Tensor pred = noised_forward(model, batch, rng, &ts);
    losses = total_loss(pred, batch.gt3d, model.skeleton, model.config.loss);
  } catch (const NumericError& e) {
    throw NumericError(std::string("non-finite value during training (") + describe() + "): " + e.what());
  }
  if (!std::isfinite(losses.total.item())) {
    throw NumericError("loss is not finite (" + describe() + ")");
  }
  for (auto& p : params) {
    p.tensor.zero_grad();
  }
  losses.total.backward();

  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  double sq = 0.0;
  for (const auto& p : params) {
    grads.push_back(p.tensor.grad());
    for (double g : grads.back()) {
      sq += g * g;
    }
  }
  if (!std::isfinite(sq)) {
    throw NumericError("gradient is not finite (" + describe() + ")");
  }
  const double norm = std::sqrt(sq);
  const double clip = opt.grad_clip > 0.0 && norm > opt.grad_clip ? opt.grad_clip / norm : 1.0;

  const double lr = opt.lr * std::pow(opt.lr_decay, static_cast<double>(state.step));
  const double k = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(opt.beta1, k);
  const double bc2 = 1.0 - std::pow(opt.beta2, k);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].tensor.mutable_values();
    auto& m = state.adam.m[i];
    auto& v = state.adam.v[i];
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double g = grads[i][e] * clip;
      m[e] = opt.beta1 * m[e] + (1.0 - opt.beta1) * g;
      v[e] = opt.beta2 * v[e] + (1.0 - opt.beta2) * g * g;
      values[e] -= lr * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + opt.eps);
    }
    params[i].tensor.zero_grad();
  }

  StepLosses out;
  out.step = state.step;
  out.total = losses.total.item();
  out.pos = losses.pos;
  out.dis = losses.dis;
  out.temp = losses.temp;
  out.vel = losses.vel;
  out.lr = lr;
  ++state.step;
  return out;
}

std::vector<WindowSample> training_windows(const Dataset& data, const ExperimentConfig& config, const std::string& split) {
  const Skeleton skeleton = config.skeleton.build();
  const std::size_t j = skeleton.joint_count();
  std::vector<WindowSample> out;
  for (const Clip* clip : data.split(split)) {
    if (clip->pose3d.joints != j) {
      throw DataError("clip " + clip->name + " has " + std::to_string(clip->pose3d.joints) + " joints, skeleton has " + std::to_string(j));
    }
    const PoseSeq3D rel = root_relative(clip->pose3d, skeleton.root());
    for (const Window& w : make_windows(clip->pose3d.frames, config.window)) {
      WindowSample s;
      for (std::size_t f : w.frames) {
        s.x2d.insert(s.x2d.end(), clip->pose2d.joint(f, 0), clip->pose2d.joint(f, 0) + j * 2);
        s.gt3d.insert(s.gt3d.end(), rel.joint(f, 0), rel.joint(f, 0) + j * 3);
      }
      out.push_back(std::move(s));
    }
  }
  if (out.empty()) {
    throw ConfigError("no clips in split '" + split + "'");
  }
  return out;
}

Batch make_batch(const std::vector<WindowSample>& windows, std::span<const std::size_t> indices, std::size_t frames, std::size_t joints, std::size_t id) {
  std::vector<double> x2d;
  std::vector<double> gt;
  for (std::size_t i : indices) {
    const auto& w = windows.at(i);
    if (w.x2d.size() != frames * joints * 2 || w.gt3d.size() != frames * joints * 3) {
      throw DimensionError("window size does not match " + std::to_string(frames) + " frames x " + std::to_string(joints) + " joints");
    }
    x2d.insert(x2d.end(), w.x2d.begin(), w.x2d.end());
    gt.insert(gt.end(), w.gt3d.begin(), w.gt3d.end());
  }
  const std::size_t b = indices.size();
  return {Tensor(Shape{b, frames, joints, 2}, std::move(x2d)), Tensor(Shape{b, frames, joints, 3}, std::move(gt)), id};
}

namespace {
constexpr std::uint64_t kShuffleStream = 1ull << 40;
constexpr std::uint64_t kStepStream = 1ull << 41;
} // namespace

std::vector<std::size_t> batch_indices(const ExperimentConfig& config, std::size_t window_count, std::size_t step) {
  const std::size_t bs = config.optimizer.batch_size;
  const std::size_t per_epoch = (window_count + bs - 1) / bs;
  const std::size_t epoch = step / per_epoch;
  const std::size_t pos = step % per_epoch;
  std::vector<std::size_t> perm(window_count);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(config.seeds.train, kShuffleStream + epoch);
  for (std::size_t i = window_count; i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.uniform_int(0, i - 1)]);
  }
  const std::size_t lo = pos * bs;
  const std::size_t hi = std::min(lo + bs, window_count);
  return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
}

std::vector<StepLosses> train(TrainState& state, const std::vector<WindowSample>& windows, const TrainOptions& options) {
  const auto& cfg = state.model.config;
  const std::size_t n = cfg.denoiser.frames;
  const std::size_t j = cfg.denoiser.joints;
  std::vector<StepLosses> log;
  while (state.step < cfg.optimizer.steps) {
    const std::size_t step = state.step;
    const auto idx = batch_indices(cfg, windows.size(), step);
    const Batch batch = make_batch(windows, idx, n, j, step);
    Rng rng(cfg.seeds.train, kStepStream + step);
    log.push_back(train_step(state, batch, rng));
    if (options.on_step) {
      options.on_step(log.back());
    }
    if (!options.checkpoint_dir.empty() && cfg.optimizer.checkpoint_every > 0 && state.step % cfg.optimizer.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "step_%06zu.kdck", state.step);
      save_train_state(options.checkpoint_dir / name, state);
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::vector<NamedTensor> meta_tensors(const ExperimentConfig& c) {
  return {
      {"meta.scale_length", Tensor(Shape{1}, c.diffusion.scale_length)},
      {"meta.scale_dir", Tensor(Shape{1}, c.diffusion.scale_dir)},
      {"meta.scale_joint", Tensor(Shape{1}, c.diffusion.scale_joint)},
      {"meta.input_mode", Tensor(Shape{1}, c.denoiser.input_mode == InputMode::Disentangled ? 0.0 : 1.0)},
  };
}

void check_meta(const ExperimentConfig& c, const std::vector<NamedTensor>& tensors) {
  for (const auto& m : meta_tensors(c)) {
    const Tensor& stored = find_tensor(tensors, m.name);
    if (stored.numel() != 1 || stored.values()[0] != m.tensor.values()[0]) {
      throw ConfigError("checkpoint " + m.name + " does not match the config");
    }
  }
}

std::vector<NamedTensor> with_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) == 0) {
      out.push_back({t.name.substr(prefix.size()), t.tensor});
    }
  }
  return out;
}

} // namespace

std::vector<NamedTensor> checkpoint_tensors(const TrainState& state) {
  std::vector<NamedTensor> out = meta_tensors(state.model.config);
  out.push_back({"train.step", Tensor(Shape{1}, static_cast<double>(state.step))});
  const auto& params = state.model.denoiser.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    out.push_back({"param/" + p.name, Tensor(p.tensor.shape(), std::vector<double>(p.tensor.values().begin(), p.tensor.values().end()))});
    out.push_back({"adam.m/" + p.name, Tensor(p.tensor.shape(), state.adam.m[i])});
    out.push_back({"adam.v/" + p.name, Tensor(p.tensor.shape(), state.adam.v[i])});
  }
  return out;
}

void restore_checkpoint(TrainState& state, const std::vector<NamedTensor>& tensors) {
  check_meta(state.model.config, tensors);
  state.model.denoiser.load_parameters(with_prefix(tensors, "param/"));
  const auto m = with_prefix(tensors, "adam.m/");
  const auto v = with_prefix(tensors, "adam.v/");
  const auto& params = state.model.denoiser.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto mv = find_tensor(m, params[i].name).values();
    const auto vv = find_tensor(v, params[i].name).values();
    if (mv.size() != params[i].tensor.numel() || vv.size() != params[i].tensor.numel()) {
      throw DataError("optimizer state for '" + params[i].name + "' has the wrong size");
    }
    state.adam.m[i].assign(mv.begin(), mv.end());
    state.adam.v[i].assign(vv.begin(), vv.end());
  }
  state.step = static_cast<std::size_t>(find_tensor(tensors, "train.step").item());
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
  save_checkpoint(path, checkpoint_tensors(state));
}

TrainState load_train_state(const ExperimentConfig& config, const std::filesystem::path& path) {
  TrainState state(config);
  restore_checkpoint(state, load_checkpoint(path));
  return state;
}

Model load_model(const ExperimentConfig& config, const std::filesystem::path& path) {
  Model model(config);
  const auto tensors = load_checkpoint(path);
  check_meta(config, tensors);
  model.denoiser.load_parameters(with_prefix(tensors, "param/"));
  return model;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

Tensor stack_normals(const std::vector<Rng*>& rngs, const Shape& per) {
  std::vector<double> out;
  out.reserve(rngs.size() * shape_numel(per));
  for (Rng* r : rngs) {
    const Tensor t = r->normal_tensor(per);
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  Shape shape = per;
  shape.insert(shape.begin(), rngs.size());
  return Tensor(std::move(shape), std::move(out));
}

Tensor scaled(const Tensor& t, double s) {
  std::vector<double> v(t.values().begin(), t.values().end());
  for (double& x : v) {
    x *= s;
  }
  return Tensor(t.shape(), std::move(v));
}

} // namespace

InferResult infer_with(
    const DenoiseFn& denoise,
    const InferSetup& setup,
    const PoseSeq2D& x2d,
    const InferOptions& options,
    const ProjectionContext* projection) {
  if (!setup.skeleton || !setup.schedule) {
    throw ContractError("infer needs a skeleton and a schedule");
  }
  if (options.hypotheses < 1) {
    throw ConfigError("hypothesis count must be >= 1");
  }
  x2d.validate();
  const Skeleton& sk = *setup.skeleton;
  const DiffusionSchedule& sch = *setup.schedule;
  const std::size_t h = options.hypotheses;
  const std::size_t n = x2d.frames;
  const std::size_t j = sk.joint_count();
  const std::size_t nb = sk.bone_count();
  if (x2d.joints != j) {
    throw ContractError("2D input has " + std::to_string(x2d.joints) + " joints, skeleton has " + std::to_string(j));
  }
  const auto ts = timestep_subsequence(sch.T, static_cast<int>(options.steps));
  NoGradGuard no_grad;

  std::vector<double> xv;
  for (std::size_t k = 0; k < h; ++k) {
    xv.insert(xv.end(), x2d.coords.begin(), x2d.coords.end());
  }
  const Tensor x2 = Tensor(Shape{h, n, j, 2}, std::move(xv));

  std::vector<Rng> rngs;
  std::vector<Rng*> rng_ptrs;
  rngs.reserve(h);
  for (std::size_t k = 0; k < h; ++k) {
    rngs.emplace_back(options.seed + k);
  }
  for (auto& r : rngs) {
    rng_ptrs.push_back(&r);
  }

  const auto& d = setup.diffusion;
  const bool disentangled = setup.input_mode == InputMode::Disentangled;
  Tensor state_l;
  Tensor state_d;
  Tensor state_j;
  if (disentangled) {
    // Each hypothesis draws its length noise then its direction noise from
    // its own stream, so sets for smaller H are prefixes of larger ones.
    std::vector<double> lv;
    std::vector<double> dv;
    for (auto& r : rngs) {
      const Tensor l = r.normal_tensor({n, nb});
      const Tensor dd = r.normal_tensor({n, nb, 3});
      lv.insert(lv.end(), l.values().begin(), l.values().end());
      dv.insert(dv.end(), dd.values().begin(), dd.values().end());
    }
    state_l = Tensor(Shape{h, n, nb}, std::move(lv));
    state_d = Tensor(Shape{h, n, nb, 3}, std::move(dv));
  } else {
    state_j = stack_normals(rng_ptrs, {n, j, 3});
  }

  Tensor y0;
  BoneTensors last;
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t = ts[i];
    const int t_next = ts[i + 1];
    const std::vector<int> t_batch(h, t);
    const Tensor fused = disentangled ? fuse_inputs(sk, x2, state_l, state_d) : fuse_joint_inputs(x2, state_j);
    y0 = denoise(fused, t_batch);
    if (y0.shape() != Shape{h, n, j, 3}) {
      throw ContractError("denoiser returned " + shape_to_string(y0.shape()) + ", expected [H, N, J, 3]");
    }
    if (disentangled) {
      last = decompose_tensor(sk, y0);
      state_l = ddim_step(sch, scaled(last.lengths, d.scale_length), state_l, t, t_next);
      state_d = ddim_step(sch, scaled(last.dirs, d.scale_dir), state_d, t, t_next);
    } else {
      state_j = ddim_step(sch, scaled(y0, d.scale_joint), state_j, t, t_next);
    }
  }

  InferResult out;
  out.set.steps = options.steps;
  out.set.timesteps = ts;
  for (std::size_t k = 0; k < h; ++k) {
    out.set.seeds.push_back(options.seed + k);
  }
  const auto yv = y0.values();
  for (std::size_t k = 0; k < h; ++k) {
    PoseSeq3D pose;
    BoneDecomp bones(n, nb);
    if (disentangled) {
      const auto lv = state_l.values();
      const auto dv = state_d.values();
      const auto valid = last.valid.values();
      for (std::size_t i = 0; i < n * nb; ++i) {
        const std::size_t g = k * n * nb + i;
        bones.lengths[i] = lv[g] / d.scale_length;
        bones.degenerate[i] = valid[g] > 0.5 ? 0 : 1;
        for (int c = 0; c < 3; ++c) {
          bones.dirs[i * 3 + static_cast<std::size_t>(c)] = bones.degenerate[i] ? 0.0 : dv[g * 3 + static_cast<std::size_t>(c)] / d.scale_dir;
        }
      }
      // The root comes from the clean estimate; bones alone cannot place it.
      std::vector<Vec3> roots(n);
      for (std::size_t f = 0; f < n; ++f) {
        const std::size_t base = ((k * n + f) * j + sk.root()) * 3;
        roots[f] = {yv[base], yv[base + 1], yv[base + 2]};
      }
      pose = reconstruct(sk, roots, bones);
    } else {
      pose = PoseSeq3D(n, j);
      const auto sv = state_j.values();
      for (std::size_t i = 0; i < n * j * 3; ++i) {
        pose.coords[i] = sv[k * n * j * 3 + i] / d.scale_joint;
      }
      bones = decompose(sk, pose);
    }
    out.set.hypotheses.push_back(std::move(pose));
    out.bones.push_back(std::move(bones));
  }

  if (projection) {
    if (projection->root.size() != n) {
      throw ContractError("projection context needs one root position per frame");
    }
    HypothesisSet placed = out.set;
    for (auto& hyp : placed.hypotheses) {
      for (std::size_t f = 0; f < n; ++f) {
        double shift[3];
        for (int c = 0; c < 3; ++c) {
          shift[c] = projection->root[f][static_cast<std::size_t>(c)] - hyp.joint(f, sk.root())[c];
        }
        for (std::size_t q = 0; q < j; ++q) {
          for (int c = 0; c < 3; ++c) {
            hyp.joint(f, q)[c] += shift[c];
          }
        }
      }
      hyp.frame_ref = FrameOfReference::Camera;
    }
    Aggregation agg = aggregate(placed, x2d, &projection->camera);
    for (PoseSeq3D* p : {&agg.p_agg, &agg.j_agg}) {
      for (std::size_t f = 0; f < n; ++f) {
        for (std::size_t q = 0; q < j; ++q) {
          for (int c = 0; c < 3; ++c) {
            p->joint(f, q)[c] -= projection->root[f][static_cast<std::size_t>(c)];
          }
        }
      }
      p->frame_ref = FrameOfReference::RootRelative;
    }
    out.p_agg = std::move(agg.p_agg);
    out.j_agg = std::move(agg.j_agg);
  } else {
    HypothesisSet rel = out.set;
    for (auto& hyp : rel.hypotheses) {
      hyp = root_relative(hyp, sk.root());
    }
    Aggregation agg = aggregate(rel, x2d, nullptr);
    out.p_agg = std::move(agg.p_agg);
    out.j_agg = std::move(agg.j_agg);
    out.mean_fallback = true;
  }
  return out;
}

InferResult infer(const Model& model, const PoseSeq2D& x2d, const InferOptions& options, const ProjectionContext* projection) {
  InferSetup setup;
  setup.skeleton = &model.skeleton;
  setup.schedule = &model.schedule;
  setup.diffusion = model.config.diffusion;
  setup.input_mode = model.config.denoiser.input_mode;
  const DenoiseFn fn = [&model](const Tensor& fused, std::span<const int> t) { return model.denoiser.forward(fused, t); };
  return infer_with(fn, setup, x2d, options, projection);
}

// ---------------------------------------------------------------------------
// Reports

double Report::value(const std::string& sequence, const std::string& metric) const {
  for (const auto& r : records) {
    if (r.sequence == sequence && r.metric == metric) {
      return r.value;
    }
  }
  throw ContractError("report has no " + metric + " for " + sequence);
}

bool Report::has(const std::string& sequence, const std::string& metric) const {
  return std::any_of(records.begin(), records.end(), [&](const MetricRecord& r) { return r.sequence == sequence && r.metric == metric; });
}

std::string Report::to_json() const {
  json j;
  j["format"] = "kinediff-report";
  j["version"] = 1;
  j["split"] = split;
  j["hypotheses"] = hypotheses;
  j["steps"] = steps;
  j["seed"] = seed;
  j["aggregation"] = hypotheses == 1 ? "none" : (mean_fallback ? "mean_fallback" : "jpma_reprojection");
  j["records"] = json::array();
  for (const auto& r : records) {
    j["records"].push_back({
        {"split", r.split},
        {"sequence", r.sequence},
        {"metric", r.metric},
        {"value", r.value},
        {"unit", r.unit},
        {"protocol", r.protocol},
    });
  }
  return j.dump(2) + "\n";
}

std::string Report::to_text() const {
  std::ostringstream os;
  for (const auto& r : records) {
    char value[64];
    std::snprintf(value, sizeof value, "%.6f", r.value);
    os << r.split << "/" << r.sequence << "/" << r.metric << " = " << value << " " << r.unit << " [" << r.protocol << "]\n";
  }
  return os.str();
}

Report parse_report(const std::string& text) {
  Report r;
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "kinediff-report") {
      throw DataError("not a kinediff report (field format)");
    }
    r.split = j.at("split").get<std::string>();
    r.hypotheses = j.at("hypotheses").get<std::size_t>();
    r.steps = j.at("steps").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mean_fallback = j.at("aggregation").get<std::string>() == "mean_fallback";
    for (const auto& e : j.at("records")) {
      r.records.push_back({
          e.at("split").get<std::string>(),
          e.at("sequence").get<std::string>(),
          e.at("metric").get<std::string>(),
          e.at("value").get<double>(),
          e.at("unit").get<std::string>(),
          e.at("protocol").get<std::string>(),
      });
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct ClipMetrics {
  std::vector<std::pair<std::string, double>> values;
  double weight = 0.0;          // frames
  double velocity_weight = 0.0; // frames - 1
};

} // namespace

Report evaluate_with(
    const WindowPredictor& predict,
    const Skeleton& skeleton,
    const WindowSpec& window_spec,
    const Dataset& data,
    const EvalOptions& options) {
  const auto clips = data.split(options.split);
  if (clips.empty()) {
    throw ConfigError("no clips in split '" + options.split + "'");
  }
  const std::size_t j = skeleton.joint_count();
  const std::size_t h = options.hypotheses;
  const bool probabilistic = h > 1;
  Report report;
  report.split = options.split;
  report.hypotheses = h;
  report.steps = options.steps;
  report.seed = options.seed;

  std::map<std::string, std::pair<std::string, std::string>> meta; // metric -> unit, protocol
  std::vector<std::string> order;
  std::vector<ClipMetrics> per_clip;
  std::size_t window_counter = 0;
  bool any_fallback = false;

  for (const Clip* clip : clips) {
    if (clip->pose3d.joints != j) {
      throw DataError("clip " + clip->name + " has " + std::to_string(clip->pose3d.joints) + " joints, skeleton has " + std::to_string(j));
    }
    const std::size_t len = clip->pose3d.frames;
    const PoseSeq3D gt = root_relative(clip->pose3d, skeleton.root());
    std::vector<PoseSeq3D> hyps(h, PoseSeq3D(len, j));
    PoseSeq3D p_agg(len, j);
    PoseSeq3D j_agg(len, j);
    const auto windows = make_windows(len, window_spec);
    for (const Window& w : windows) {
      PoseSeq2D x2d(w.frames.size(), j);
      ProjectionContext ctx;
      for (std::size_t i = 0; i < w.frames.size(); ++i) {
        std::copy_n(clip->pose2d.joint(w.frames[i], 0), j * 2, x2d.joint(i, 0));
        const double* r = clip->pose3d.joint(w.frames[i], skeleton.root());
        ctx.root.push_back({r[0], r[1], r[2]});
      }
      const bool camera_space = clip->camera && clip->pose3d.frame_ref == FrameOfReference::Camera;
      if (camera_space) {
        ctx.camera = *clip->camera;
      }
      InferOptions io{h, options.steps, options.seed + (static_cast<std::uint64_t>(window_counter++) << 20)};
      const InferResult res = predict(*clip, w, x2d, io, camera_space ? &ctx : nullptr);
      any_fallback = any_fallback || res.mean_fallback;
      auto place = [&](std::size_t model_idx, std::size_t raw) {
        for (std::size_t k = 0; k < h; ++k) {
          const PoseSeq3D& src = res.set.hypotheses.at(k);
          const double* root = src.joint(model_idx, skeleton.root());
          for (std::size_t q = 0; q < j; ++q) {
            for (int c = 0; c < 3; ++c) {
              hyps[k].joint(raw, q)[c] = src.joint(model_idx, q)[c] - root[c];
            }
          }
        }
        std::copy_n(res.p_agg.joint(model_idx, 0), j * 3, p_agg.joint(raw, 0));
        std::copy_n(res.j_agg.joint(model_idx, 0), j * 3, j_agg.joint(raw, 0));
      };
      if (window_spec.sample_type == SampleType::Seq2Seq) {
        for (std::size_t i = 0; i < w.frames.size(); ++i) {
          if (!w.padded[i]) {
            place(i, w.frames[i]);
          }
        }
      } else {
        place(w.center, w.target);
      }
    }

    const PoseSeq3D& pred = probabilistic ? j_agg : hyps.front();
    ClipMetrics cm;
    cm.weight = static_cast<double>(len);
    cm.velocity_weight = static_cast<double>(len - 1);
    auto put = [&](const std::string& name, double v, const std::string& unit, const std::string& protocol) {
      cm.values.emplace_back(name, v);
      if (!meta.count(name)) {
        meta[name] = {unit, protocol};
        order.push_back(name);
      }
    };
    put("mpjpe", mpjpe(pred, gt), "mm", "root_aligned");
    put("p_mpjpe", p_mpjpe(pred, gt), "mm", "procrustes_similarity");
    put("n_mpjpe", n_mpjpe(pred, gt), "mm", "root_aligned,scale_normalized");
    put("mpjve", mpjve(pred, gt), "mm/frame", "root_aligned,velocity");
    const PckAuc pa = pck_auc(root_relative(pred, skeleton.root()), gt);
    put("pck", pa.pck, "fraction", "root_relative,threshold=150mm");
    put("auc", pa.auc, "fraction", "root_relative,thresholds=0:5:150mm");
    const auto levels = mpjpe_per_hierarchy(pred, gt, skeleton);
    for (std::size_t k = 0; k < levels.size(); ++k) {
      if (!std::isnan(levels[k])) {
        put("mpjpe_level_" + std::to_string(k), levels[k], "mm", "root_aligned,hierarchy_level=" + std::to_string(k));
      }
    }
    if (probabilistic) {
      HypothesisSet hs;
      hs.hypotheses = hyps;
      const BestScores best = select_best(hs, gt);
      const std::string agg = any_fallback ? "mean_fallback" : "reprojection";
      put("p_best", best.p_best, "mm", "root_aligned,oracle_pose_selection");
      put("j_best", best.j_best, "mm", "root_aligned,oracle_joint_selection");
      put("p_agg", mpjpe(p_agg, gt), "mm", "root_aligned,pose_aggregation=" + agg);
      put("j_agg", mpjpe(j_agg, gt), "mm", "root_aligned,joint_aggregation=" + agg);
    }
    for (const auto& [name, v] : cm.values) {
      report.records.push_back({options.split, clip->name, name, v, meta[name].first, meta[name].second});
    }
    per_clip.push_back(std::move(cm));
  }

  // Frame-weighted means over the split; velocity errors weight by frame pairs.
  for (const auto& name : order) {
    double sum = 0.0;
    double weight = 0.0;
    for (const auto& cm : per_clip) {
      for (const auto& [metric, v] : cm.values) {
        if (metric == name) {
          const double w = name == "mpjve" ? cm.velocity_weight : cm.weight;
          sum += w * v;
          weight += w;
        }
      }
    }
    report.records.push_back({options.split, "ALL", name, weight > 0.0 ? sum / weight : 0.0, meta[name].first, meta[name].second});
  }
  report.mean_fallback = any_fallback;
  return report;
}

Report evaluate(const Model& model, const Dataset& data, const EvalOptions& options) {
  const WindowPredictor predict = [&model](const Clip&, const Window&, const PoseSeq2D& x2d, const InferOptions& io, const ProjectionContext* ctx) {
    return infer(model, x2d, io, ctx);
  };
  return evaluate_with(predict, model.skeleton, model.config.window, data, options);
}

} // namespace kinediff
