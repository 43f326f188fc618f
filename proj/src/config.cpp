#include "kinediff/config.h"

#include "kinediff/errors.h"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace kinediff {

using json = nlohmann::json;

Skeleton SkeletonSpec::build() const {
  if (preset == "h36m17") {
    if (!hierarchy) {
      return build_h36m_skeleton();
    }
    const Skeleton base = build_h36m_skeleton();
    return Skeleton::from_parents(base.parents(), base.joint_names(), hierarchy);
  }
  if (preset != "custom") {
    throw ConfigError("skeleton.preset must be \"h36m17\" or \"custom\", got \"" + preset + "\"");
  }
  if (parents.empty()) {
    throw ConfigError("skeleton.parents is required for a custom skeleton");
  }
  try {
    return Skeleton::from_parents(parents, joint_names, hierarchy);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("skeleton: ") + e.what());
  }
}

void ExperimentConfig::validate() const {
  const Skeleton s = skeleton.build();
  window.validate();
  denoiser.validate();
  if (denoiser.frames != window.receptive_field) {
    throw ConfigError("denoiser frames must equal window.receptive_field");
  }
  if (denoiser.joints != s.joint_count()) {
    throw ConfigError("denoiser joints must equal the skeleton joint count");
  }
  if (diffusion.T < 1) {
    throw ConfigError("diffusion.T must be >= 1");
  }
  if (!(diffusion.cosine_s > 0.0)) {
    throw ConfigError("diffusion.cosine_s must be positive");
  }
  if (diffusion.hypotheses < 1) {
    throw ConfigError("diffusion.H must be >= 1");
  }
  if (diffusion.steps < 1 || diffusion.steps > static_cast<std::size_t>(diffusion.T)) {
    throw ConfigError("diffusion.W must be in [1, T]");
  }
  for (double v : {diffusion.scale_length, diffusion.scale_dir, diffusion.scale_joint}) {
    if (!(v > 0.0)) {
      throw ConfigError("diffusion scales must be positive");
    }
  }
  loss.validate(s.joint_count());
  if (!(optimizer.lr > 0.0)) {
    throw ConfigError("optimizer.lr must be positive");
  }
  if (!(optimizer.lr_decay > 0.0 && optimizer.lr_decay <= 1.0)) {
    throw ConfigError("optimizer.lr_decay must be in (0, 1]");
  }
  if (optimizer.batch_size < 1) {
    throw ConfigError("optimizer.batch_size must be >= 1");
  }
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must be in [0, 1)");
  }
  if (!(optimizer.eps > 0.0) || !(optimizer.grad_clip >= 0.0)) {
    throw ConfigError("optimizer.eps must be positive and optimizer.grad_clip nonnegative");
  }
}

namespace {

// Reads typed fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) {
      throw ConfigError(path_ + " must be an object");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) {
      return;
    }
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(obj_.contains(key) ? obj_.at(key) : empty, where(key));
  }

  std::string where(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& item : obj_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown config key " + where(item.key()));
      }
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E, typename F>
void get_enum(Section& s, const std::string& key, E& out, F parse) {
  std::string text;
  if (!s.has(key)) {
    return;
  }
  s.get(key, text);
  out = parse(text);
}

} // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "");

  Section sk = top.sub("skeleton");
  sk.get("preset", c.skeleton.preset);
  sk.get("parents", c.skeleton.parents);
  sk.get("joint_names", c.skeleton.joint_names);
  if (sk.has("hierarchy")) {
    std::vector<int> h;
    sk.get("hierarchy", h);
    c.skeleton.hierarchy = h;
  }
  sk.finish();
  if (!c.skeleton.parents.empty() && c.skeleton.preset == "h36m17") {
    throw ConfigError("skeleton.parents requires skeleton.preset \"custom\"");
  }

  Section win = top.sub("window");
  win.get("receptive_field", c.window.receptive_field);
  get_enum(win, "sample_type", c.window.sample_type, parse_sample_type);
  win.get("tds", c.window.tds);
  win.finish();

  Section den = top.sub("denoiser");
  den.get("channels", c.denoiser.channels);
  den.get("depth", c.denoiser.depth);
  den.get("heads", c.denoiser.heads);
  den.get("mlp_ratio", c.denoiser.mlp_ratio);
  get_enum(den, "input_mode", c.denoiser.input_mode, parse_input_mode);
  get_enum(den, "output_mode", c.denoiser.output_mode, parse_output_mode);
  den.get("use_hie", c.denoiser.use_hie);
  den.finish();

  Section kh = top.sub("khst");
  kh.get("enabled", c.denoiser.use_khst);
  get_enum(kh, "alpha_sharing", c.denoiser.alpha_sharing, parse_alpha_sharing);
  kh.finish();

  Section dif = top.sub("diffusion");
  dif.get("T", c.diffusion.T);
  dif.get("cosine_s", c.diffusion.cosine_s);
  dif.get("H", c.diffusion.hypotheses);
  dif.get("W", c.diffusion.steps);
  dif.get("scale_length", c.diffusion.scale_length);
  dif.get("scale_dir", c.diffusion.scale_dir);
  dif.get("scale_joint", c.diffusion.scale_joint);
  dif.finish();

  Section loss = top.sub("loss");
  loss.get("w_pos", c.loss.w_pos);
  loss.get("w_dis", c.loss.w_dis);
  loss.get("w_temp", c.loss.w_temp);
  loss.get("w_vel", c.loss.w_vel);
  loss.get("joint_weights", c.loss.joint_weights);
  loss.finish();

  Section opt = top.sub("optimizer");
  opt.get("lr", c.optimizer.lr);
  opt.get("lr_decay", c.optimizer.lr_decay);
  opt.get("steps", c.optimizer.steps);
  opt.get("batch_size", c.optimizer.batch_size);
  opt.get("beta1", c.optimizer.beta1);
  opt.get("beta2", c.optimizer.beta2);
  opt.get("eps", c.optimizer.eps);
  opt.get("grad_clip", c.optimizer.grad_clip);
  opt.get("checkpoint_every", c.optimizer.checkpoint_every);
  opt.get("log_every", c.optimizer.log_every);
  opt.finish();

  Section seeds = top.sub("seeds");
  seeds.get("init", c.seeds.init);
  seeds.get("train", c.seeds.train);
  seeds.get("sample", c.seeds.sample);
  seeds.finish();

  top.finish();

  c.denoiser.frames = c.window.receptive_field;
  c.denoiser.joints = c.skeleton.build().joint_count();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string dump_config(const ExperimentConfig& c) {
  json j;
  j["skeleton"]["preset"] = c.skeleton.preset;
  if (c.skeleton.preset == "custom") {
    j["skeleton"]["parents"] = c.skeleton.parents;
    j["skeleton"]["joint_names"] = c.skeleton.joint_names;
  }
  if (c.skeleton.hierarchy) {
    j["skeleton"]["hierarchy"] = *c.skeleton.hierarchy;
  }
  j["window"] = {
      {"receptive_field", c.window.receptive_field},
      {"sample_type", to_string(c.window.sample_type)},
      {"tds", c.window.tds},
  };
  j["denoiser"] = {
      {"channels", c.denoiser.channels},
      {"depth", c.denoiser.depth},
      {"heads", c.denoiser.heads},
      {"mlp_ratio", c.denoiser.mlp_ratio},
      {"input_mode", to_string(c.denoiser.input_mode)},
      {"output_mode", to_string(c.denoiser.output_mode)},
      {"use_hie", c.denoiser.use_hie},
  };
  j["khst"] = {{"enabled", c.denoiser.use_khst}, {"alpha_sharing", to_string(c.denoiser.alpha_sharing)}};
  j["diffusion"] = {
      {"T", c.diffusion.T},
      {"cosine_s", c.diffusion.cosine_s},
      {"H", c.diffusion.hypotheses},
      {"W", c.diffusion.steps},
      {"scale_length", c.diffusion.scale_length},
      {"scale_dir", c.diffusion.scale_dir},
      {"scale_joint", c.diffusion.scale_joint},
  };
  j["loss"] = {
      {"w_pos", c.loss.w_pos},
      {"w_dis", c.loss.w_dis},
      {"w_temp", c.loss.w_temp},
      {"w_vel", c.loss.w_vel},
      {"joint_weights", c.loss.joint_weights},
  };
  j["optimizer"] = {
      {"lr", c.optimizer.lr},
      {"lr_decay", c.optimizer.lr_decay},
      {"steps", c.optimizer.steps},
      {"batch_size", c.optimizer.batch_size},
      {"beta1", c.optimizer.beta1},
      {"beta2", c.optimizer.beta2},
      {"eps", c.optimizer.eps},
      {"grad_clip", c.optimizer.grad_clip},
      {"checkpoint_every", c.optimizer.checkpoint_every},
      {"log_every", c.optimizer.log_every},
  };
  j["seeds"] = {{"init", c.seeds.init}, {"train", c.seeds.train}, {"sample", c.seeds.sample}};
  return j.dump(2) + "\n";
}

} // namespace kinediff
