#include "kinediff/data.h"

#include "kinediff/checkpoint.h"
#include "kinediff/errors.h"
#include "kinediff/rng.h"

#include <Eigen/Geometry>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace kinediff {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(SampleType type) {
  return type == SampleType::Seq2Seq ? "seq2seq" : "seq2frame";
}

SampleType parse_sample_type(const std::string& s) {
  if (s == "seq2seq") {
    return SampleType::Seq2Seq;
  }
  if (s == "seq2frame") {
    return SampleType::Seq2Frame;
  }
  throw ConfigError("unknown sample type '" + s + "' (expected seq2seq or seq2frame)");
}

void WindowSpec::validate() const {
  if (receptive_field < 1) {
    throw ConfigError("window.receptive_field must be >= 1");
  }
  if (tds < 1) {
    throw ConfigError("window.tds must be >= 1");
  }
}

std::vector<Window> make_windows(std::size_t seq_len, const WindowSpec& spec) {
  spec.validate();
  if (seq_len < 1) {
    throw ContractError("make_windows needs seq_len >= 1");
  }
  const std::size_t f = spec.receptive_field;
  const std::size_t tds = spec.tds;
  std::vector<Window> out;
  if (spec.sample_type == SampleType::Seq2Seq) {
    for (std::size_t phase = 0; phase < std::min(tds, seq_len); ++phase) {
      const std::size_t count = (seq_len - phase + tds - 1) / tds; // raw frames in this phase
      const std::size_t last = phase + (count - 1) * tds;
      for (std::size_t start = 0; start < count; start += f) {
        Window w;
        for (std::size_t i = 0; i < f; ++i) {
          const std::size_t k = start + i;
          const bool pad = k >= count;
          w.frames.push_back(pad ? last : phase + k * tds);
          w.padded.push_back(pad ? 1 : 0);
          w.pad += pad ? 1 : 0;
        }
        out.push_back(std::move(w));
      }
    }
    return out;
  }
  const auto half = static_cast<std::ptrdiff_t>(f / 2);
  const auto n = static_cast<std::ptrdiff_t>(seq_len);
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    Window w;
    w.center = f / 2;
    w.target = static_cast<std::size_t>(t);
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(f); ++k) {
      const std::ptrdiff_t raw = t + (k - half) * static_cast<std::ptrdiff_t>(tds);
      const std::ptrdiff_t clamped = std::clamp<std::ptrdiff_t>(raw, 0, n - 1);
      w.frames.push_back(static_cast<std::size_t>(clamped));
      w.padded.push_back(raw != clamped ? 1 : 0);
      w.pad += raw != clamped ? 1 : 0;
    }
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic motion

std::string to_string(MotionKind kind) {
  switch (kind) {
    case MotionKind::Walk:
      return "walk";
    case MotionKind::Wave:
      return "wave";
    case MotionKind::Squat:
      return "squat";
    case MotionKind::Sway:
      return "sway";
    case MotionKind::Mixed:
      return "mixed";
  }
  return "mixed";
}

MotionKind parse_motion_kind(const std::string& s) {
  for (auto k : {MotionKind::Walk, MotionKind::Wave, MotionKind::Squat, MotionKind::Sway, MotionKind::Mixed}) {
    if (to_string(k) == s) {
      return k;
    }
  }
  throw ConfigError("unknown motion kind '" + s + "'");
}

MotionKind motion_for_clip(MotionKind requested, std::size_t clip_index) {
  if (requested != MotionKind::Mixed) {
    return requested;
  }
  static constexpr MotionKind cycle[] = {MotionKind::Walk, MotionKind::Wave, MotionKind::Squat, MotionKind::Sway};
  return cycle[clip_index % 4];
}

namespace {

struct RestBone {
  Eigen::Vector3d dir;
  double length;
};

bool is_h36m(const Skeleton& s) {
  static const std::vector<int> parents = {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
  return s.parents() == parents;
}

// Body frame: x toward the subject's left, y up, z forward.
std::vector<RestBone> rest_pose(const Skeleton& s) {
  const std::size_t j = s.joint_count();
  std::vector<RestBone> rest(j, {Eigen::Vector3d::Zero(), 0.0});
  if (is_h36m(s)) {
    const double table[17][4] = {
        {0, 0, 0, 0},           {-1, 0, 0, 0.133},     {0, -1, 0.03, 0.445}, {0, -1, -0.05, 0.445},
        {1, 0, 0, 0.133},       {0, -1, 0.03, 0.445},  {0, -1, -0.05, 0.445}, {0, 1, 0.05, 0.233},
        {0, 1, 0, 0.257},       {0, 1, 0.15, 0.121},   {0, 1, 0.1, 0.115},   {1, 0.05, 0, 0.151},
        {0.1, -1, 0, 0.278},    {0, -1, 0.1, 0.252},   {-1, 0.05, 0, 0.151}, {-0.1, -1, 0, 0.278},
        {0, -1, 0.1, 0.252},
    };
    for (std::size_t q = 1; q < 17; ++q) {
      rest[q] = {Eigen::Vector3d(table[q][0], table[q][1], table[q][2]).normalized(), table[q][3]};
    }
    return rest;
  }
  // Generic tree: first-level limbs fan out in the image plane, deeper
  // joints continue their parent's direction.
  std::vector<double> angle(j, 0.0);
  for (std::size_t q : s.topological_order()) {
    if (s.parents()[q] < 0) {
      continue;
    }
    const auto p = static_cast<std::size_t>(s.parents()[q]);
    angle[q] = s.parents()[p] < 0 ? 2.0 * std::numbers::pi * static_cast<double>(q) / static_cast<double>(j) : angle[p];
    rest[q] = {Eigen::Vector3d(std::cos(angle[q]), std::sin(angle[q]), 0.1).normalized(), 0.2};
  }
  return rest;
}

struct Oscillator {
  Eigen::Vector3d axis;
  double amp;
  double freq; // multiple of the clip's base frequency
  double phase;
  double bias;
  bool rectified; // flexion-only joints use (1 - cos) / 2
};

} // namespace

SynthClip synth_motion(const Skeleton& skeleton, std::size_t frames, std::uint64_t seed, MotionKind kind) {
  if (frames < 1) {
    throw ConfigError("synthetic clips need at least one frame");
  }
  const std::size_t j = skeleton.joint_count();
  Rng rng(seed, 0x5e7d);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
  const auto rest = rest_pose(skeleton);
  const double two_pi = 2.0 * std::numbers::pi;
  const double omega = two_pi / uni(25.0, 40.0);
  const double phase0 = uni(0.0, two_pi);
  const Eigen::Vector3d ex = Eigen::Vector3d::UnitX();
  const Eigen::Vector3d ey = Eigen::Vector3d::UnitY();
  const Eigen::Vector3d ez = Eigen::Vector3d::UnitZ();

  std::vector<std::vector<Oscillator>> osc(j);
  auto amp = [&](double a) { return a * uni(0.7, 1.3); };
  auto add_osc = [&](std::size_t q, const Eigen::Vector3d& axis, double a, double freq, double phase, double bias, bool rect) {
    osc[q].push_back(Oscillator{axis, a, freq, phase, bias, rect});
  };
  if (is_h36m(skeleton)) {
    switch (kind) {
      case MotionKind::Walk:
      case MotionKind::Mixed:
        add_osc(2, ex, amp(0.45), 1, 0, 0, false);
        add_osc(5, ex, amp(0.45), 1, std::numbers::pi, 0, false);
        add_osc(3, -ex, amp(0.9), 1, 0.5, 0, true);
        add_osc(6, -ex, amp(0.9), 1, 0.5 + std::numbers::pi, 0, true);
        add_osc(12, ex, amp(0.4), 1, std::numbers::pi, 0, false);
        add_osc(15, ex, amp(0.4), 1, 0, 0, false);
        add_osc(13, ex, amp(0.5), 1, 0, 0.2, true);
        add_osc(16, ex, amp(0.5), 1, std::numbers::pi, 0.2, true);
        break;
      case MotionKind::Wave:
        add_osc(12, -ez, amp(0.6), 0.5, 0, 1.8, false);
        add_osc(13, ex, amp(0.8), 2, 0, 0.6, false);
        add_osc(15, ex, amp(0.2), 1, 0, 0, false);
        add_osc(9, ey, amp(0.3), 0.5, 0, 0, false);
        break;
      case MotionKind::Squat:
        add_osc(2, ex, amp(1.2), 1, 0, 0, true);
        add_osc(5, ex, amp(1.2), 1, 0, 0, true);
        add_osc(3, -ex, amp(2.0), 1, 0, 0, true);
        add_osc(6, -ex, amp(2.0), 1, 0, 0, true);
        add_osc(7, ex, amp(0.5), 1, 0, 0, true);
        add_osc(12, ex, amp(1.2), 1, 0, 0, true);
        add_osc(15, ex, amp(1.2), 1, 0, 0, true);
        break;
      case MotionKind::Sway:
        add_osc(7, ez, amp(0.3), 1, 0, 0, false);
        add_osc(8, ey, amp(0.4), 1, 0.7, 0, false);
        add_osc(12, ez, amp(0.5), 1, 0, -0.3, false);
        add_osc(15, ez, amp(0.5), 1, 0, 0.3, false);
        add_osc(10, ex, amp(0.3), 2, 0, 0, false);
        break;
    }
  }
  // Small random wobble on every joint keeps clips distinct.
  for (std::size_t q = 0; q < j; ++q) {
    if (skeleton.parents()[q] < 0) {
      continue;
    }
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    const double a = is_h36m(skeleton) ? uni(0.0, 0.15) : uni(0.1, 0.6);
    osc[q].push_back(Oscillator{axis, a, uni(0.5, 1.5), uni(0.0, two_pi), 0, false});
  }

  SynthClip clip;
  clip.camera = Camera{1145.0, 1145.0, 500.0, 500.0, 1000.0, 1000.0};
  const double yaw0 = std::numbers::pi + uni(-std::numbers::pi / 4, std::numbers::pi / 4);
  const double yaw_amp = uni(0.0, 0.2);
  const Eigen::Vector3d origin(uni(-0.4, 0.4), uni(-0.2, 0.2), uni(3.5, 4.5));
  const Eigen::Vector3d drift(uni(-0.01, 0.01), 0.0, uni(-0.01, 0.01));
  const double root_lean = uni(-0.1, 0.1);

  clip.pose3d = PoseSeq3D(frames, j, FrameOfReference::Camera);
  clip.pose2d = PoseSeq2D(frames, j);
  std::vector<Eigen::Matrix3d> global(j);
  std::vector<Eigen::Vector3d> pos(j);
  for (std::size_t n = 0; n < frames; ++n) {
    const double tn = static_cast<double>(n);
    const double yaw = yaw0 + yaw_amp * std::sin(0.5 * omega * tn + phase0);
    for (std::size_t q : skeleton.topological_order()) {
      Eigen::Matrix3d local = Eigen::Matrix3d::Identity();
      for (const auto& o : osc[q]) {
        const double arg = o.freq * omega * tn + o.phase + phase0;
        const double wave = o.rectified ? 0.5 * (1.0 - std::cos(arg)) : std::sin(arg);
        local = local * Eigen::AngleAxisd(o.bias + o.amp * wave, o.axis).toRotationMatrix();
      }
      const int parent = skeleton.parents()[q];
      if (parent < 0) {
        global[q] = Eigen::AngleAxisd(yaw, ey).toRotationMatrix() * Eigen::AngleAxisd(root_lean, ex).toRotationMatrix();
        pos[q] = Eigen::Vector3d::Zero();
        continue;
      }
      const auto p = static_cast<std::size_t>(parent);
      global[q] = global[p] * local;
      pos[q] = pos[p] + rest[q].length * (global[q] * rest[q].dir);
    }
    const Eigen::Vector3d offset = origin + tn * drift;
    for (std::size_t q = 0; q < j; ++q) {
      // Body y is up; camera y points down.
      const double cam[3] = {pos[q].x() + offset.x(), -pos[q].y() + offset.y(), pos[q].z() + offset.z()};
      std::copy_n(cam, 3, clip.pose3d.joint(n, q));
      const auto uv = clip.camera.project_normalized(cam);
      clip.pose2d.joint(n, q)[0] = uv[0];
      clip.pose2d.joint(n, q)[1] = uv[1];
    }
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Pose files

std::vector<unsigned char> encode_pose(const PoseArray& a) {
  if (a.channels != 2 && a.channels != 3) {
    throw ContractError("pose arrays have 2 or 3 channels, got " + std::to_string(a.channels));
  }
  const std::size_t count = static_cast<std::size_t>(a.frames) * a.joints * a.channels;
  if (a.values.size() != count) {
    throw DimensionError("pose array holds " + std::to_string(a.values.size()) + " values, header says " + std::to_string(count));
  }
  std::vector<unsigned char> out = {'F', '3', 'D', 'P'};
  out.reserve(kPoseHeaderBytes + 4 * count);
  le::put_u32(out, kPoseFileVersion);
  le::put_u32(out, a.frames);
  le::put_u32(out, a.joints);
  le::put_u32(out, a.channels);
  for (float v : a.values) {
    le::put_f32(out, v);
  }
  return out;
}

PoseArray decode_pose(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, "F3DP")) {
    throw ParseError("bad magic, expected F3DP", 0);
  }
  if (bytes.size() < kPoseHeaderBytes) {
    throw ParseError("truncated header", bytes.size());
  }
  const unsigned char* p = bytes.data();
  if (le::get_u32(p + 4) != kPoseFileVersion) {
    throw ParseError("unsupported version " + std::to_string(le::get_u32(p + 4)), 4);
  }
  PoseArray a;
  a.frames = le::get_u32(p + 8);
  a.joints = le::get_u32(p + 12);
  a.channels = le::get_u32(p + 16);
  if (a.frames == 0) {
    throw ParseError("frame count is zero", 8);
  }
  if (a.joints == 0) {
    throw ParseError("joint count is zero", 12);
  }
  if (a.channels != 2 && a.channels != 3) {
    throw ParseError("channel count must be 2 or 3, got " + std::to_string(a.channels), 16);
  }
  const unsigned __int128 count = static_cast<unsigned __int128>(a.frames) * a.joints * a.channels;
  if (count * 4 > (static_cast<unsigned __int128>(1) << 40)) {
    throw ParseError("dimension overflow in header", 8);
  }
  const std::size_t expected = kPoseHeaderBytes + static_cast<std::size_t>(count) * 4;
  if (bytes.size() < expected) {
    throw ParseError("truncated payload, expected " + std::to_string(expected) + " bytes", bytes.size());
  }
  if (bytes.size() > expected) {
    throw ParseError("trailing bytes after payload", expected);
  }
  a.values.resize(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    a.values[i] = le::get_f32(p + kPoseHeaderBytes + 4 * i);
  }
  return a;
}

namespace {

bool is_text_path(const fs::path& path) {
  return path.extension() == ".json";
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte == 0 ? 0 : e.byte - 1);
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << text;
}

} // namespace

void write_pose_file(const fs::path& path, const PoseArray& array) {
  if (!is_text_path(path)) {
    write_file_bytes(path, encode_pose(array));
    return;
  }
  encode_pose(array); // same validation as the binary form
  json j;
  j["format"] = "F3DP";
  j["version"] = kPoseFileVersion;
  j["frames"] = array.frames;
  j["joints"] = array.joints;
  j["channels"] = array.channels;
  j["data"] = array.values;
  write_text_file(path, j.dump(1) + "\n");
}

PoseArray read_pose_file(const fs::path& path) {
  if (!is_text_path(path)) {
    try {
      return decode_pose(read_file_bytes(path));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
  }
  const json j = read_json_file(path);
  PoseArray a;
  try {
    a.frames = j.at("frames").get<std::uint32_t>();
    a.joints = j.at("joints").get<std::uint32_t>();
    a.channels = j.at("channels").get<std::uint32_t>();
    a.values = j.at("data").get<std::vector<float>>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (a.frames == 0 || a.joints == 0 || (a.channels != 2 && a.channels != 3)) {
    throw DataError(path.string() + ": invalid frames/joints/channels");
  }
  if (a.values.size() != static_cast<std::size_t>(a.frames) * a.joints * a.channels) {
    throw DataError(path.string() + ": data length does not match frames*joints*channels");
  }
  return a;
}

PoseArray to_array(const PoseSeq3D& pose) {
  PoseArray a{static_cast<std::uint32_t>(pose.frames), static_cast<std::uint32_t>(pose.joints), 3, {}};
  a.values.assign(pose.coords.begin(), pose.coords.end());
  return a;
}

PoseArray to_array(const PoseSeq2D& pose) {
  PoseArray a{static_cast<std::uint32_t>(pose.frames), static_cast<std::uint32_t>(pose.joints), 2, {}};
  a.values.assign(pose.coords.begin(), pose.coords.end());
  return a;
}

PoseSeq3D to_pose3d(const PoseArray& a, FrameOfReference ref) {
  if (a.channels != 3) {
    throw DataError("expected a 3-channel pose array, got " + std::to_string(a.channels));
  }
  PoseSeq3D p(a.frames, a.joints, ref);
  std::copy(a.values.begin(), a.values.end(), p.coords.begin());
  p.validate();
  return p;
}

PoseSeq2D to_pose2d(const PoseArray& a) {
  if (a.channels != 2) {
    throw DataError("expected a 2-channel pose array, got " + std::to_string(a.channels));
  }
  PoseSeq2D p(a.frames, a.joints);
  std::copy(a.values.begin(), a.values.end(), p.coords.begin());
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<const Clip*> Dataset::split(const std::string& name) const {
  std::vector<const Clip*> out;
  for (const auto& c : clips) {
    if (c.split == name) {
      out.push_back(&c);
    }
  }
  return out;
}

void save_dataset(const fs::path& dir, const Dataset& data) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "kinediff-dataset";
  manifest["version"] = 1;
  manifest["skeleton"] = data.skeleton;
  manifest["clips"] = json::array();
  json cameras = json::object();
  for (const auto& c : data.clips) {
    const std::string f3 = c.name + ".3d.f3dp";
    const std::string f2 = c.name + ".2d.f3dp";
    write_pose_file(dir / f3, to_array(c.pose3d));
    write_pose_file(dir / f2, to_array(c.pose2d));
    json entry = {
        {"name", c.name},
        {"split", c.split},
        {"pose3d", f3},
        {"pose2d", f2},
        {"frame", c.pose3d.frame_ref == FrameOfReference::Camera ? "camera" : "root_relative"},
    };
    if (c.camera) {
      entry["camera"] = c.name;
      cameras[c.name] = {
          {"fx", c.camera->fx},
          {"fy", c.camera->fy},
          {"cx", c.camera->cx},
          {"cy", c.camera->cy},
          {"width", c.camera->width},
          {"height", c.camera->height},
      };
    }
    manifest["clips"].push_back(entry);
  }
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text_file(dir / "cameras.json", cameras.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw DataError("no manifest.json in " + dir.string());
  }
  const json manifest = read_json_file(manifest_path);
  json cameras = json::object();
  if (fs::exists(dir / "cameras.json")) {
    cameras = read_json_file(dir / "cameras.json");
  }
  Dataset data;
  auto field = [&](const json& obj, const std::string& key, const std::string& where) -> const json& {
    if (!obj.is_object() || !obj.contains(key)) {
      throw DataError(manifest_path.string() + ": missing field " + where + key);
    }
    return obj.at(key);
  };
  try {
    if (manifest.value("format", "") != "kinediff-dataset") {
      throw DataError(manifest_path.string() + ": field format must be \"kinediff-dataset\"");
    }
    data.skeleton = manifest.value("skeleton", "h36m17");
    const json& clips = field(manifest, "clips", "");
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const json& e = clips[i];
      const std::string where = "clips[" + std::to_string(i) + "].";
      Clip c;
      c.name = field(e, "name", where).get<std::string>();
      c.split = field(e, "split", where).get<std::string>();
      const auto ref = e.value("frame", "camera") == "camera" ? FrameOfReference::Camera : FrameOfReference::RootRelative;
      c.pose3d = to_pose3d(read_pose_file(dir / field(e, "pose3d", where).get<std::string>()), ref);
      c.pose2d = to_pose2d(read_pose_file(dir / field(e, "pose2d", where).get<std::string>()));
      if (c.pose3d.frames != c.pose2d.frames || c.pose3d.joints != c.pose2d.joints) {
        throw DataError(manifest_path.string() + ": " + where + "pose2d and pose3d differ in shape");
      }
      if (e.contains("camera") && !e.at("camera").is_null()) {
        const std::string key = e.at("camera").get<std::string>();
        const json& cj = field(cameras, key, "cameras.");
        Camera cam;
        cam.fx = field(cj, "fx", "cameras." + key + ".").get<double>();
        cam.fy = field(cj, "fy", "cameras." + key + ".").get<double>();
        cam.cx = field(cj, "cx", "cameras." + key + ".").get<double>();
        cam.cy = field(cj, "cy", "cameras." + key + ".").get<double>();
        cam.width = field(cj, "width", "cameras." + key + ".").get<double>();
        cam.height = field(cj, "height", "cameras." + key + ".").get<double>();
        try {
          cam.validate();
        } catch (const Error& err) {
          throw DataError("cameras." + key + ": " + err.what());
        }
        c.camera = cam;
      }
      data.clips.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  return data;
}

Dataset synth_dataset(const Skeleton& skeleton, const SynthOptions& options) {
  if (options.joints != skeleton.joint_count()) {
    throw ConfigError(
        "--joints " + std::to_string(options.joints) + " does not match the " +
        std::to_string(skeleton.joint_count()) + "-joint skeleton");
  }
  Dataset data;
  auto add = [&](const std::string& split, std::size_t i, std::uint64_t seed) {
    auto clip = synth_motion(skeleton, options.frames, seed, motion_for_clip(options.kind, i));
    std::ostringstream name;
    name << split << "_" << (i < 100 ? (i < 10 ? "00" : "0") : "") << i;
    data.clips.push_back({name.str(), split, std::move(clip.pose3d), std::move(clip.pose2d), clip.camera});
  };
  for (std::size_t i = 0; i < options.train_clips; ++i) {
    add("train", i, options.seed + i);
  }
  for (std::size_t i = 0; i < options.test_clips; ++i) {
    add("test", i, options.seed + 1000000 + i);
  }
  return data;
}

} // namespace kinediff
