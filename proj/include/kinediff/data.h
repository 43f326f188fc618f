#pragma once

#include "kinediff/pose.h"
#include "kinediff/skeleton.h"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace kinediff {

enum class SampleType { Seq2Seq, Seq2Frame };

std::string to_string(SampleType type);
SampleType parse_sample_type(const std::string& s);

struct WindowSpec {
  std::size_t receptive_field = 27;
  SampleType sample_type = SampleType::Seq2Seq;
  std::size_t tds = 1;

  void validate() const;
};

/// Raw frame indices feeding one model window.
struct Window {
  std::vector<std::size_t> frames;   // F entries, clamped into the sequence
  std::vector<unsigned char> padded; // 1 where the index was edge-replicated
  std::size_t pad = 0;               // number of padded entries
  std::size_t center = 0;            // seq2frame: model index of the target
  std::size_t target = 0;            // seq2frame: raw target frame
};

/// seq2seq: windows of F*tds raw frames subsampled by tds; when tds > 1 there
/// are tds phase-shifted window sets so every raw frame is predicted exactly
/// once. The tail is padded by repeating the last frame.
/// seq2frame: one centered window per frame, edge-replicated at both ends.
std::vector<Window> make_windows(std::size_t seq_len, const WindowSpec& spec);

enum class MotionKind { Walk, Wave, Squat, Sway, Mixed };

std::string to_string(MotionKind kind);
MotionKind parse_motion_kind(const std::string& s);

struct SynthClip {
  PoseSeq3D pose3d; // camera space
  PoseSeq2D pose2d; // exact projection, normalized
  Camera camera;
};

/// Smooth sinusoidal joint-angle motion on the skeleton with constant bone
/// lengths, placed 3-5 m in front of a pinhole camera and projected exactly.
SynthClip synth_motion(const Skeleton& skeleton, std::size_t frames, std::uint64_t seed, MotionKind kind);

/// Mixed kinds cycle through walk, wave, squat and sway by clip index.
MotionKind motion_for_clip(MotionKind requested, std::size_t clip_index);

/// Dense pose array as stored on disk: N x J x C, C in {2, 3}.
struct PoseArray {
  std::uint32_t frames = 0;
  std::uint32_t joints = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;
};

inline constexpr std::uint32_t kPoseFileVersion = 1;
inline constexpr std::size_t kPoseHeaderBytes = 20;

/// "F3DP" | u32 version | u32 N | u32 J | u32 C | f32 payload, little-endian,
/// frame-major.
std::vector<unsigned char> encode_pose(const PoseArray& array);
PoseArray decode_pose(const std::vector<unsigned char>& bytes);

/// Binary F3DP unless the extension is .json, which selects the text form
/// {"frames", "joints", "channels", "data"}.
void write_pose_file(const std::filesystem::path& path, const PoseArray& array);
PoseArray read_pose_file(const std::filesystem::path& path);

PoseArray to_array(const PoseSeq3D& pose);
PoseArray to_array(const PoseSeq2D& pose);
PoseSeq3D to_pose3d(const PoseArray& array, FrameOfReference ref = FrameOfReference::Camera);
PoseSeq2D to_pose2d(const PoseArray& array);

struct Clip {
  std::string name;
  std::string split;
  PoseSeq3D pose3d;
  PoseSeq2D pose2d;
  std::optional<Camera> camera;
};

struct Dataset {
  std::string skeleton = "h36m17";
  std::vector<Clip> clips;

  std::vector<const Clip*> split(const std::string& name) const;
};

/// Directory layout: manifest.json listing clips and their split,
/// cameras.json with intrinsics, and one .f3dp file per 2D and 3D sequence.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

struct SynthOptions {
  std::size_t joints = 17;
  std::size_t frames = 27;
  std::size_t train_clips = 16;
  std::size_t test_clips = 0;
  std::uint64_t seed = 0;
  MotionKind kind = MotionKind::Mixed;
};

/// Train clips use seeds seed+i; test clips seed+1000000+i.
Dataset synth_dataset(const Skeleton& skeleton, const SynthOptions& options);

} // namespace kinediff
