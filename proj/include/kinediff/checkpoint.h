#pragma once

#include "kinediff/tensor.h"

#include <filesystem>
#include <string>
#include <vector>

namespace kinediff {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Binary parameter checkpoint:
///   "KDCK" | u32 version | u32 count |
///   count x (u32 name_len | name bytes | u32 rank | rank x u32 dim | f64 payload)
/// All integers and floats are little-endian.
constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Looks up `name`; throws DataError when absent.
const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);
const Tensor* try_find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

// Little-endian helpers shared by the binary formats.
namespace le {
void put_u32(std::vector<unsigned char>& out, std::uint32_t v);
void put_f32(std::vector<unsigned char>& out, float v);
void put_f64(std::vector<unsigned char>& out, double v);
std::uint32_t get_u32(const unsigned char* p);
float get_f32(const unsigned char* p);
double get_f64(const unsigned char* p);
} // namespace le

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);

} // namespace kinediff
