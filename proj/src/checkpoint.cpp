#include "kinediff/checkpoint.h"

#include "kinediff/errors.h"

#include <bit>
#include <cstring>
#include <fstream>

namespace kinediff {

namespace le {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
}

void put_f32(std::vector<unsigned char>& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

void put_f64(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
      (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) {
  return std::bit_cast<float>(get_u32(p));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

} // namespace le

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw DataError("short write to " + path.string());
  }
}

std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<unsigned char> out = {'K', 'D', 'C', 'K'};
  le::put_u32(out, kCheckpointVersion);
  le::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    le::put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    le::put_u32(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) {
      le::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (double v : nt.tensor.values()) {
      le::put_f64(out, v);
    }
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      throw ParseError(std::string("truncated checkpoint while reading ") + what, pos);
    }
  };
  auto u32 = [&](const char* what) {
    need(4, what);
    const std::uint32_t v = le::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), "KDCK", 4) != 0) {
    throw ParseError("bad checkpoint magic", 0);
  }
  pos = 4;
  const std::uint32_t version = u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::uint32_t count = u32("tensor count");
  std::vector<NamedTensor> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = u32("name length");
    need(name_len, "name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const std::uint32_t rank = u32("rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(u32("dimension"));
      numel *= shape.back();
      if (numel > (bytes.size() - pos) / 8 + 1) {
        throw ParseError("tensor '" + name + "' dimensions exceed file size", pos);
      }
    }
    need(numel * 8, "payload");
    std::vector<double> values(numel);
    for (std::uint64_t i = 0; i < numel; ++i) {
      values[i] = le::get_f64(bytes.data() + pos);
      pos += 8;
    }
    tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (pos != bytes.size()) {
    throw ParseError("trailing bytes after checkpoint payload", pos);
  }
  return tensors;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

const Tensor* try_find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& nt : tensors) {
    if (nt.name == name) {
      return &nt.tensor;
    }
  }
  return nullptr;
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  const Tensor* t = try_find_tensor(tensors, name);
  if (!t) {
    throw DataError("checkpoint has no tensor named '" + name + "'");
  }
  return *t;
}

} // namespace kinediff
