#include "kinediff/checkpoint.h"
#include "kinediff/errors.h"
#include "kinediff/rng.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

namespace kinediff {
namespace {

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswers) {
  using A4 = std::array<std::uint32_t, 4>;
  using A2 = std::array<std::uint32_t, 2>;
  EXPECT_EQ(philox4x32(A4{0, 0, 0, 0}, A2{0, 0}), (A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(
      philox4x32(A4{0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, A2{0xffffffff, 0xffffffff}),
      (A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(
      philox4x32(A4{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, A2{0xa4093822, 0x299f31d0}),
      (A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42, 7);
  Rng b(42, 7);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
  }
  Rng c(42, 8);
  Rng d(42, 7);
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, UniformInOpenIntervalAndIntRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
    const auto k = r.uniform_int(3, 5);
    EXPECT_GE(k, 3u);
    EXPECT_LE(k, 5u);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(2);
  const int n = 200000;
  double s = 0.0;
  double s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  // 5 sigma bounds: sd(mean) = 1/sqrt(n), sd(var) = sqrt(2/n).
  EXPECT_LT(std::abs(mean), 5.0 / std::sqrt(n));
  EXPECT_LT(std::abs(var - 1.0), 5.0 * std::sqrt(2.0 / n));
}

std::vector<NamedTensor> sample_tensors() {
  return {
      {"alpha", Tensor(Shape{4}, {0.0, -1.5, 1e-300, 3.25})},
      {"w", Tensor(Shape{2, 3}, {1, 2, 3, 4, 5, 6})},
      {"scalar", Tensor::scalar(7.0)},
  };
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto bytes = encode_checkpoint(sample_tensors());
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1].name, "w");
  EXPECT_EQ(back[1].tensor.shape(), (Shape{2, 3}));
  EXPECT_EQ(back[0].tensor.values()[2], 1e-300);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, LayoutSizeArithmetic) {
  // magic 4 + version 4 + count 4, then per tensor name_len 4 + name + rank 4
  // + 4 * rank + 8 * numel.
  const std::size_t expect = 12 + (4 + 5 + 4 + 4 + 32) + (4 + 1 + 4 + 8 + 48) + (4 + 6 + 4 + 0 + 8);
  EXPECT_EQ(encode_checkpoint(sample_tensors()).size(), expect);
}

TEST(Checkpoint, TruncationAndBadMagicAreParseErrors) {
  auto bytes = encode_checkpoint(sample_tensors());
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
    std::vector<unsigned char> shorter(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_checkpoint(shorter), ParseError) << cut;
  }
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), ParseError);
}

TEST(Checkpoint, FileRoundTripAndLookup) {
  const auto path = std::filesystem::temp_directory_path() / "kinediff_ckpt_test.kdck";
  save_checkpoint(path, sample_tensors());
  const auto back = load_checkpoint(path);
  EXPECT_EQ(find_tensor(back, "scalar").item(), 7.0);
  EXPECT_EQ(try_find_tensor(back, "missing"), nullptr);
  EXPECT_THROW(find_tensor(back, "missing"), DataError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), DataError);
}

} // namespace
} // namespace kinediff
