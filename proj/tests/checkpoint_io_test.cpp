#include <gtest/gtest.h>

#include <fstream>

#include "sotu/checkpoint_io.hpp"
#include "test_util.hpp"

namespace sotu {
namespace {

using testing::expect_errc;

std::string hex(const std::vector<std::uint8_t>& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

ParamSet single_w() {
  ParamSet ps;
  ps.add("w", DenseTensor::vector({1.5}));
  return ps;
}

// Bytes and digest assembled independently with Python's struct/hashlib.
TEST(Checkpoint, EncodingOfOneTensorSetIsFrozen) {
  const auto bytes = serialize_paramset(single_w());
  EXPECT_EQ(hex(bytes),
            "534f54550100010000000000000001000000000000007701000000000000000100000000000000000000000000f83f");
  EXPECT_EQ(fingerprint(single_w()).hex(), "910e75805408f5e4b270537b5f915d24c4c84e903f1e38c88386278b3286ffc0");
}

TEST(Checkpoint, SaveLoadSingleTensor) {
  const auto dir = testing::scratch_dir("ckpt_single");
  save_paramset(single_w(), dir / "w.sotu");
  const auto back = load_paramset(dir / "w.sotu");
  EXPECT_TRUE(back.bit_identical(single_w()));
  EXPECT_EQ(fingerprint(back), fingerprint(single_w()));
}

TEST(Checkpoint, ThreeTensorsKeepOrderAndShapes) {
  ParamSet ps;
  ps.add("z", DenseTensor({2, 3}, {1, -2, 3.25, 0, 1e-300, -7}));
  ps.add("a", DenseTensor({4}, {0.1, 0.2, 0.3, -0.0}));
  ps.add("m", DenseTensor({1, 1, 1}, {42}));
  const auto back = deserialize_paramset(serialize_paramset(ps));
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.entries()[0].name, "z");
  EXPECT_EQ(back.entries()[1].name, "a");
  EXPECT_EQ(back.entries()[2].name, "m");
  EXPECT_EQ(back.at("m").shape(), (Shape{1, 1, 1}));
  EXPECT_TRUE(back.bit_identical(ps));
  // Negative zero survives.
  EXPECT_TRUE(std::signbit(back.at("a")[3]));
}

TEST(Checkpoint, WrongMagicIsFormatError) {
  auto bytes = serialize_paramset(single_w());
  bytes[0] = 'X';
  expect_errc(Errc::Format, [&] { deserialize_paramset(bytes); });
}

TEST(Checkpoint, VersionKindTruncationAndTrailingBytes) {
  const auto good = serialize_paramset(single_w());
  auto v = good;
  v[4] = 9;
  expect_errc(Errc::Format, [&] { deserialize_paramset(v); });
  // A paramset is not a sparse delta.
  expect_errc(Errc::Format, [&] { deserialize_sparse_delta(good); });
  for (std::size_t cut = 0; cut < good.size(); ++cut) {
    std::vector<std::uint8_t> t(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    expect_errc(Errc::Format, [&] { deserialize_paramset(t); });
  }
  auto extra = good;
  extra.push_back(0);
  expect_errc(Errc::Format, [&] { deserialize_paramset(extra); });
}

TEST(Checkpoint, NonFinitePayloadIsFormatError) {
  auto bytes = serialize_paramset(single_w());
  const auto nan = std::bit_cast<std::uint64_t>(std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < 8; ++i) bytes[bytes.size() - 8 + i] = static_cast<std::uint8_t>(nan >> (8 * i));
  expect_errc(Errc::Format, [&] { deserialize_paramset(bytes); });
}

TEST(Checkpoint, MissingFileIsIoError) {
  expect_errc(Errc::Io, [] { load_paramset("/nonexistent/dir/x.sotu"); });
}

TEST(SparseDeltaFile, EmptyAndOneEntryRoundtrips) {
  Rng rng(3);
  SparseDelta empty;
  empty.tensors.push_back({"w", {2, 2}, {}, {}});
  empty.keep_prob = 0.0;
  const auto dir = testing::scratch_dir("sdelta_small");
  save_sparse_delta(empty, dir / "e.sdelta");
  EXPECT_TRUE(load_sparse_delta(dir / "e.sdelta").bit_identical(empty));

  SparseDelta one;
  one.tensors.push_back({"a", {3}, {2}, {-0.5}});
  one.tensors.push_back({"b", {2, 2}, {0}, {4.0}});
  one.base = fingerprint(single_w());
  one.keep_prob = 0.1;
  one.seed = 7;
  save_sparse_delta(one, dir / "o.sdelta");
  const auto back = load_sparse_delta(dir / "o.sdelta");
  EXPECT_TRUE(back.bit_identical(one));
  EXPECT_EQ(back.base, one.base);
}

TEST(SparseDeltaFile, TruncatedIsFormatError) {
  SparseDelta d;
  d.tensors.push_back({"a", {3}, {0, 2}, {1.0, -1.0}});
  const auto bytes = serialize_sparse_delta(d);
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    expect_errc(Errc::Format, [&] { deserialize_sparse_delta(t); });
  }
}

TEST(SparseDeltaFile, UnsortedIndicesAreRejected) {
  SparseDelta d;
  d.tensors.push_back({"a", {3}, {2, 1}, {1.0, -1.0}});
  expect_errc(Errc::Format, [&] { deserialize_sparse_delta(serialize_sparse_delta(d)); });
  SparseDelta oob;
  oob.tensors.push_back({"a", {3}, {3}, {1.0}});
  expect_errc(Errc::Format, [&] { deserialize_sparse_delta(serialize_sparse_delta(oob)); });
}

TEST(Fingerprint, SensitiveToSignOrderAndName) {
  ParamSet a, b, c;
  a.add("x", DenseTensor::vector({1, 2}));
  a.add("y", DenseTensor::vector({3}));
  b.add("y", DenseTensor::vector({3}));
  b.add("x", DenseTensor::vector({1, 2}));
  c.add("x", DenseTensor::vector({1, -2}));
  c.add("y", DenseTensor::vector({3}));
  EXPECT_NE(fingerprint(a), fingerprint(b));
  EXPECT_NE(fingerprint(a), fingerprint(c));
  ParamSet shape_only;
  shape_only.add("x", DenseTensor({1, 2}, {1, 2}));
  shape_only.add("y", DenseTensor::vector({3}));
  EXPECT_NE(fingerprint(a), fingerprint(shape_only));
}

TEST(CheckpointProperties, RandomRoundtripsAreBitExact) {
  Rng rng(2024);
  const auto dir = testing::scratch_dir("ckpt_random");
  for (int i = 0; i < 100; ++i) {
    const auto ps = testing::random_paramset(rng);
    save_paramset(ps, dir / "p.sotu");
    const auto back = load_paramset(dir / "p.sotu");
    ASSERT_TRUE(back.bit_identical(ps)) << "instance " << i;
    EXPECT_EQ(fingerprint(back), fingerprint(ps));
    EXPECT_EQ(serialize_paramset(back), serialize_paramset(ps));

    const auto d = testing::random_sparse_delta(rng);
    save_sparse_delta(d, dir / "d.sdelta");
    ASSERT_TRUE(load_sparse_delta(dir / "d.sdelta").bit_identical(d)) << "instance " << i;
  }
}

}  // namespace
}  // namespace sotu
