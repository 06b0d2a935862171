#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "fadelab/checkpoint.hpp"
#include "fadelab/data.hpp"
#include "fadelab/error.hpp"
#include "test_util.hpp"

using namespace fadelab;
using fadelab::testing::scratch_dir;
using fadelab::testing::to_vec;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIo;
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                     const std::vector<std::uint8_t>& pixels, std::uint32_t magic = 0x00000803) {
  std::vector<std::uint8_t> out;
  put_be32(out, magic);
  put_be32(out, n);
  put_be32(out, rows);
  put_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n, const std::vector<std::uint8_t>& labels,
                                     std::uint32_t magic = 0x00000801) {
  std::vector<std::uint8_t> out;
  put_be32(out, magic);
  put_be32(out, n);
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

// Two 2x3 images.
const std::vector<std::uint8_t> kPixels = {0, 255, 51, 102, 1, 254, 17, 34, 0, 128, 255, 200};
const std::vector<std::uint8_t> kLabels = {7, 2};

}  // namespace

TEST(TwoMoons, NoiselessPointsLieOnTheArcs) {
  const Dataset ds = gen_two_moons(200, 0.0f, 3);
  ASSERT_EQ(ds.size(), 200u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double px = 3.5 * ds.inputs[2 * i] - 1.25;
    const double py = 2.0 * ds.inputs[2 * i + 1] - 0.75;
    if (ds.labels[i] == 0) {
      EXPECT_NEAR(px * px + py * py, 1.0, 1e-5) << i;
      EXPECT_GE(py, -1e-6);
    } else {
      EXPECT_NEAR((px - 1.0) * (px - 1.0) + (py - 0.5) * (py - 0.5), 1.0, 1e-5) << i;
      EXPECT_LE(py, 0.5 + 1e-6);
    }
  }
}

TEST(TwoMoons, SeededAndBalanced) {
  const Dataset a = gen_two_moons(101, 0.1f, 7);
  const Dataset b = gen_two_moons(101, 0.1f, 7);
  const Dataset c = gen_two_moons(101, 0.1f, 8);
  EXPECT_EQ(to_vec(a.inputs), to_vec(b.inputs));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(to_vec(a.inputs), to_vec(c.inputs));
  const auto ones = std::count(a.labels.begin(), a.labels.end(), 1);
  const auto zeros = static_cast<long>(a.size()) - ones;
  EXPECT_LE(std::abs(ones - zeros), 1);
  EXPECT_NO_THROW(a.validate());
  for (float v : a.inputs.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(TwoMoons, RejectsTinyN) {
  EXPECT_EQ(code_of([] { gen_two_moons(1, 0.0f, 0); }), ErrorCode::kInvalidArgument);
}

TEST(Idx, FixtureDecodesExactly) {
  const auto dir = scratch_dir("data_idx");
  write_bytes(dir / "img", idx_images(2, 2, 3, kPixels));
  write_bytes(dir / "lab", idx_labels(2, kLabels));
  const Dataset ds = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(ds.inputs.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{7, 2}));
  EXPECT_EQ(ds.num_classes, 10u);
  for (std::size_t i = 0; i < kPixels.size(); ++i) EXPECT_EQ(ds.inputs[i], kPixels[i] / 255.0f) << i;
  EXPECT_EQ(ds.inputs[0], 0.0f);
  EXPECT_EQ(ds.inputs[1], 1.0f);
  EXPECT_NO_THROW(ds.validate());
}

TEST(Idx, ErrorsAreDistinct) {
  const auto dir = scratch_dir("data_idx_err");
  write_bytes(dir / "img", idx_images(2, 2, 3, kPixels));
  write_bytes(dir / "lab", idx_labels(2, kLabels));
  write_bytes(dir / "bad_img", idx_images(2, 2, 3, kPixels, 0x00000801));
  write_bytes(dir / "bad_lab", idx_labels(2, kLabels, 0x00000803));
  write_bytes(dir / "lab3", idx_labels(3, {1, 2, 3}));
  write_bytes(dir / "short_img", idx_images(2, 2, 3, {1, 2, 3}));
  write_bytes(dir / "short_lab", idx_labels(2, {1}));
  write_bytes(dir / "stub", {0, 0, 8});

  EXPECT_EQ(code_of([&] { load_idx(dir / "bad_img", dir / "lab"); }), ErrorCode::kBadMagic);
  EXPECT_EQ(code_of([&] { load_idx(dir / "img", dir / "bad_lab"); }), ErrorCode::kBadMagic);
  EXPECT_EQ(code_of([&] { load_idx(dir / "img", dir / "lab3"); }), ErrorCode::kCountMismatch);
  EXPECT_EQ(code_of([&] { load_idx(dir / "short_img", dir / "lab"); }), ErrorCode::kTruncatedBlob);
  EXPECT_EQ(code_of([&] { load_idx(dir / "img", dir / "short_lab"); }), ErrorCode::kTruncatedBlob);
  EXPECT_EQ(code_of([&] { load_idx(dir / "stub", dir / "lab"); }), ErrorCode::kTruncatedBlob);
  EXPECT_EQ(code_of([&] { load_idx(dir / "missing", dir / "lab"); }), ErrorCode::kIo);
}

TEST(Idx, ShippedDigitsLoad) {
  const std::filesystem::path dir = FADELAB_DATA_DIR "/mnist-small";
  const Dataset test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  EXPECT_EQ(test.instance_shape(), (Shape{1, 28, 28}));
  EXPECT_EQ(test.num_classes, 10u);
  EXPECT_NO_THROW(test.validate());
  std::set<std::int32_t> classes(test.labels.begin(), test.labels.end());
  EXPECT_EQ(classes.size(), 10u);
}

TEST(Batches, SingleBatchWhenLarge) {
  const auto b = batches(10, 64, 5);
  ASSERT_EQ(b.size(), 1u);
  std::vector<std::size_t> sorted = b[0];
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Batches, CoverEveryIndexOnce) {
  for (std::size_t bs : {1u, 3u, 7u, 64u}) {
    const auto b = batches(50, bs, 11);
    EXPECT_EQ(b.size(), (50 + bs - 1) / bs);
    std::vector<std::size_t> all;
    for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
    EXPECT_EQ(b.back().size(), 50 - bs * (b.size() - 1));
    std::sort(all.begin(), all.end());
    ASSERT_EQ(all.size(), 50u);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(all[i], i);
  }
}

TEST(Batches, SeededSequence) {
  EXPECT_EQ(batches(40, 8, 3), batches(40, 8, 3));
  EXPECT_NE(batches(40, 8, 3), batches(40, 8, 4));
  EXPECT_EQ(code_of([] { batches(4, 0, 0); }), ErrorCode::kInvalidArgument);
  EXPECT_TRUE(batches(0, 4, 0).empty());
}

TEST(Dataset, SubsetAndBatch) {
  const Dataset ds = gen_two_moons(10, 0.0f, 1);
  const std::vector<std::size_t> rows = {4, 1};
  const Batch b = make_batch(ds, rows);
  EXPECT_EQ(b.x.shape(), (Shape{2, 2}));
  EXPECT_EQ(b.x[0], ds.inputs[8]);
  EXPECT_EQ(b.x[3], ds.inputs[3]);
  EXPECT_EQ(b.y, (std::vector<std::int32_t>{0, 1}));
  EXPECT_EQ(ds.head(3).size(), 3u);
  EXPECT_EQ(code_of([&] { ds.subset(std::vector<std::size_t>{10}); }), ErrorCode::kInvalidArgument);
}

TEST(Dataset, ValidateCatchesRangeAndLabels) {
  Dataset ds = gen_two_moons(4, 0.0f, 1);
  ds.labels[0] = 2;
  EXPECT_EQ(code_of([&] { ds.validate(); }), ErrorCode::kInvalidArgument);
  ds = gen_two_moons(4, 0.0f, 1);
  ds.inputs.mutable_data()[0] = 1.5f;
  EXPECT_EQ(code_of([&] { ds.validate(); }), ErrorCode::kInvalidArgument);
  ds = gen_two_moons(4, 0.0f, 1);
  ds.labels.pop_back();
  EXPECT_EQ(code_of([&] { ds.validate(); }), ErrorCode::kCountMismatch);
}

TEST(SavedSet, RoundTripIsBitwise) {
  const auto dir = scratch_dir("data_set");
  Dataset ds = gen_two_moons(33, 0.2f, 9);
  save_set(ds, dir / "s", {{"note", "x"}});
  const Dataset back = load_set(dir / "s");
  EXPECT_EQ(to_vec(back.inputs), to_vec(ds.inputs));
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.num_classes, ds.num_classes);
  EXPECT_EQ(back.provenance, ds.provenance);
  EXPECT_EQ(load_archive(dir / "s").meta.at("note"), "x");
}

TEST(SavedSet, EmptyRejectedAndCorruptionDetected) {
  const auto dir = scratch_dir("data_set_err");
  const Dataset ds = gen_two_moons(6, 0.0f, 2);
  EXPECT_EQ(code_of([&] { save_set(ds.head(0), dir / "e"); }), ErrorCode::kInvalidArgument);

  // labels tensor claims one row more than the inputs
  TensorArchive a;
  a.kind = "dataset";
  a.meta = {{"range", {0.0, 1.0}}, {"num_classes", 2}, {"provenance", "t"}};
  a.put("inputs", ds.inputs);
  a.put("labels", Tensor::zeros({7}));
  save_archive(a, dir / "m");
  EXPECT_EQ(code_of([&] { load_set(dir / "m"); }), ErrorCode::kShapeMismatch);

  a.kind = "map";
  save_archive(a, dir / "k");
  EXPECT_EQ(code_of([&] { load_set(dir / "k"); }), ErrorCode::kCorruptManifest);
}
