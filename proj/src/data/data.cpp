#include "fadelab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "fadelab/checkpoint.hpp"
#include "fadelab/error.hpp"

namespace fadelab {

Shape Dataset::instance_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

void Dataset::validate() const {
  require(inputs.defined() && inputs.rank() >= 2, ErrorCode::kShapeMismatch, "dataset: inputs must be [n, ...]");
  require(inputs.dim(0) == labels.size(), ErrorCode::kCountMismatch,
          "dataset: " + std::to_string(inputs.dim(0)) + " inputs vs " + std::to_string(labels.size()) + " labels");
  for (auto y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < num_classes, ErrorCode::kInvalidArgument,
            "dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  for (float v : inputs.data())
    require(v >= range_lo && v <= range_hi, ErrorCode::kInvalidArgument, "dataset: input value outside declared range");
}

Tensor Dataset::gather_inputs(std::span<const std::size_t> rows) const {
  const std::size_t row = inputs.numel() / std::max<std::size_t>(size(), 1);
  Shape shape = inputs.shape();
  shape[0] = rows.size();
  std::vector<float> out(rows.size() * row);
  const auto d = inputs.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < size(), ErrorCode::kInvalidArgument, "dataset: row index out of range");
    std::copy(d.begin() + rows[i] * row, d.begin() + (rows[i] + 1) * row, out.begin() + i * row);
  }
  return Tensor::from_data(shape, std::move(out));
}

std::vector<std::int32_t> Dataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<std::int32_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels.at(r));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out = *this;
  out.inputs = gather_inputs(rows);
  out.labels = gather_labels(rows);
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> rows(std::min(n, size()));
  std::iota(rows.begin(), rows.end(), 0);
  return subset(rows);
}

Dataset Dataset::with_inputs(Tensor new_inputs, std::string new_provenance) const {
  require(new_inputs.shape() == inputs.shape(), ErrorCode::kShapeMismatch,
          "dataset: replacement inputs " + shape_str(new_inputs.shape()) + " vs " + shape_str(inputs.shape()));
  Dataset out = *this;
  out.inputs = std::move(new_inputs);
  out.provenance = std::move(new_provenance);
  return out;
}

Dataset gen_two_moons(std::size_t n, float noise_std, std::uint64_t seed) {
  require(n >= 2, ErrorCode::kInvalidArgument, "gen_two_moons: need n >= 2");
  require(noise_std >= 0.0f, ErrorCode::kInvalidArgument, "gen_two_moons: noise_std must be >= 0");
  RngState rng(seed);
  std::vector<float> xs(2 * n);
  std::vector<std::int32_t> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = std::numbers::pi * rng.uniform01();
    double px, py;
    if (i % 2 == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    // [-1,2] x [-0.5,1] -> [1/14, 13/14] x [1/8, 7/8]
    px = (px + 1.25) / 3.5;
    py = (py + 0.75) / 2.0;
    if (noise_std > 0.0f) {
      px += noise_std * rng.normal();
      py += noise_std * rng.normal();
    }
    xs[2 * i] = static_cast<float>(std::clamp(px, 0.0, 1.0));
    xs[2 * i + 1] = static_cast<float>(std::clamp(py, 0.0, 1.0));
    ys[i] = static_cast<std::int32_t>(i % 2);
  }
  Dataset ds;
  ds.inputs = Tensor::from_data({n, 2}, std::move(xs));
  ds.labels = std::move(ys);
  ds.num_classes = 2;
  ds.provenance = "two_moons(n=" + std::to_string(n) + ",seed=" + std::to_string(seed) + ")";
  return ds;
}

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = slurp(images);
  const auto lab = slurp(labels);
  require(img.size() >= 16, ErrorCode::kTruncatedBlob, images.string() + ": truncated IDX header");
  require(lab.size() >= 8, ErrorCode::kTruncatedBlob, labels.string() + ": truncated IDX header");
  require(be32(img, 0) == 0x00000803, ErrorCode::kBadMagic, images.string() + ": not an IDX image file");
  require(be32(lab, 0) == 0x00000801, ErrorCode::kBadMagic, labels.string() + ": not an IDX label file");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  require(n == nl, ErrorCode::kCountMismatch,
          "IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  require(img.size() - 16 >= n * rows * cols, ErrorCode::kTruncatedBlob, images.string() + ": truncated pixel data");
  require(lab.size() - 8 >= n, ErrorCode::kTruncatedBlob, labels.string() + ": truncated label data");
  std::vector<float> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  Dataset ds;
  ds.inputs = Tensor::from_data({n, 1, rows, cols}, std::move(px));
  ds.labels.resize(n);
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  ds.provenance = "idx:" + images.filename().string();
  return ds;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  require(batch_size >= 1, ErrorCode::kInvalidArgument, "batches: batch_size must be >= 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  RngState rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(perm.begin() + start, perm.begin() + std::min(n, start + batch_size));
  return out;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows) {
  return Batch{ds.gather_inputs(rows), ds.gather_labels(rows)};
}

void save_set(const Dataset& ds, const std::filesystem::path& stem, nlohmann::json extra_meta) {
  require(ds.size() > 0, ErrorCode::kInvalidArgument, "save_set: refusing to save an empty dataset");
  ds.validate();
  TensorArchive a;
  a.kind = "dataset";
  a.meta = std::move(extra_meta);
  a.meta["range"] = {ds.range_lo, ds.range_hi};
  a.meta["num_classes"] = ds.num_classes;
  a.meta["provenance"] = ds.provenance;
  std::vector<float> labels(ds.labels.begin(), ds.labels.end());
  a.put("inputs", ds.inputs.detach());
  a.put("labels", Tensor::from_data({ds.size()}, std::move(labels)));
  save_archive(a, stem);
}

Dataset load_set(const std::filesystem::path& stem) {
  const TensorArchive a = load_archive(stem);
  require(a.kind == "dataset", ErrorCode::kCorruptManifest, stem.string() + ": archive kind '" + a.kind + "' is not a dataset");
  Dataset ds;
  try {
    ds.range_lo = a.meta.at("range").at(0).get<float>();
    ds.range_hi = a.meta.at("range").at(1).get<float>();
    ds.num_classes = a.meta.at("num_classes").get<std::size_t>();
    ds.provenance = a.meta.at("provenance").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptManifest, stem.string() + ": " + e.what());
  }
  ds.inputs = a.at("inputs");
  const Tensor& labels = a.at("labels");
  require(labels.rank() == 1 && ds.inputs.rank() >= 2 && labels.dim(0) == ds.inputs.dim(0), ErrorCode::kShapeMismatch,
          stem.string() + ": inputs " + shape_str(ds.inputs.shape()) + " vs labels " + shape_str(labels.shape()));
  for (float v : labels.data()) {
    require(v >= 0.0f && v == std::floor(v), ErrorCode::kCorruptManifest, stem.string() + ": non-integer label");
    ds.labels.push_back(static_cast<std::int32_t>(v));
  }
  ds.validate();
  return ds;
}

}  // namespace fadelab
