#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fadelab/rng.hpp"
#include "fadelab/tensor.hpp"
#include "json.hpp"

namespace fadelab {

struct Dataset {
  Tensor inputs;  // [n, ...]
  std::vector<std::int32_t> labels;
  float range_lo = 0.0f;
  float range_hi = 1.0f;
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  Shape instance_shape() const;
  // Labels in [0, num_classes), inputs within [range_lo, range_hi].
  void validate() const;

  Tensor gather_inputs(std::span<const std::size_t> rows) const;
  std::vector<std::int32_t> gather_labels(std::span<const std::size_t> rows) const;
  Dataset subset(std::span<const std::size_t> rows) const;
  Dataset head(std::size_t n) const;
  // Same labels and metadata, new inputs of identical shape.
  Dataset with_inputs(Tensor inputs, std::string provenance) const;
};

// Two interleaved half circles mapped into [0,1]^2; label i % 2.
Dataset gen_two_moons(std::size_t n, float noise_std, std::uint64_t seed);

// MNIST-style IDX pair; pixel bytes scaled by 1/255 into [0,1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// One epoch as index batches: a seeded permutation cut into batch_size chunks,
// final short batch included.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

struct Batch {
  Tensor x;
  std::vector<std::int32_t> y;
};
Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows);

// JSON manifest + little-endian float blob, same container as checkpoints.
void save_set(const Dataset& ds, const std::filesystem::path& stem, nlohmann::json extra_meta = nlohmann::json::object());
Dataset load_set(const std::filesystem::path& stem);

}  // namespace fadelab
