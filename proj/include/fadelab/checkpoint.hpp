#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fadelab/network.hpp"
#include "fadelab/tensor.hpp"
#include "json.hpp"

namespace fadelab {

// Named tensors plus free-form metadata. On disk: <stem>.json holds the
// manifest (name, shape, byte offset, byte length per tensor, plus meta) and
// <stem>.bin the little-endian float32 payload.
struct TensorArchive {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  void put(std::string name, Tensor value);

  std::vector<std::uint8_t> blob() const;
  std::string manifest_text() const;
  // SHA-256 over manifest text and blob, i.e. the bytes save() writes.
  std::string hash() const;
};

using Checkpoint = TensorArchive;

// `stem` may carry a .json suffix; both files are derived from it.
void save_archive(const TensorArchive& archive, const std::filesystem::path& stem);
TensorArchive load_archive(const std::filesystem::path& stem);
std::filesystem::path archive_manifest_path(const std::filesystem::path& stem);
std::filesystem::path archive_blob_path(const std::filesystem::path& stem);
// Hash of an archive already on disk.
std::string archive_file_hash(const std::filesystem::path& stem);

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& stem) { save_archive(ckpt, stem); }
inline Checkpoint load_checkpoint(const std::filesystem::path& stem) { return load_archive(stem); }

// Deterministic network checkpoints ("map" kind).
Checkpoint make_network_checkpoint(const NetworkSpec& spec, const ParamSet& params, nlohmann::json meta);
NetworkSpec spec_from_checkpoint(const Checkpoint& ckpt);
ParamSet params_from_checkpoint(const Checkpoint& ckpt, const NetworkSpec& spec);

}  // namespace fadelab
