#include "fadelab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "fadelab/error.hpp"
#include "fadelab/hash.hpp"

namespace fadelab {

namespace {

constexpr const char* kFormat = "fadelab-archive/1";

std::filesystem::path strip(const std::filesystem::path& stem) {
  auto p = stem;
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) fail(ErrorCode::kIo, "short write to " + path.string());
}

void put_f32le(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail(ErrorCode::kShapeMismatch, "archive has no tensor '" + name + "'");
}

void TensorArchive::put(std::string name, Tensor value) {
  for (auto& [n, t] : tensors)
    if (n == name) {
      t = std::move(value);
      return;
    }
  tensors.emplace_back(std::move(name), std::move(value));
}

std::vector<std::uint8_t> TensorArchive::blob() const {
  std::vector<std::uint8_t> out;
  for (const auto& [n, t] : tensors)
    for (float v : t.data()) put_f32le(out, v);
  return out;
}

std::string TensorArchive::manifest_text() const {
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [n, t] : tensors) {
    const std::size_t len = t.numel() * 4;
    entries.push_back({{"name", n}, {"shape", t.shape()}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  nlohmann::json j{{"format", kFormat}, {"kind", kind}, {"blob_bytes", offset}, {"tensors", entries}, {"meta", meta}};
  return j.dump(2) + "\n";
}

std::string TensorArchive::hash() const {
  std::string text = manifest_text();
  const auto b = blob();
  text.append(reinterpret_cast<const char*>(b.data()), b.size());
  return sha256_hex(text);
}

std::filesystem::path archive_manifest_path(const std::filesystem::path& stem) {
  auto p = strip(stem);
  p += ".json";
  return p;
}

std::filesystem::path archive_blob_path(const std::filesystem::path& stem) {
  auto p = strip(stem);
  p += ".bin";
  return p;
}

void save_archive(const TensorArchive& archive, const std::filesystem::path& stem) {
  const auto text = archive.manifest_text();
  const auto b = archive.blob();
  write_bytes(archive_blob_path(stem), b.data(), b.size());
  write_bytes(archive_manifest_path(stem), text.data(), text.size());
}

TensorArchive load_archive(const std::filesystem::path& stem) {
  const auto manifest_bytes = read_bytes(archive_manifest_path(stem));
  const auto blob = read_bytes(archive_blob_path(stem));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptManifest, archive_manifest_path(stem).string() + ": " + e.what());
  }
  TensorArchive out;
  try {
    if (j.at("format").get<std::string>() != kFormat)
      fail(ErrorCode::kCorruptManifest, "unsupported archive format '" + j.at("format").get<std::string>() + "'");
    out.kind = j.at("kind").get<std::string>();
    out.meta = j.at("meta");
    const auto declared = j.at("blob_bytes").get<std::size_t>();
    if (declared != blob.size())
      fail(ErrorCode::kTruncatedBlob, "blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                                          std::to_string(declared));
    for (const auto& e : j.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (shape_numel(shape) * 4 != length)
        fail(ErrorCode::kShapeMismatch, "tensor '" + name + "' shape " + shape_str(shape) + " needs " +
                                            std::to_string(shape_numel(shape) * 4) + " bytes, manifest says " +
                                            std::to_string(length));
      if (offset > blob.size() || length > blob.size() - offset)
        fail(ErrorCode::kTruncatedBlob, "tensor '" + name + "' spans past the end of the blob");
      std::vector<float> values(shape_numel(shape));
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32le(blob.data() + offset + 4 * i);
      out.tensors.emplace_back(name, Tensor::from_data(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptManifest, archive_manifest_path(stem).string() + ": " + e.what());
  }
  return out;
}

std::string archive_file_hash(const std::filesystem::path& stem) {
  auto text = read_bytes(archive_manifest_path(stem));
  const auto b = read_bytes(archive_blob_path(stem));
  text.insert(text.end(), b.begin(), b.end());
  return sha256_hex(text);
}

Checkpoint make_network_checkpoint(const NetworkSpec& spec, const ParamSet& params, nlohmann::json meta) {
  require(params.size() == spec.layers.size(), ErrorCode::kShapeMismatch, "checkpoint: parameters do not match network");
  Checkpoint ckpt;
  ckpt.kind = "map";
  ckpt.meta = std::move(meta);
  ckpt.meta["network"] = to_json(spec);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].weight.defined()) ckpt.put(param_name(i, false), params[i].weight.detach());
    if (params[i].bias.defined()) ckpt.put(param_name(i, true), params[i].bias.detach());
  }
  return ckpt;
}

NetworkSpec spec_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("network")) fail(ErrorCode::kCorruptManifest, "checkpoint meta has no network description");
  return network_spec_from_json(ckpt.meta.at("network"));
}

ParamSet params_from_checkpoint(const Checkpoint& ckpt, const NetworkSpec& spec) {
  ParamSet params(spec.layers.size());
  // Reuse init shapes as the reference for validation.
  RngState rng(0);
  const ParamSet ref = init_params(spec, rng);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!ref[i].weight.defined()) continue;
    for (bool bias : {false, true}) {
      const auto name = param_name(i, bias);
      const Tensor& t = ckpt.at(name);
      const Tensor& want = bias ? ref[i].bias : ref[i].weight;
      require(t.shape() == want.shape(), ErrorCode::kShapeMismatch,
              "checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", network needs " +
                  shape_str(want.shape()));
      (bias ? params[i].bias : params[i].weight) = t.detach().set_requires_grad(true);
    }
  }
  return params;
}

}  // namespace fadelab
