#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fadelab/attacks.hpp"
#include "fadelab/data.hpp"
#include "fadelab/evalkit.hpp"
#include "fadelab/network.hpp"
#include "fadelab/refine.hpp"
#include "fadelab/train.hpp"
#include "json.hpp"

namespace fadelab {

inline constexpr const char* kExperimentSchema = "fadelab-experiment/1";

struct DatasetSection {
  // "idx" reads the four MNIST-style files from the data directory;
  // "two_moons" generates both splits from the experiment seed.
  std::string source = "idx";
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::size_t train_size = 1000;
  std::size_t test_size = 500;
  float noise_std = 0.1f;
  // Leading test instances that attacks and detection run on.
  std::size_t eval_size = 1000;
};

struct ModelSection {
  std::string architecture;
  std::optional<std::size_t> bayes_boundary;
};

// White-box attacks craft against the model under evaluation, transfer
// attacks against the surrogate MAP network.
enum class Protocol { kWhiteBox, kTransfer };
const char* protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);

struct AttackEntry {
  std::string id;
  Protocol protocol = Protocol::kTransfer;
  AttackConfig config;
};

struct EvalSection {
  std::vector<Metric> metrics{Metric::kFeatureVariance};
  // 0 means T = C.
  std::size_t samples = 0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSection dataset;
  ModelSection model;
  MapTrainConfig map;
  RefineConfig refine;
  std::vector<AttackEntry> attacks;
  EvalSection eval;

  NetworkSpec network() const;
  std::size_t eval_samples() const { return eval.samples == 0 ? refine.candidates : eval.samples; }
};

// Every section is optional except "schema", "seed" and "model"; missing
// fields keep their defaults, unknown keys are kConfig errors.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);
std::string experiment_hash(const ExperimentConfig& cfg);

nlohmann::json to_json(const RefineConfig& cfg);
RefineConfig refine_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MapTrainConfig& cfg);
MapTrainConfig map_config_from_json(const nlohmann::json& j);

struct Splits {
  Dataset train;
  Dataset test;
  Dataset eval;
};

Splits load_splits(const ExperimentConfig& cfg, const std::filesystem::path& data_dir);

}  // namespace fadelab
