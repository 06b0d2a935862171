#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fadelab/attacks.hpp"
#include "fadelab/checkpoint.hpp"
#include "fadelab/experiment.hpp"
#include "json.hpp"

namespace fadelab {

// The pipeline stages behind the CLI commands. Each returns its artifact in
// memory; writing is left to the caller.
Checkpoint stage_train_map(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed,
                           std::string* log_csv = nullptr);
Checkpoint stage_refine(const ExperimentConfig& cfg, const RefineConfig& refine_cfg, const Checkpoint& map_ckpt,
                        const Dataset& train, std::uint64_t seed, std::string* log_csv = nullptr);
// Crafts against `crafting` and tags the set for `target`.
AdversarialSet stage_attack(const AttackEntry& entry, const Model& crafting, const Model& target,
                            const Dataset& clean, std::uint64_t seed);

struct SuiteModel {
  std::string name;
  std::string hash;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
};

struct SuiteCell {
  std::string model;
  std::string attack;
  std::string protocol;
  std::string metric;
  double auroc = 0.5;
  double clean_accuracy = 0.0;
  double adv_accuracy = 0.0;
  std::uint64_t seed = 0;
  std::string attack_hash;
  std::string model_hash;
  std::string crafting_hash;
};

struct SuiteResult {
  std::string suite;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<SuiteModel> models;
  std::vector<SuiteCell> cells;
  // Suite-specific numbers, e.g. gradient variances in the ablations.
  nlohmann::json extras = nlohmann::json::object();

  const SuiteModel& model(const std::string& name) const;
  const SuiteCell& cell(const std::string& model, const std::string& attack, const std::string& metric) const;
};

std::vector<std::string> suite_ids();
// Built-in experiment for a suite; kConfig for unknown ids.
ExperimentConfig suite_config(const std::string& suite);

// Runs map -> refine -> attacks -> reports and writes the artifact tree under
// out_dir. Stage failures are rethrown with the stage name prefixed.
SuiteResult run_suite(const std::string& suite, const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                      const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

nlohmann::json summary_json(const SuiteResult& r);
std::string summary_csv(const SuiteResult& r);
// Attack x metric AUROC grid per model, for the terminal.
std::string summary_table(const SuiteResult& r);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace fadelab
