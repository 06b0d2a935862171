#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fadelab/data.hpp"
#include "fadelab/model.hpp"
#include "json.hpp"

namespace fadelab {

enum class Metric { kFeatureVariance, kSoftmaxVariance, kMcDropout };

const char* metric_name(Metric m);
Metric metric_from_name(const std::string& name);

// P(adversarial score > clean score), ties counted one half.
double auroc(std::span<const double> neg, std::span<const double> pos);

struct Histogram {
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<std::size_t> clean;
  std::vector<std::size_t> adv;
};

// Equal-width bins spanning both score sets; the last bin is closed.
Histogram shared_histogram(std::span<const double> clean, std::span<const double> adv, std::size_t bins = 64);

struct DetectionReport {
  std::string metric;
  std::vector<double> clean_scores;
  std::vector<double> adv_scores;
  std::vector<std::int32_t> clean_labels;
  std::vector<std::int32_t> adv_labels;
  std::vector<std::int32_t> clean_pred;
  std::vector<std::int32_t> adv_pred;
  double auroc = 0.5;
  double clean_accuracy = 0.0;
  double adv_accuracy = 0.0;
  Histogram histogram;
  // attack_hash, model_hash, seed, samples, scored subset.
  nlohmann::json metadata = nlohmann::json::object();
};

struct Scored {
  std::vector<double> scores;
  std::vector<std::int32_t> pred;
};

// Uncertainty of every instance plus the predictive argmax. feature_var and
// softmax_var need a FADE model with T == C; mc_dropout needs a deterministic
// network with dropout, T >= 2, and draws from rng.
Scored score_dataset(const Model& model, const Dataset& data, Metric metric, std::size_t samples, RngState& rng,
                     std::size_t batch_size = 100);

DetectionReport evaluate_detection(const Model& model, const Dataset& clean, const Dataset& adv, Metric metric,
                                   std::size_t samples, std::uint64_t seed, std::string attack_hash = {});

// Top-1 accuracy of the posterior predictive (FADE) or the softmax.
double evaluate_accuracy(const Model& model, const Dataset& data, std::size_t samples);
std::vector<std::int32_t> predict(const Model& model, const Dataset& data, std::size_t batch_size = 100);

nlohmann::json report_to_json(const DetectionReport& r);
DetectionReport report_from_json(const nlohmann::json& j);
// id,label,pred,score,split with clean rows first.
std::string report_csv(const DetectionReport& r);
// Writes <stem>.json and <stem>.csv.
void save_report(const DetectionReport& r, const std::filesystem::path& stem);
DetectionReport load_report(const std::filesystem::path& json_path);

}  // namespace fadelab
