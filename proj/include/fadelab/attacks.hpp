#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include "fadelab/data.hpp"
#include "fadelab/model.hpp"
#include "fadelab/rng.hpp"
#include "json.hpp"

namespace fadelab {

enum class AttackFamily { kFgsm, kBim, kPgd, kMim, kDim, kTim, kCw, kSpsa };
enum class Norm { kLinf, kL2 };

const char* family_name(AttackFamily f);
AttackFamily family_from_name(const std::string& name);
const char* norm_name(Norm n);
Norm norm_from_name(const std::string& name);

struct AttackConfig {
  AttackFamily family = AttackFamily::kPgd;
  Norm norm = Norm::kLinf;
  float eps = 16.0f / 255.0f;
  float step = 1.0f / 255.0f;
  std::size_t steps = 20;
  // Momentum decay for mim, dim and tim.
  float momentum = 1.0f;
  float dim_prob = 0.5f;
  float dim_min_scale = 0.9f;
  std::size_t tim_kernel = 5;
  float tim_sigma = 1.0f;
  float spsa_sigma = 1e-3f;
  std::size_t spsa_samples = 64;
  float spsa_lr = 0.01f;
  // Weight of the uncertainty term subtracted from the objective.
  float uncertainty_weight = 0.0f;
  bool clip_pixels = true;
  float pixel_lo = 0.0f;
  float pixel_hi = 1.0f;
  // l2 budgets and steps are measured as ||a||_2 / sqrt(d) unless false.
  bool normalized_l2 = true;

  void validate() const;
  std::string label() const;
};

nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);
std::string attack_config_hash(const AttackConfig& cfg);

// ||a||_2 / sqrt(numel).
double normalized_l2(std::span<const float> a);
double normalized_l2(const Tensor& a);
// Per-instance size of x_adv - x in the configured norm.
std::vector<double> perturbation_sizes(const Tensor& x, const Tensor& x_adv, Norm norm, bool normalized_l2);

// Single-step attack. A zero gradient under l2 leaves the instance unchanged.
Tensor fgsm(const Model& model, const Tensor& x, std::span<const std::int32_t> y, float eps, Norm norm,
            bool clip_pixels, bool normalized = true);

// bim, pgd, mim, dim, tim and cw, for either norm; fgsm and spsa are routed to
// their own implementations. With uncertainty_weight > 0 the objective is
// l_base - w * U (FADE models only).
Tensor iterative_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y,
                        const AttackConfig& cfg, RngState& rng);

Tensor spsa_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y, const AttackConfig& cfg,
                   RngState& rng);

// Two-point Rademacher estimate of the gradient of a per-instance scalar
// function f over a batch; f returns one value per row.
template <class F>
std::vector<float> spsa_gradient(F&& f, const Tensor& x, float sigma, std::size_t samples, RngState& rng);

Tensor ideal_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y, AttackConfig base,
                    float uncertainty_weight, RngState& rng);

// Dispatches on cfg.family.
Tensor run_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y, const AttackConfig& cfg,
                  RngState& rng);

// Crafts against `model` in fixed-size chunks, each with its own forked rng.
Dataset craft_adversarial(const Model& model, const Dataset& clean, const AttackConfig& cfg, RngState& rng,
                          std::size_t batch_size = 100);

struct AdversarialSet {
  Dataset data;
  AttackConfig config;
  std::string crafting_hash;
  std::string target_hash;
  std::uint64_t seed = 0;
};

// Crafts against the surrogate only; the target's hash is recorded so the
// set can be evaluated against it.
AdversarialSet transfer_craft(const Model& surrogate, const Model& target, const Dataset& clean,
                              const AttackConfig& cfg, std::uint64_t seed);
AdversarialSet white_box_craft(const Model& model, const Dataset& clean, const AttackConfig& cfg, std::uint64_t seed);

// Dataset container plus <stem>.attack.json sidecar.
std::filesystem::path attack_sidecar_path(const std::filesystem::path& stem);
void save_adversarial_set(const AdversarialSet& set, const std::filesystem::path& stem);
nlohmann::json load_attack_sidecar(const std::filesystem::path& stem);

}  // namespace fadelab

#include "fadelab/detail/spsa_impl.hpp"
