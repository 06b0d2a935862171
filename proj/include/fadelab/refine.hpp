#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fadelab/data.hpp"
#include "fadelab/fade.hpp"
#include "fadelab/rng.hpp"

namespace fadelab {

enum class Estimator { kInstancewise, kBatchwise };

const char* estimator_name(Estimator e);
Estimator estimator_from_name(const std::string& name);

// How the Gaussian prior enters the objective: folded into the optimizers as
// weight decay, or added to the loss as an explicit negative log prior.
enum class PriorMode { kDecay, kExplicit };

struct RefineConfig {
  std::size_t candidates = 20;
  float weight_decay = 1e-4f;
  float gamma = 0.5f;
  float alpha = 1.0f;
  std::size_t epochs = 6;
  // Training perturbation budget, as a fraction of the input range.
  float eps_lo = 8.0f / 255.0f;
  float eps_hi = 32.0f / 255.0f;
  // Draw a budget per instance instead of one per iteration.
  bool eps_per_instance = false;
  float lr_candidates_start = 1e-3f;
  float lr_candidates_end = 1e-4f;
  float lr_shared = 1e-4f;
  float momentum = 0.9f;
  std::size_t batch_size = 64;
  Estimator estimator = Estimator::kInstancewise;
  float blur_prob = 0.03f;
  PriorMode prior = PriorMode::kDecay;

  void validate() const;
};

// x + U(-eps, eps) noise, optionally Gaussian-blurred (3x3, sigma 1) per
// instance with probability blur_prob. Blur applies to image batches only.
// The result is not clipped to the input range.
Tensor perturb_uniform(const Tensor& x, float eps, RngState& rng, float blur_prob);
Tensor perturb_uniform(const Tensor& x, std::span<const float> eps, RngState& rng, float blur_prob);

// Candidate draw for one iteration: i.i.d. per instance, or one id for the
// whole batch.
CandidateAssignment draw_assignment(Estimator estimator, std::size_t batch, std::size_t num_candidates,
                                    RngState& rng);

// Mean log-likelihood of the batch under the assignment (<= 0).
Tensor loss_likelihood(const FadePosterior& post, const Tensor& x, std::span<const std::int32_t> y,
                       const CandidateAssignment& assign, bool train_mode, RngState& rng);

// Mean over instances of min(||z_i^(c1) - z_i^(c2)||^2, gamma) with a fresh
// c1 != c2 pair per instance.
Tensor loss_uncertainty_margin(const FadePosterior& post, const Tensor& x_perturbed, RngState& rng, float gamma,
                               bool train_mode = true);

// Negative log of the Gaussian prior implied by decay {lambda/C, lambda}.
Tensor prior_penalty(const FadePosterior& post, float weight_decay);

struct RefineLogRow {
  std::size_t epoch = 0;
  std::size_t iter = 0;
  double likelihood = 0.0;
  double margin = 0.0;
  float lr_candidates = 0.0f;
  double batch_accuracy = 0.0;
};

struct RefineResult {
  FadePosterior posterior;
  std::vector<RefineLogRow> log;
};

// Maximises L* + alpha * R by mini-batch SGD from the MAP weights.
// Throws kDiverged naming the iteration when the objective stops being finite.
RefineResult refine(const Checkpoint& map_ckpt, const NetworkSpec& spec, const Dataset& data,
                    const RefineConfig& cfg, RngState& rng);
RefineResult refine(const FadePosterior& init, const Dataset& data, const RefineConfig& cfg, RngState& rng);

std::string refine_log_csv(const std::vector<RefineLogRow>& log);

// Trace of the empirical covariance, across the first num_batches batches of
// one shuffled epoch, of the gradient of L* w.r.t. the shared parameters.
double shared_gradient_variance(const FadePosterior& post, const Dataset& data, Estimator estimator,
                                std::size_t num_batches, std::size_t batch_size, RngState& rng);

}  // namespace fadelab
