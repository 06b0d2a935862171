#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fadelab/checkpoint.hpp"
#include "fadelab/network.hpp"
#include "fadelab/rng.hpp"

namespace fadelab {

// Few-layer deep ensemble: C candidate parameter sets for the Bayesian
// sub-module plus one deterministic set for every other layer.
struct FadePosterior {
  NetworkSpec spec;
  // Defined for layers outside the Bayesian sub-module only.
  ParamSet shared;
  // Each candidate defines the Bayesian layers only.
  std::vector<ParamSet> candidates;

  std::size_t num_candidates() const { return candidates.size(); }
  // Full parameter set for a plain forward under candidate k.
  ParamSet candidate_params(std::size_t k) const;
  std::vector<Tensor> shared_tensors() const;
  std::vector<Tensor> candidate_tensors(std::size_t k) const;
  // Copy with requires_grad set on every parameter.
  FadePosterior clone(bool requires_grad) const;
};

// Per-instance candidate ids, zero-based: instance i uses candidate ids[i].
struct CandidateAssignment {
  std::vector<std::size_t> ids;

  static CandidateAssignment uniform(std::size_t batch, std::size_t num_candidates, RngState& rng);
  static CandidateAssignment constant(std::size_t batch, std::size_t candidate);
};

FadePosterior init_from_map(const Checkpoint& ckpt, const NetworkSpec& spec, std::size_t num_candidates);
FadePosterior init_from_params(const NetworkSpec& spec, const ParamSet& params, std::size_t num_candidates);

// Layers before the Bayesian sub-module, shared by every candidate.
Tensor fade_trunk(const FadePosterior& post, const Tensor& x, bool train_mode, RngState& rng);
// Bayesian sub-module on trunk activations h, row i under candidate
// assign.ids[i]; returns z.
Tensor fade_submodule(const FadePosterior& post, const Tensor& h, const CandidateAssignment& assign, bool train_mode,
                      RngState& rng);
Tensor fade_head(const FadePosterior& post, const Tensor& z, bool train_mode, RngState& rng);

// Instance i runs through {candidate ids[i], shared}; gradients reach exactly
// the assigned candidates and the shared parameters.
ForwardResult forward_instancewise(const FadePosterior& post, const Tensor& x, const CandidateAssignment& assign,
                                   bool train_mode, RngState& rng);

// All candidates at once: the trunk runs once and the sub-module runs as
// grouped kernels over candidate-stacked weights. logits [B,T,K], z [B,T,D].
struct ParallelResult {
  Tensor logits;
  Tensor z;
};
ParallelResult forward_parallel(const FadePosterior& post, const Tensor& x, std::size_t num_samples);

// Candidate weights of each Bayesian layer concatenated into the grouped
// layout: dense [C,in,out], conv [C*out_ch,in_ch,k,k], bias [C*out]. Built
// once, it lets repeated inference skip the restacking; it stays
// differentiable w.r.t. the candidates it was built from.
struct StackedCandidates {
  std::size_t num_candidates = 0;
  ParamSet layers;
};
StackedCandidates stack_candidates(const FadePosterior& post);
ParallelResult forward_parallel(const FadePosterior& post, const StackedCandidates& stacked, const Tensor& x,
                                std::size_t num_samples);

// Reference path: one full forward per candidate, stacked like forward_parallel.
ParallelResult forward_sequential(const FadePosterior& post, const Tensor& x);

// Mean of per-candidate softmax outputs, [B,K].
Tensor posterior_predictive(const FadePosterior& post, const Tensor& x, std::size_t num_samples);
// log of the posterior predictive from stacked logits [B,T,K], computed
// stably; differentiable.
Tensor log_predictive_from_logits(const Tensor& logits);

// Unbiased variance across samples, summed over coordinates, one value per
// instance; tiny negative results from cancellation are clamped to 0.
std::vector<double> feature_variance(std::span<const Tensor> z_samples);
// Same estimator on a stacked [B,T,D] tensor.
std::vector<double> feature_variance(const Tensor& stacked);
// Differentiable [B] version on a stacked [B,T,D] tensor.
Tensor feature_variance_op(const Tensor& stacked);
std::vector<double> softmax_variance(std::span<const Tensor> prob_samples);
std::vector<double> softmax_variance(const Tensor& stacked);

// Feature variance over T dropout-active forwards of a deterministic net.
std::vector<double> mc_dropout_uncertainty(const NetworkSpec& spec, const ParamSet& params, const Tensor& x,
                                           std::size_t num_samples, RngState& rng);

// Candidate tensors are named bayes.<layer>.cand<k>.<weight|bias>.
Checkpoint make_fade_checkpoint(const FadePosterior& post, nlohmann::json meta);
FadePosterior fade_from_checkpoint(const Checkpoint& ckpt);
std::string candidate_param_name(std::size_t layer, std::size_t candidate, bool bias);

}  // namespace fadelab
