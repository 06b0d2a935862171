#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>

#include "fadelab/fade.hpp"
#include "fadelab/network.hpp"

namespace fadelab {

struct DeterministicModel {
  NetworkSpec spec;
  ParamSet params;
};

struct FadeModel {
  FadePosterior posterior;
  StackedCandidates stacked;
};

// What attacks and evaluation operate on: a deterministic net or a FADE
// posterior queried through its posterior predictive with T == C samples.
// Parameters are frozen; gradients only flow to the input.
class Model {
 public:
  static Model deterministic(NetworkSpec spec, const ParamSet& params, std::string hash = {});
  static Model fade(const FadePosterior& post, std::string hash = {});
  static Model from_checkpoint(const Checkpoint& ckpt);

  bool is_fade() const { return std::holds_alternative<FadeModel>(impl_); }
  const NetworkSpec& spec() const;
  const FadePosterior& posterior() const;
  // Stacked C-way parallel forward of the frozen posterior.
  ParallelResult parallel(const Tensor& x) const;
  const DeterministicModel& network() const;
  const std::string& hash() const { return hash_; }
  std::size_t num_classes() const { return spec().num_classes(); }

  // Logits Z. For FADE the log posterior predictive, whose softmax is the
  // predictive itself.
  Tensor logits(const Tensor& x) const;
  // Class probabilities [B,K].
  Tensor predictive(const Tensor& x) const;
  // Feature-variance uncertainty [B], differentiable w.r.t. x (FADE only).
  Tensor uncertainty(const Tensor& x) const;

 private:
  std::variant<DeterministicModel, FadeModel> impl_;
  std::string hash_;
};

// Mean cross-entropy of the model's prediction.
Tensor attack_loss(const Model& model, const Tensor& x, std::span<const std::int32_t> y);
// Z_y - max_{i != y} Z_i per instance, [B].
Tensor logit_margin(const Tensor& logits, std::span<const std::int32_t> y);

}  // namespace fadelab
