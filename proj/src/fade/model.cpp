#include "fadelab/model.hpp"

#include "fadelab/error.hpp"
#include "fadelab/ops.hpp"

namespace fadelab {

Model Model::deterministic(NetworkSpec spec, const ParamSet& params, std::string hash) {
  spec.validate();
  require(params.size() == spec.layers.size(), ErrorCode::kShapeMismatch, "model parameters do not match network");
  Model m;
  m.impl_ = DeterministicModel{std::move(spec), clone_params(params, false)};
  m.hash_ = std::move(hash);
  return m;
}

Model Model::fade(const FadePosterior& post, std::string hash) {
  Model m;
  FadeModel fm{post.clone(false), {}};
  {
    NoGradGuard guard;
    fm.stacked = stack_candidates(fm.posterior);
  }
  m.impl_ = std::move(fm);
  m.hash_ = std::move(hash);
  return m;
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind == "fade") return fade(fade_from_checkpoint(ckpt), ckpt.hash());
  if (ckpt.kind == "map") {
    const auto spec = spec_from_checkpoint(ckpt);
    return deterministic(spec, params_from_checkpoint(ckpt, spec), ckpt.hash());
  }
  fail(ErrorCode::kCorruptManifest, "checkpoint kind '" + ckpt.kind + "' is not a model");
}

const NetworkSpec& Model::spec() const {
  return is_fade() ? std::get<FadeModel>(impl_).posterior.spec : std::get<DeterministicModel>(impl_).spec;
}

const FadePosterior& Model::posterior() const {
  require(is_fade(), ErrorCode::kInvalidArgument, "model is not a FADE posterior");
  return std::get<FadeModel>(impl_).posterior;
}

ParallelResult Model::parallel(const Tensor& x) const {
  require(is_fade(), ErrorCode::kInvalidArgument, "model is not a FADE posterior");
  const auto& fm = std::get<FadeModel>(impl_);
  return forward_parallel(fm.posterior, fm.stacked, x, fm.posterior.num_candidates());
}

const DeterministicModel& Model::network() const {
  require(!is_fade(), ErrorCode::kInvalidArgument, "model is a FADE posterior, not a deterministic network");
  return std::get<DeterministicModel>(impl_);
}

Tensor Model::logits(const Tensor& x) const {
  if (is_fade()) {
    return log_predictive_from_logits(parallel(x).logits);
  }
  RngState unused(0);
  const auto& net = network();
  return forward(net.spec, net.params, x, false, unused).logits;
}

Tensor Model::predictive(const Tensor& x) const {
  if (is_fade()) return ops::mean(ops::softmax(parallel(x).logits), 1);
  return ops::softmax(logits(x));
}

Tensor Model::uncertainty(const Tensor& x) const {
  return feature_variance_op(parallel(x).z);
}

Tensor attack_loss(const Model& model, const Tensor& x, std::span<const std::int32_t> y) {
  return ops::cross_entropy(model.logits(x), y);
}

Tensor logit_margin(const Tensor& logits, std::span<const std::int32_t> y) {
  require(logits.rank() == 2, ErrorCode::kShapeMismatch, "margin expects [B,K] logits");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<float> mask(b * k, 0.0f);
  for (std::size_t i = 0; i < b; ++i) {
    require(y[i] >= 0 && static_cast<std::size_t>(y[i]) < k, ErrorCode::kInvalidArgument, "label out of range");
    mask[i * k + static_cast<std::size_t>(y[i])] = -1e9f;
  }
  const Tensor others = ops::max(ops::add(logits, Tensor::from_data({b, k}, std::move(mask))), 1);
  return ops::sub(ops::select_class(logits, y), others);
}

}  // namespace fadelab
